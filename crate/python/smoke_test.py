"""Smoke test for the `strata` extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
Then run:                 python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import strata

TINY_CORPUS = dict(num_videos=24, num_eval_videos=12, clips_per_video=6)
TINY_TRAIN = dict(total_steps=12, k=4)


def main():
    train_set, eval_set = strata.generate(seed=0, **TINY_CORPUS)
    assert len(train_set) == 24 and len(eval_set) == 12
    assert train_set.split == "train"
    video = train_set.video(0)
    assert len(video["clips"]) == 6 and video["summary_tokens"]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        train_set.save(tmp / "train")
        again = strata.Corpus.load(tmp / "train")
        assert again.manifest_hash == train_set.manifest_hash

        ck, metrics = strata.train(train_set, mode="hier-sa", **TINY_TRAIN)
        assert ck.step == 12 and len(metrics) == 12
        assert {m["level"] for m in metrics} == {"child", "parent"}
        assert all(math.isfinite(m["loss"]) for m in metrics)

        ck.save(tmp / "ck.json")
        loaded = strata.Checkpoint.load(tmp / "ck.json")
        assert loaded.mode == "hier-sa" and loaded.config()["k"] == 4

        # same seed, same trajectory
        _, metrics_again = strata.train(train_set, mode="hier-sa", **TINY_TRAIN)
        assert metrics_again == metrics

    report = strata.evaluate(ck, eval_set, train_set, items=20, k=4)
    for task in ("child_mcq_inter", "child_mcq_intra", "summary_mcq", "shuffle_mcq"):
        assert 0.0 <= report[task]["accuracy"] <= 100.0
        assert report[task]["items"] == 20
    assert report["linear_probe"] is not None and report["retrieval"] is not None

    texts = ck.embed_texts([[1, 2, 3], [4]])
    clips = ck.embed_clips([[[0.1] * 16] * 4])
    for v in texts + clips:
        assert abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-6

    rows = ck.export(eval_set, level="child")
    assert len(rows) == 12 * 6 and rows[0]["level"] == "child"

    child, _ = strata.train(train_set, mode="child-only", **TINY_TRAIN)
    wo_joint, wj_metrics = strata.train(train_set, mode="wo-joint", init=child, **TINY_TRAIN)
    assert all(m["level"] == "parent" for m in wj_metrics)

    reports = strata.gradcheck(seeds=1)
    assert reports and all(r["passed"] for r in reports)

    try:
        strata.Corpus.load("/definitely/not/here")
    except strata.StrataError as e:
        assert str(e).startswith("path:")
    else:
        raise AssertionError("missing corpus should raise")

    try:
        strata.train(train_set, mode="wo-joint", **TINY_TRAIN)
    except strata.StrataError as e:
        assert str(e).startswith("config:")
    else:
        raise AssertionError("wo-joint without init should raise")

    print("strata smoke test passed:", sorted(strata.MODES))


if __name__ == "__main__":
    main()

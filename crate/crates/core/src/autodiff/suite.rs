//! Finite-difference checks for every registered graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, project, random_tensor, GradCheckReport};
use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Inputs are drawn from `[lo, hi)`.
    range: (Scalar, Scalar),
    run: OpFn,
}

const LN_EPS: Scalar = 1e-9;

fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], range: (-1.0, 1.0), run: |g, v| g.matmul(v[0], v[1]) },
        OpCase { name: "matmul_batched", shapes: &[&[2, 3, 4], &[2, 4, 2]], range: (-1.0, 1.0), run: |g, v| g.matmul(v[0], v[1]) },
        OpCase { name: "add_broadcast", shapes: &[&[3, 4], &[4]], range: (-1.0, 1.0), run: |g, v| g.add(v[0], v[1]) },
        OpCase { name: "sub_broadcast", shapes: &[&[2, 3, 4], &[3, 1]], range: (-1.0, 1.0), run: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "mul_broadcast", shapes: &[&[3, 4], &[3, 1]], range: (-1.0, 1.0), run: |g, v| g.mul(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[&[3, 2]], range: (-1.0, 1.0), run: |g, v| g.scale(v[0], -2.5) },
        OpCase { name: "transpose", shapes: &[&[2, 3, 4]], range: (-1.0, 1.0), run: |g, v| g.transpose(v[0], 0, 2) },
        OpCase { name: "reshape", shapes: &[&[2, 6]], range: (-1.0, 1.0), run: |g, v| g.reshape(v[0], &[3, 4]) },
        OpCase { name: "concat", shapes: &[&[2, 3], &[2, 1], &[2, 2]], range: (-1.0, 1.0), run: |g, v| g.concat(v, 1) },
        OpCase { name: "slice", shapes: &[&[2, 5, 2]], range: (-1.0, 1.0), run: |g, v| g.slice(v[0], 1, 1, 4) },
        OpCase { name: "softmax", shapes: &[&[3, 5]], range: (-2.0, 2.0), run: |g, v| g.softmax(v[0]) },
        OpCase { name: "layer_norm", shapes: &[&[3, 6]], range: (-2.0, 2.0), run: |g, v| g.layer_norm(v[0], LN_EPS) },
        OpCase { name: "gelu", shapes: &[&[4, 3]], range: (-3.0, 3.0), run: |g, v| g.gelu(v[0]) },
        OpCase { name: "embedding", shapes: &[&[5, 3]], range: (-1.0, 1.0), run: |g, v| g.embedding(v[0], &[4, 0, 4, 2]) },
        OpCase { name: "mean_axis", shapes: &[&[2, 4, 3]], range: (-1.0, 1.0), run: |g, v| g.mean_axis(v[0], 1) },
        OpCase { name: "l2_normalize", shapes: &[&[3, 4]], range: (-1.0, 1.0), run: |g, v| g.l2_normalize(v[0]) },
        OpCase { name: "log", shapes: &[&[3, 3]], range: (0.5, 2.0), run: |g, v| g.log(v[0]) },
        OpCase { name: "exp", shapes: &[&[3, 3]], range: (-1.0, 1.0), run: |g, v| g.exp(v[0]) },
        OpCase {
            name: "masked_logsumexp",
            shapes: &[&[3, 4]],
            range: (-2.0, 2.0),
            run: |g, v| {
                let mask = [true, false, true, false, false, false, false, true, true, true, true, true];
                g.masked_logsumexp(v[0], &mask)
            },
        },
    ]
}

/// Names of the ops covered by [`check_all_ops`].
pub fn registered_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Finite-difference check of every registered op, once per seed. Tensor-valued
/// outputs are reduced with a seeded random projection. Returns one report per
/// op holding the worst error across seeds.
pub fn check_all_ops(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for case in cases() {
        let mut worst: Option<GradCheckReport> = None;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) + 17);
            let (lo, hi) = case.range;
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| {
                    let t = random_tensor(s, 1.0, &mut rng);
                    let data = t.data().iter().map(|x| lo + (hi - lo) * (x + 1.0) / 2.0).collect();
                    Tensor::new(s.to_vec(), data).expect("shape")
                })
                .collect();
            let proj_seed: u64 = rng.random();
            let run = case.run;
            let rep = check_inputs(case.name, &inputs, |g, v| {
                let out = run(g, v)?;
                project(g, out, proj_seed)
            })?;
            if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
                worst = Some(rep);
            }
        }
        reports.extend(worst);
    }
    Ok(reports)
}

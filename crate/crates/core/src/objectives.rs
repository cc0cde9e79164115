//! Contrastive objectives over grouped positives.
//!
//! Every loss here is the negated mean log-ratio of positive mass to total mass,
//! so it is non-negative and minimized by aligning positives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Square boolean matrix; entry `(i, j)` marks target `j` as a positive for anchor `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveMask {
    n: usize,
    bits: Vec<bool>,
}

impl PositiveMask {
    /// The diagonal must be set and every row needs at least one positive.
    pub fn new(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n {
            return Err(Error::contract(format!("mask needs {} entries, got {}", n * n, bits.len())));
        }
        if let Some(i) = (0..n).find(|&i| !bits[i * n + i]) {
            return Err(Error::contract(format!("mask diagonal entry {i} is not a positive")));
        }
        Ok(PositiveMask { n, bits })
    }

    pub fn diagonal(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        PositiveMask { n, bits }
    }

    /// Items with equal labels are mutual positives.
    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let bits = (0..n * n).map(|k| labels[k / n] == labels[k % n]).collect();
        PositiveMask { n, bits }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn transposed(&self) -> PositiveMask {
        let n = self.n;
        let bits = (0..n * n).map(|k| self.bits[(k % n) * n + k / n]).collect();
        PositiveMask { n, bits }
    }

    pub fn is_symmetric(&self) -> bool {
        *self == self.transposed()
    }
}

/// Softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Scalar", into = "Scalar")]
pub struct Temperature(Scalar);

impl Temperature {
    pub fn new(tau: Scalar) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Temperature(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn value(self) -> Scalar {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.05)
    }
}

impl TryFrom<Scalar> for Temperature {
    type Error = Error;
    fn try_from(v: Scalar) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for Scalar {
    fn from(t: Temperature) -> Self {
        t.0
    }
}

/// `mean_i [ logsumexp_j logits_ij - logsumexp_{j in P_i} logits_ij ]` for `logits [n, n]`.
pub fn nce_from_logits(g: &mut Graph, logits: Var, mask: &PositiveMask) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape != [mask.len(), mask.len()] {
        return Err(Error::dim(
            "nce",
            format!("logits {shape:?} vs mask of size {}", mask.len()),
        ));
    }
    let all = g.logsumexp(logits)?;
    let pos = g.masked_logsumexp(logits, mask.bits())?;
    let diff = g.sub(all, pos)?;
    g.mean_all(diff)
}

/// Grouped InfoNCE of `anchors [n, e]` against `targets [n, e]`.
pub fn nce_grouped(g: &mut Graph, anchors: Var, targets: Var, mask: &PositiveMask, tau: Temperature) -> Result<Var> {
    let (sa, st) = (g.shape(anchors).to_vec(), g.shape(targets).to_vec());
    if sa.len() != 2 || sa != st || sa[0] != mask.len() {
        return Err(Error::dim(
            "nce_grouped",
            format!("anchors {sa:?}, targets {st:?}, mask {}", mask.len()),
        ));
    }
    let tt = g.t(targets)?;
    let sims = g.matmul(anchors, tt)?;
    let logits = g.scale(sims, 1.0 / tau.value())?;
    nce_from_logits(g, logits, mask)
}

/// Clip and narration embeddings of one child-level batch.
#[derive(Clone, Debug)]
pub struct ChildBatch {
    pub clips: Var,
    pub narrations: Var,
    pub positive_mask: PositiveMask,
}

/// Clip-to-narration grouped NCE. When `symmetric`, the narration-to-clip
/// direction is added and the two are averaged.
pub fn child_loss(g: &mut Graph, batch: &ChildBatch, tau: Temperature, symmetric: bool) -> Result<Var> {
    let forward = nce_grouped(g, batch.clips, batch.narrations, &batch.positive_mask, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let back = nce_grouped(g, batch.narrations, batch.clips, &batch.positive_mask.transposed(), tau)?;
    let sum = g.add(forward, back)?;
    g.scale(sum, 0.5)
}

/// Long-term features of one parent-level batch. `narrations` (aggregated
/// narration features) and `summaries` are optional because some ablations
/// never compute them.
#[derive(Clone, Debug)]
pub struct ParentBatch {
    pub videos: Var,
    pub narrations: Option<Var>,
    pub summaries: Option<Var>,
    pub positive_mask: PositiveMask,
}

/// Which terms of the parent objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParentObjective {
    /// video-summary plus narration-summary.
    Full,
    /// video-summary only.
    VideoSummary,
    /// video against aggregated narrations, no summary text.
    NoSummary,
}

/// Parent-level loss. Aggregated video and narration features are never
/// contrasted with each other here, except in the `NoSummary` ablation.
pub fn parent_loss(g: &mut Graph, batch: &ParentBatch, tau: Temperature, objective: ParentObjective) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::contract(format!("parent objective needs {what}")));
    match objective {
        ParentObjective::Full => {
            let s = need(batch.summaries, "summary embeddings")?;
            let n = need(batch.narrations, "aggregated narration embeddings")?;
            let sv = nce_grouped(g, batch.videos, s, &batch.positive_mask, tau)?;
            let sn = nce_grouped(g, n, s, &batch.positive_mask, tau)?;
            g.add(sv, sn)
        }
        ParentObjective::VideoSummary => {
            let s = need(batch.summaries, "summary embeddings")?;
            nce_grouped(g, batch.videos, s, &batch.positive_mask, tau)
        }
        ParentObjective::NoSummary => {
            let n = need(batch.narrations, "aggregated narration embeddings")?;
            parent_loss_no_summary(g, batch.videos, n, &batch.positive_mask, tau)
        }
    }
}

/// Aggregated video features matched against aggregated narration features.
pub fn parent_loss_no_summary(g: &mut Graph, videos: Var, narrations: Var, mask: &PositiveMask, tau: Temperature) -> Result<Var> {
    nce_grouped(g, videos, narrations, mask, tau)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_inputs;
    use crate::autodiff::Tensor;

    fn tau(t: Scalar) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<Scalar> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<Scalar>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    /// Loss evaluated straight from the definition, in plain loops.
    fn oracle(a: &Tensor, t: &Tensor, mask: &PositiveMask, tau: Scalar) -> Scalar {
        let (ra, rt) = (a.rows().unwrap(), t.rows().unwrap());
        let n = ra.len();
        let mut total = 0.0;
        for i in 0..n {
            let s: Vec<Scalar> = rt.iter().map(|tj| ra[i].iter().zip(tj).map(|(x, y)| x * y).sum::<Scalar>() / tau).collect();
            let num: Scalar = (0..n).filter(|&j| mask.get(i, j)).map(|j| s[j].exp()).sum();
            let den: Scalar = s.iter().map(|v| v.exp()).sum();
            total += (num / den).ln();
        }
        -total / n as Scalar
    }

    fn nce_value(a: &Tensor, t: &Tensor, mask: &PositiveMask, tv: Scalar) -> Scalar {
        let mut g = Graph::new();
        let (av, tv_) = (g.constant(a.clone()), g.constant(t.clone()));
        let l = nce_grouped(&mut g, av, tv_, mask, tau(tv)).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn single_item_loss_is_zero() {
        let e = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        assert_eq!(nce_value(&e, &e, &PositiveMask::diagonal(1), 0.05), 0.0);
    }

    #[test]
    fn uniform_similarities_give_log_batch_size() {
        let e = Tensor::full(&[4, 1], 1.0);
        let l = nce_value(&e, &e, &PositiveMask::diagonal(4), 1.0);
        assert!((l - (4.0 as Scalar).ln()).abs() < 1e-9);
    }

    #[test]
    fn identity_similarities_hand_value() {
        let e = Tensor::eye(2);
        let l = nce_value(&e, &e, &PositiveMask::diagonal(2), 1.0);
        let expected = (1.0 + (-1.0 as Scalar).exp()).ln(); // 0.31326...
        assert!((l - expected).abs() < 1e-9);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn aligned_orthogonal_pairs_have_near_zero_child_loss() {
        let e = Tensor::eye(8);
        let mut g = Graph::new();
        let (c, n) = (g.constant(e.clone()), g.constant(e.clone()));
        let batch = ChildBatch {
            clips: c,
            narrations: n,
            positive_mask: PositiveMask::diagonal(8),
        };
        let l = child_loss(&mut g, &batch, tau(0.05), true).unwrap();
        let v = g.value(l).item().unwrap();
        // sims are 1 on the diagonal and 0 elsewhere: ln(1 + 7 e^-20)
        let expected = (1.0 + 7.0 * (-20.0 as Scalar).exp()).ln();
        assert!(v < 0.01);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn random_embeddings_are_near_log_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let a = unit_rows(64, 32, &mut rng);
        let t = unit_rows(64, 32, &mut rng);
        let mask = PositiveMask::diagonal(64);
        let l = nce_value(&a, &t, &mask, 1.0);
        assert!((l - (64.0 as Scalar).ln()).abs() < 0.5, "{l}");
        assert!((l - oracle(&a, &t, &mask, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn matches_definition_with_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = unit_rows(6, 5, &mut rng);
        let t = unit_rows(6, 5, &mut rng);
        let mask = PositiveMask::from_labels(&[0, 1, 0, 2, 1, 0]);
        for tv in [0.05, 0.3, 1.0] {
            assert!((nce_value(&a, &t, &mask, tv) - oracle(&a, &t, &mask, tv)).abs() < 1e-9);
        }
    }

    #[test]
    fn grouping_an_above_average_positive_lowers_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = unit_rows(5, 4, &mut rng);
        let mut t = unit_rows(5, 4, &mut rng);
        // make target 1 close to anchor 0, so the extra positive is above average for row 0
        let r0 = a.rows().unwrap()[0].clone();
        t.data_mut()[4..8].copy_from_slice(&r0);
        let diag = PositiveMask::diagonal(5);
        let grouped = PositiveMask::from_labels(&[7, 7, 1, 2, 3]);
        assert!(nce_value(&a, &t, &grouped, 0.1) < nce_value(&a, &t, &diag, 0.1));
    }

    #[test]
    fn relabeling_the_batch_does_not_change_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = unit_rows(6, 4, &mut rng);
        let t = unit_rows(6, 4, &mut rng);
        let labels = [0, 1, 0, 2, 1, 3];
        let perm = [3, 5, 0, 1, 4, 2];
        let permute = |x: &Tensor| {
            let rows = x.rows().unwrap();
            Tensor::from_rows(&perm.iter().map(|&p| rows[p].clone()).collect::<Vec<_>>()).unwrap()
        };
        let plabels: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let l1 = nce_value(&a, &t, &PositiveMask::from_labels(&labels), 0.1);
        let l2 = nce_value(&permute(&a), &permute(&t), &PositiveMask::from_labels(&plabels), 0.1);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn raising_a_positive_similarity_lowers_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let n = 5;
        let logits = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let mask = PositiveMask::from_labels(&[0, 0, 1, 2, 2]);
        let mut g = Graph::new();
        let x = g.variable(logits);
        let l = nce_from_logits(&mut g, x, &mask).unwrap();
        let grad = g.backward(l).unwrap().get(x).unwrap().clone();
        for i in 0..n {
            for j in 0..n {
                let d = grad.data()[i * n + j];
                if mask.get(i, j) {
                    // only the positives of a row that already dominate may have a ~0 derivative
                    assert!(d <= 0.0, "positive ({i},{j}) has derivative {d}");
                } else {
                    assert!(d >= 0.0);
                }
            }
        }
        let diag_mask = PositiveMask::diagonal(n);
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[n, n]));
        let l = nce_from_logits(&mut g, x, &diag_mask).unwrap();
        let grad = g.backward(l).unwrap().get(x).unwrap().clone();
        assert!((0..n).all(|i| grad.data()[i * n + i] < 0.0));
    }

    #[test]
    fn small_temperature_does_not_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let a = unit_rows(8, 4, &mut rng);
        let l = nce_value(&a, &a.clone(), &PositiveMask::diagonal(8), 0.01);
        assert!(l.is_finite());
        let neg = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| -x).collect()).unwrap();
        let l = nce_value(&a, &neg, &PositiveMask::diagonal(8), 0.001);
        assert!(l.is_finite());
    }

    #[test]
    fn large_temperature_flattens_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let a = unit_rows(6, 4, &mut rng);
        let t = unit_rows(6, 4, &mut rng);
        let grad_norm = |tv: Scalar| {
            let mut g = Graph::new();
            let av = g.variable(a.clone());
            let tt = g.constant(t.clone());
            let l = nce_grouped(&mut g, av, tt, &PositiveMask::diagonal(6), tau(tv)).unwrap();
            g.backward(l).unwrap().get(av).unwrap().norm()
        };
        assert!(grad_norm(100.0) < grad_norm(1.0));
        assert!(grad_norm(1e4) < 1e-3);
    }

    #[test]
    fn parent_loss_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let v = unit_rows(4, 6, &mut rng);
        let s = unit_rows(4, 6, &mut rng);
        let mut g = Graph::new();
        let (vv, nv, sv) = (g.constant(v.clone()), g.constant(v.clone()), g.constant(s.clone()));
        let batch = ParentBatch {
            videos: vv,
            narrations: Some(nv),
            summaries: Some(sv),
            positive_mask: PositiveMask::diagonal(4),
        };
        let eval = |g: &mut Graph, obj| {
            let l = parent_loss(g, &batch, tau(0.05), obj).unwrap();
            g.value(l).item().unwrap()
        };
        let full = eval(&mut g, ParentObjective::Full);
        let only_sv = eval(&mut g, ParentObjective::VideoSummary);
        let direct_sv = {
            let x = nce_grouped(&mut g, vv, sv, &PositiveMask::diagonal(4), tau(0.05)).unwrap();
            g.value(x).item().unwrap()
        };
        assert_eq!(only_sv, direct_sv);
        assert_eq!(full, 2.0 * only_sv);

        let no_summ = eval(&mut g, ParentObjective::NoSummary);
        let direct = {
            let x = nce_grouped(&mut g, vv, nv, &PositiveMask::diagonal(4), tau(0.05)).unwrap();
            g.value(x).item().unwrap()
        };
        assert_eq!(no_summ, direct);

        let missing = ParentBatch {
            summaries: None,
            ..batch.clone()
        };
        assert!(parent_loss(&mut g, &missing, tau(0.05), ParentObjective::Full).is_err());
        assert!(parent_loss(&mut g, &missing, tau(0.05), ParentObjective::NoSummary).is_ok());
    }

    #[test]
    fn parent_loss_of_one_video_is_zero() {
        let e = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let s = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let (v, n, sv) = (g.constant(e.clone()), g.constant(e), g.constant(s));
        let batch = ParentBatch {
            videos: v,
            narrations: Some(n),
            summaries: Some(sv),
            positive_mask: PositiveMask::diagonal(1),
        };
        for obj in [ParentObjective::Full, ParentObjective::VideoSummary, ParentObjective::NoSummary] {
            let l = parent_loss(&mut g, &batch, tau(0.05), obj).unwrap();
            assert_eq!(g.value(l).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn no_summary_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let v = unit_rows(4, 5, &mut rng);
        let n = unit_rows(4, 5, &mut rng);
        let rep = check_inputs("parent no-summary", &[v, n], |g, x| {
            let (a, b) = (g.l2_normalize(x[0])?, g.l2_normalize(x[1])?);
            parent_loss_no_summary(g, a, b, &PositiveMask::diagonal(4), tau(0.05))
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn symmetric_child_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let c = unit_rows(4, 5, &mut rng);
        let n = unit_rows(4, 5, &mut rng);
        let mask = PositiveMask::from_labels(&[0, 1, 0, 2]);
        let rep = check_inputs("child loss", &[c, n], |g, x| {
            let batch = ChildBatch {
                clips: g.l2_normalize(x[0])?,
                narrations: g.l2_normalize(x[1])?,
                positive_mask: mask.clone(),
            };
            child_loss(g, &batch, tau(0.05), true)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn mask_validation() {
        assert!(PositiveMask::new(2, vec![true, false, false, false]).is_err());
        assert!(PositiveMask::new(2, vec![true, true]).is_err());
        let m = PositiveMask::from_labels(&[3, 1, 3]);
        assert!(m.get(0, 2) && m.get(2, 0) && !m.get(0, 1));
        assert!(m.is_symmetric());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }
}

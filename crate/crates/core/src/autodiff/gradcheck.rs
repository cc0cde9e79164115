//! Central finite-difference checks of autodiff gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: Scalar = 1e-5;
/// Maximum accepted relative error.
pub const REL_TOL: Scalar = 1e-4;
/// Denominator floor for relative error. Entries where both gradients are
/// below this magnitude are compared on an absolute scale (error < 1e-9).
/// Central differences of an O(1) loss at `FD_STEP` carry ~1e-10 of rounding
/// noise, which exactly-zero gradients (e.g. attention key biases) expose.
pub const REL_FLOOR: Scalar = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check the gradient of a scalar-valued `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<Scalar> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst: Scalar = 0.0;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .ok_or_else(|| Error::contract("input received no gradient"))?
            .clone();
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[ei], numeric));
            entries += 1;
        }
    }
    Ok(report(name, entries, worst))
}

/// Check gradients of a scalar loss with respect to every parameter in `store`.
pub fn check_params<F>(name: &str, store: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?.params(&g);

    let mut work = store.clone();
    let mut worst: Scalar = 0.0;
    let mut entries = 0;
    let names: Vec<String> = store.names().cloned().collect();
    for pname in names {
        let n = store.get(&pname).map_or(0, Tensor::numel);
        let zeros = Tensor::zeros(store.get(&pname).map(|t| t.shape()).unwrap_or(&[]));
        let analytic = grads.get(&pname).unwrap_or(&zeros).clone();
        for ei in 0..n {
            let orig = work.get(&pname).unwrap().data()[ei];
            work.get_mut(&pname).unwrap().data_mut()[ei] = orig + FD_STEP;
            let plus = eval_store(&f, &work)?;
            work.get_mut(&pname).unwrap().data_mut()[ei] = orig - FD_STEP;
            let minus = eval_store(&f, &work)?;
            work.get_mut(&pname).unwrap().data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[ei], numeric));
            entries += 1;
        }
    }
    Ok(report(name, entries, worst))
}

fn eval_store<F>(f: &F, store: &ParamStore) -> Result<Scalar>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.value(out).item()
}

fn report(name: &str, entries: usize, worst: Scalar) -> GradCheckReport {
    GradCheckReport {
        name: name.to_string(),
        entries,
        max_rel_err: worst as f64,
        passed: worst < REL_TOL,
    }
}

/// Reduce a tensor-valued node to a scalar by a fixed random projection, so that
/// every output entry contributes to the checked gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    let mean = g.mean_all(prod)?;
    g.scale(mean, n as Scalar)
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: Scalar, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches")
}

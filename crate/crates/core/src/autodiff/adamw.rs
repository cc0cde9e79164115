use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub weight_decay: Scalar,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one parameter plus its own update count, which
/// drives bias correction. Parameters updated only at one training level keep
/// their own counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    /// Number of `step` calls so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Decoupled-weight-decay Adam update of every parameter present in `grads`.
    /// Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = self.config;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {name} shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                updates: 0,
            });
            mom.updates += 1;
            let t = mom.updates as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let decay = 1.0 - c.lr * c.weight_decay;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *pv *= decay;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[Scalar]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vals.to_vec()));
        s
    }

    fn grads(vals: &[Scalar]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vals.to_vec()))])
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = store(&[0.5, -1.5, 2.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &grads(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -1.5, 2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_grad_decay_scales_parameters() {
        let mut p = store(&[0.5, -1.5, 2.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut p, &grads(&[0.0, 0.0, 0.0])).unwrap();
        for (a, b) in p.get("w").unwrap().data().iter().zip([0.5, -1.5, 2.0]) {
            assert!((a - b * (1.0 - 0.001)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_moves_by_lr_against_sign() {
        let lr = 0.01;
        let mut p = store(&[0.0, 0.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let g = grads(&[3.0, -0.2]);
        let mut prev = p.get("w").unwrap().data().to_vec();
        for _ in 0..200 {
            opt.step(&mut p, &g).unwrap();
            let cur = p.get("w").unwrap().data().to_vec();
            let d0 = cur[0] - prev[0];
            let d1 = cur[1] - prev[1];
            assert!(d0 < 0.0 && d1 > 0.0);
            assert!((d0.abs() - lr).abs() < 1e-6 * lr * 10.0);
            assert!((d1.abs() - lr).abs() < 1e-6 * lr * 10.0);
            prev = cur;
        }
        assert_eq!(opt.step, 200);
        assert_eq!(opt.moments["w"].updates, 200);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = AdamWState::new(AdamWConfig::default());
        let err = opt.step(&mut p, &grads(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn untouched_parameters_stay_bitwise_equal() {
        let mut p = store(&[1.0]);
        p.insert("agg.x", Tensor::vector(vec![0.123456789]));
        let mut opt = AdamWState::new(AdamWConfig::default());
        opt.step(&mut p, &grads(&[0.3])).unwrap();
        assert_eq!(p.get("agg.x").unwrap().data()[0].to_bits(), (0.123456789 as Scalar).to_bits());
        assert!(!opt.moments.contains_key("agg.x"));
    }
}

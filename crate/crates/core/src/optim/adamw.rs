//! AdamW with optional bias correction and decoupled weight decay.
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! m_hat = m / (1 - b1^t),  v_hat = v / (1 - b2^t)    (bias correction on)
//! theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
//! ```
//!
//! Gradients handed to [`AdamW::step`] are expected to be clipped already;
//! the moments are then built from the clipped values, and bias correction
//! runs unchanged on top of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::clip::GradMap;
use crate::error::{Error, Result};
use crate::model::{ComponentId, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            bias_correction: true,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// First and second moments of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates this component has received; drives its bias
    /// correction.
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    hyper: AdamWHyper,
    moments: BTreeMap<ComponentId, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(AdamW {
            hyper,
            moments: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn hyper(&self) -> &AdamWHyper {
        &self.hyper
    }

    /// Optimizer steps taken since creation or the last reset.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: &str) -> Option<&Moments> {
        self.moments.get(id)
    }

    /// Drops all moments and the step counter.
    pub fn reset(&mut self) {
        self.moments.clear();
        self.t = 0;
    }

    /// One update of every component present in `grads` at learning rate
    /// `lr`. Components without a gradient are not touched, not even by
    /// weight decay. A component seen for the first time starts from zero
    /// moments.
    pub fn step(&mut self, params: &mut Params, grads: &GradMap, lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = params
                .get(id)
                .ok_or_else(|| Error::MissingComponent(id.to_string()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("{id}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(mo) = self.moments.get(id) {
                if mo.m.len() != g.len() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("{id}: state of length {} vs grad {}", mo.m.len(), g.len()),
                    ));
                }
            }
        }
        self.t += 1;
        let h = &self.hyper;
        for (id, g) in grads {
            let p = params.get_mut(id).expect("checked above");
            let mo = self.moments.entry(id.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            mo.steps += 1;
            let (c1, c2) = if h.bias_correction {
                let t = i32::try_from(mo.steps).unwrap_or(i32::MAX);
                (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t))
            } else {
                (1.0, 1.0)
            };
            let wd = if id.takes_weight_decay() { h.weight_decay } else { 0.0 };
            for (((theta, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = h.beta1 * *m + (1.0 - h.beta1) * gi;
                *v = h.beta2 * *v + (1.0 - h.beta2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + h.eps) + wd * *theta);
            }
            if !p.data().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter {id} after update"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_setup(theta: f64) -> (Params, ComponentId) {
        let id = ComponentId::new("x.weight");
        let mut p = Params::new();
        p.insert(id.clone(), Tensor::scalar(theta).unwrap());
        (p, id)
    }

    fn hyper0() -> AdamWHyper {
        AdamWHyper {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWHyper::default()
        }
    }

    #[test]
    fn first_step_hand_oracle() {
        let (mut p, id) = scalar_setup(1.0);
        let mut opt = AdamW::new(hyper0()).unwrap();
        let mut g = GradMap::new();
        g.insert(id.clone(), Tensor::scalar(0.5).unwrap());
        opt.step(&mut p, &g, 0.1).unwrap();
        let mo = opt.moments("x.weight").unwrap();
        assert!((mo.m[0] - 0.05).abs() < 1e-15);
        assert!((mo.v[0] - 2.5e-4).abs() < 1e-18);
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[&id].item() - expected).abs() < 1e-12);
        assert!((p[&id].item() - 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let (mut p, id) = scalar_setup(0.7);
        let mut opt = AdamW::new(hyper0()).unwrap();
        let mut g = GradMap::new();
        g.insert(id.clone(), Tensor::scalar(0.0).unwrap());
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p[&id].item(), 0.7);
    }

    #[test]
    fn decay_skips_biases_and_gains() {
        let mut p = Params::new();
        for k in ["l.weight", "l.bias", "n.gain"] {
            p.insert(ComponentId::new(k), Tensor::scalar(1.0).unwrap());
        }
        let g: GradMap = p.keys().map(|k| (k.clone(), Tensor::scalar(0.0).unwrap())).collect();
        let mut opt = AdamW::new(AdamWHyper {
            weight_decay: 0.5,
            ..hyper0()
        })
        .unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p["l.weight"].item() - 0.95).abs() < 1e-15);
        assert_eq!(p["l.bias"].item(), 1.0);
        assert_eq!(p["n.gain"].item(), 1.0);
    }

    #[test]
    fn untouched_components_and_errors() {
        let (mut p, _) = scalar_setup(1.0);
        p.insert(ComponentId::new("y.weight"), Tensor::scalar(2.0).unwrap());
        let mut opt = AdamW::new(AdamWHyper {
            weight_decay: 0.1,
            ..hyper0()
        })
        .unwrap();
        let mut g = GradMap::new();
        g.insert(ComponentId::new("x.weight"), Tensor::scalar(1.0).unwrap());
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p["y.weight"].item(), 2.0);
        assert!(opt.moments("y.weight").is_none());

        let mut wrong = GradMap::new();
        wrong.insert(ComponentId::new("x.weight"), Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(opt.step(&mut p, &wrong, 0.1).is_err());
        let mut missing = GradMap::new();
        missing.insert(ComponentId::new("z.weight"), Tensor::scalar(1.0).unwrap());
        assert!(opt.step(&mut p, &missing, 0.1).is_err());
        assert!(AdamW::new(AdamWHyper { beta1: 1.0, ..hyper0() }).is_err());
    }
}

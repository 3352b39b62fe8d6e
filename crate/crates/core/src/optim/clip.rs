//! Gradient norm clipping policies.
//!
//! Component-wise clipping rescales every component's gradient on its own:
//!
//! ```text
//! g_c <- g_c * min(1, tau_c / max(||g_c||_2, 1e-12))
//! ```
//!
//! Global clipping applies one shared factor computed from the norm of all
//! gradients concatenated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ComponentId;
use crate::numerics::{sum_sq, Tensor};

pub type GradMap = BTreeMap<ComponentId, Tensor>;

/// Guards the clip factor against zero-norm gradients.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClipPolicy {
    None,
    Global {
        tau: f64,
    },
    ComponentWise {
        tau: f64,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        overrides: BTreeMap<ComponentId, f64>,
    },
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy::None
    }
}

impl ClipPolicy {
    pub fn component_wise(tau: f64) -> Self {
        ClipPolicy::ComponentWise {
            tau,
            overrides: BTreeMap::new(),
        }
    }

    pub fn global(tau: f64) -> Self {
        ClipPolicy::Global { tau }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |t: f64, what: &str| {
            if t > 0.0 && t.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("clip threshold {what} must be positive, got {t}")))
            }
        };
        match self {
            ClipPolicy::None => Ok(()),
            ClipPolicy::Global { tau } => check(*tau, "tau"),
            ClipPolicy::ComponentWise { tau, overrides } => {
                check(*tau, "tau")?;
                for (id, t) in overrides {
                    check(*t, id.as_str())?;
                }
                Ok(())
            }
        }
    }

    pub fn threshold_for(&self, id: &ComponentId) -> Option<f64> {
        match self {
            ClipPolicy::ComponentWise { tau, overrides } => {
                Some(overrides.get(id).copied().unwrap_or(*tau))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormPair {
    pub pre: f64,
    pub post: f64,
}

pub type ClipReport = BTreeMap<ComponentId, NormPair>;

/// Returns clipped copies of `grads` and per-component norms before and
/// after clipping.
pub fn clip_gradients(grads: &GradMap, policy: &ClipPolicy) -> Result<(GradMap, ClipReport)> {
    let mut out = grads.clone();
    let report = clip_in_place(&mut out, policy)?;
    Ok((out, report))
}

pub fn clip_in_place(grads: &mut GradMap, policy: &ClipPolicy) -> Result<ClipReport> {
    policy.validate()?;
    let mut pre = BTreeMap::new();
    for (id, g) in grads.iter() {
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {id}"),
            });
        }
        pre.insert(id.clone(), sum_sq(g.data()).sqrt());
    }
    // dividing by norm/tau rather than multiplying by tau/norm keeps exact
    // cases exact: [3, 4] at tau 1 becomes [0.6, 0.8]
    let divisor = |norm: f64, tau: f64| norm.max(ZERO_NORM_GUARD) / tau;

    let mut report = ClipReport::new();
    match policy {
        ClipPolicy::None => {
            for (id, n) in pre {
                report.insert(id, NormPair { pre: n, post: n });
            }
        }
        ClipPolicy::ComponentWise { .. } => {
            for (id, g) in grads.iter_mut() {
                let n = pre[id];
                let tau = policy.threshold_for(id).expect("component-wise policy");
                let d = divisor(n, tau);
                let post = if d > 1.0 {
                    g.data_mut().iter_mut().for_each(|v| *v /= d);
                    sum_sq(g.data()).sqrt()
                } else {
                    n
                };
                report.insert(id.clone(), NormPair { pre: n, post });
            }
        }
        ClipPolicy::Global { tau } => {
            let total = pre.values().map(|n| n * n).sum::<f64>().sqrt();
            let d = divisor(total, *tau);
            for (id, g) in grads.iter_mut() {
                let n = pre[id];
                let post = if d > 1.0 {
                    g.data_mut().iter_mut().for_each(|v| *v /= d);
                    sum_sq(g.data()).sqrt()
                } else {
                    n
                };
                report.insert(id.clone(), NormPair { pre: n, post });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(items: &[(&str, &[f64])]) -> GradMap {
        items
            .iter()
            .map(|(k, v)| (ComponentId::new(*k), Tensor::vector(v.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn component_wise_scales_to_threshold() {
        let g = grads(&[("layer.1.ffn.w1.bias", &[3.0, 4.0])]);
        let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(1.0)).unwrap();
        let v = c.values().next().unwrap().data();
        assert_eq!(v, &[0.6, 0.8]);
        let pair = r.values().next().unwrap();
        assert_eq!(pair.pre, 5.0);
        assert!((pair.post - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_threshold_is_identity() {
        let g = grads(&[("a.weight", &[3.0, 4.0])]);
        let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(10.0)).unwrap();
        assert_eq!(c, g);
        assert_eq!(r.values().next().unwrap().post, 5.0);
    }

    #[test]
    fn component_vs_global_at_default_threshold() {
        // norms 5 and 0.01
        let g = grads(&[("a.weight", &[3.0, 4.0]), ("b.weight", &[0.006, 0.008])]);
        let (_, r) = clip_gradients(&g, &ClipPolicy::component_wise(0.05)).unwrap();
        assert!((r["a.weight"].post - 0.05).abs() < 1e-15);
        assert!((r["b.weight"].post - 0.01).abs() < 1e-15);

        let (c, r) = clip_gradients(&g, &ClipPolicy::global(0.05)).unwrap();
        let s = 0.05 / (25.0f64 + 0.0001).sqrt();
        for id in ["a.weight", "b.weight"] {
            for (x, y) in c[id].data().iter().zip(g[id].data()) {
                assert!((x - y * s).abs() < 1e-15);
            }
            assert!((r[id].post - r[id].pre * s).abs() < 1e-15);
        }
    }

    #[test]
    fn overrides_and_zero_gradients() {
        let mut overrides = BTreeMap::new();
        overrides.insert(ComponentId::new("b.weight"), 2.0);
        let policy = ClipPolicy::ComponentWise { tau: 1.0, overrides };
        let g = grads(&[("a.weight", &[0.0, 0.0]), ("b.weight", &[3.0, 4.0])]);
        let (c, r) = clip_gradients(&g, &policy).unwrap();
        assert_eq!(c["a.weight"].data(), &[0.0, 0.0]);
        assert!((r["b.weight"].post - 2.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let g = grads(&[("a.weight", &[1.0])]);
        assert!(clip_gradients(&g, &ClipPolicy::component_wise(0.0)).is_err());
        assert!(clip_gradients(&g, &ClipPolicy::global(-1.0)).is_err());
        let mut bad = g.clone();
        bad.get_mut("a.weight").unwrap().data_mut()[0] = f64::NAN;
        match clip_gradients(&bad, &ClipPolicy::None) {
            Err(Error::NonFinite { context }) => assert!(context.contains("a.weight")),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn post_norm_bounded_and_direction_kept(
            data in prop::collection::vec(-100.0f64..100.0, 1..40),
            tau in prop::sample::select(vec![0.01, 0.05, 1.0]),
        ) {
            let g = grads(&[("c.weight", &data)]);
            let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(tau)).unwrap();
            prop_assert!(r["c.weight"].post <= tau * (1.0 + 1e-12));
            let orig = &g["c.weight"];
            if orig.data().iter().any(|&v| v != 0.0) {
                let cos = crate::numerics::cosine_similarity(orig, &c["c.weight"]).unwrap();
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }
}

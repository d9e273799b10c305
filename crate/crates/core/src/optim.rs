//! AMSGrad with global gradient-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

/// Adam-family optimiser. With `amsgrad` the denominator uses the running
/// maximum of the second-moment estimate.
#[derive(Debug, Clone)]
pub struct Amsgrad {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl Amsgrad {
    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: kind == OptimizerKind::Amsgrad,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from flat gradients (`name -> values`) scaled by
    /// `scale`. Parameters without a gradient are left untouched.
    pub fn apply(&mut self, store: &ParamStore, grads: &BTreeMap<String, Vec<f64>>, scale: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.learning_rate / bc1;
        for (name, var) in store.iter() {
            let Some(g) = grads.get(name) else { continue };
            let mut p = store.values(name)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                v_max: vec![0.0; p.len()],
            });
            for i in 0..p.len() {
                let gi = g[i] * scale;
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                let v = if self.amsgrad {
                    st.v_max[i] = st.v_max[i].max(st.v[i]);
                    st.v_max[i]
                } else {
                    st.v[i]
                };
                let denom = v.sqrt() / bc2.sqrt() + self.eps;
                p[i] -= step_size * st.m[i] / denom;
            }
            let t = Tensor::from_vec(p, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Flattens the gradients of every parameter in `store`; fails on the first
/// non-finite entry.
pub fn collect_gradients(store: &ParamStore, grads: &GradStore) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (name, var) in store.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let values = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("gradient of {name}")));
            }
            out.insert(name.clone(), values);
        }
    }
    Ok(out)
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Factor that brings the global norm down to `max_norm` (1 when already below).
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(DType::F64);
        store.constant("p", &[2], 1.0).unwrap();
        let mut opt = Amsgrad::new(0.1, OptimizerKind::Amsgrad);
        let grads = BTreeMap::from([("p".to_string(), vec![3.0, -0.5])]);
        opt.apply(&store, &grads, 1.0).unwrap();
        let p = store.values("p").unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn amsgrad_keeps_the_largest_second_moment() {
        // a large gradient followed by small ones: AMSGrad steps stay smaller than Adam's
        let run = |kind| {
            let mut store = ParamStore::new(DType::F64);
            store.constant("p", &[1], 0.0).unwrap();
            let mut opt = Amsgrad::new(0.01, kind);
            for g in [100.0, 0.1, 0.1, 0.1, 0.1] {
                opt.apply(&store, &BTreeMap::from([("p".to_string(), vec![g])]), 1.0).unwrap();
            }
            store.values("p").unwrap()[0]
        };
        let a = run(OptimizerKind::Amsgrad);
        let b = run(OptimizerKind::Adam);
        assert!(a.abs() <= b.abs() + 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new(DType::F64);
        store.uniform("p", &[4], 3.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut opt = Amsgrad::new(0.05, OptimizerKind::Amsgrad);
        for _ in 0..2000 {
            let p = store.values("p").unwrap();
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.apply(&store, &BTreeMap::from([("p".to_string(), g)]), 1.0).unwrap();
        }
        assert!(store.values("p").unwrap().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_scale(50.0, 100.0), 1.0);
        assert!((clip_scale(400.0, 100.0) - 0.25).abs() < 1e-15);
        let g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(global_norm(&g), 5.0);
    }
}

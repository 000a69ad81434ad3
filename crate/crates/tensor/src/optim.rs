use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn matches(&self, params: &ParamStore<f32>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One bias-corrected Adam update. Moments are accumulated in `f64` and
/// stored back as `f32`, so the result depends only on the inputs.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            msg: format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (p, g) in params.tensors().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i] as f64;
            let mi = cfg.beta1 * md[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * vd[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            pd[i] = (pd[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(1, 2)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig::default();
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = Tensor::row_vector(&[3.0, -0.01, 250.0]);
        adam_step(&mut p, &[g.clone()], &mut st, &cfg).unwrap();
        for (&pv, &gv) in p.at(0).data().iter().zip(g.data()) {
            let expected = -cfg.lr * gv.signum() as f64;
            assert!((pv as f64 - expected).abs() <= cfg.lr * 1e-3, "{pv} vs {expected}");
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = store(&[0.3, -0.7]);
            let mut st = AdamState::new(&p);
            let g = Tensor::row_vector(&[0.11, -0.5]);
            for _ in 0..2 {
                adam_step(&mut p, &[g.clone()], &mut st, &AdamConfig::default()).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        let bits = |s: &ParamStore<f32>| s.at(0).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::zeros(2, 1)], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
        assert!(adam_step(&mut p, &[], &mut st, &AdamConfig::default()).is_err());
    }
}

//! Bias-corrected Adam without weight decay, clipping or schedules.

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar = f32> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Param<F>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![F::zero(); p.tensor.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update of every parameter from its gradient buffer. A missing
/// buffer counts as a zero gradient. Gradients are left for the caller to
/// zero.
pub fn adam_step<F: Scalar>(
    params: &mut [Param<F>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "state tracks {} parameters, model has {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.tensor.numel() != m.len() {
            return Err(Error::shape("adam_step", p.tensor.shape(), &[m.len()]));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    // Bias corrections folded into the step size and epsilon.
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let step = F::of(cfg.learning_rate * c2.sqrt() / c1);
    let eps = F::of(cfg.eps * c2.sqrt());
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (w, g) = p.tensor.value_and_grad_mut();
        match g {
            Some(g) => {
                for (((w, &g), m), v) in w
                    .iter_mut()
                    .zip(g.iter())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                }
            }
            None => {
                for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    *w -= step * *m / (v.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: Vec<f64>) -> Param<f64> {
        Param {
            name: "w".into(),
            tensor: Tensor::new(&[values.len()], values).unwrap(),
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = [param(vec![1.0, -2.0, 0.5, 3.0])];
        ps[0].tensor.accumulate_grad(&[0.3, -7.0, 1e-3, 0.0]);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        let w = ps[0].tensor.data();
        let lr = cfg.learning_rate;
        assert!((w[0] - (1.0 - lr)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + lr)).abs() < 1e-9);
        assert!((w[2] - (0.5 - lr)).abs() < 1e-8);
        assert_eq!(w[3], 3.0, "zero gradient leaves the parameter in place");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let c = [1.5, -0.75, 0.25];
        let mut ps = [param(vec![0.0; 3])];
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..100 {
            ps[0].tensor.zero_grad();
            let g: Vec<f64> = ps[0]
                .tensor
                .data()
                .iter()
                .zip(&c)
                .map(|(w, c)| 2.0 * (w - c))
                .collect();
            ps[0].tensor.accumulate_grad(&g);
            adam_step(&mut ps, &mut st, &cfg).unwrap();
        }
        for (w, c) in ps[0].tensor.data().iter().zip(&c) {
            assert!((w - c).abs() < 1e-2, "{w} vs {c}");
        }
        assert_eq!(st.steps(), 100);
    }

    #[test]
    fn rejects_mismatched_state() {
        let ps = [param(vec![0.0; 3])];
        let mut st = AdamState::new(&ps);
        let mut other = [param(vec![0.0; 4])];
        assert!(adam_step(&mut other, &mut st, &AdamConfig::default()).is_err());
    }
}

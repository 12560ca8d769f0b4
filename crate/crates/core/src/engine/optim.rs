//! AdamW with decoupled weight decay, the exponential learning-rate
//! schedule, and a central finite-difference gradient verifier.

use super::graph::Scalar;
use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch exponential decay factor applied to the learning rate.
    pub lr_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.985,
        }
    }
}

/// Optimizer state: first/second moment accumulators per parameter plus the
/// step counter.
pub struct OptimState<T> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(param_shapes: &[Vec<usize>], config: AdamWConfig) -> Self {
        let m = param_shapes
            .iter()
            .map(|s| ArrayD::from_elem(ndarray::IxDyn(s), T::zero()))
            .collect();
        let v = param_shapes
            .iter()
            .map(|s| ArrayD::from_elem(ndarray::IxDyn(s), T::zero()))
            .collect();
        OptimState {
            m,
            v,
            step: 0,
            config,
        }
    }
}

/// One AdamW step at learning rate `lr`. Decoupled decay scales parameters
/// by `(1 - lr * wd)` before the adaptive update.
pub fn adamw_step<T: Scalar>(
    state: &mut OptimState<T>,
    params: &mut [ArrayD<T>],
    grads: &[ArrayD<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adamw: param {i} shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f(state.config.beta1);
    let b2 = T::from_f(state.config.beta2);
    let eps = T::from_f(state.config.eps);
    let lr_t = T::from_f(lr);
    let decay = T::from_f(1.0 - lr * state.config.weight_decay);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        azip_4(p, g, m, v, |pv, gv, mv, vv| {
            *pv = *pv * decay;
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

fn azip_4<T: Scalar>(
    p: &mut ArrayD<T>,
    g: &ArrayD<T>,
    m: &mut ArrayD<T>,
    v: &mut ArrayD<T>,
    mut f: impl FnMut(&mut T, T, &mut T, &mut T),
) {
    let g_slice = g.as_slice().expect("contiguous grads");
    let p_slice = p.as_slice_mut().expect("contiguous params");
    let m_slice = m.as_slice_mut().expect("contiguous moments");
    let v_slice = v.as_slice_mut().expect("contiguous moments");
    for i in 0..p_slice.len() {
        f(&mut p_slice[i], g_slice[i], &mut m_slice[i], &mut v_slice[i]);
    }
}

/// Learning rate at a given epoch: `base * decay^epoch`.
pub fn decay_lr(config: &AdamWConfig, epoch: u64) -> f64 {
    config.learning_rate * config.lr_decay.powi(epoch as i32)
}

/// Finite-difference verification report.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// (param index, flat offset, analytic, numeric, relative error)
    pub rows: Vec<(usize, usize, f64, f64, f64)>,
    /// Coordinates excluded because the loss is locally non-smooth there
    /// (e.g. an active clamp) — detected by a zero analytic and |numeric|
    /// inconsistent with the step.
    pub excluded: Vec<(usize, usize)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compare analytic gradients against central finite differences on a
/// sampled set of coordinates. `loss` evaluates the full loss for the given
/// parameter values; `analytic` is the gradient produced by `Graph::backward`
/// at the unperturbed point.
pub fn fd_check(
    mut loss: impl FnMut(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    coords: &[(usize, usize)],
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if step <= 0.0 {
        return Err(Error::Contract("fd step must be positive".into()));
    }
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut rows = Vec::with_capacity(coords.len());
    let mut excluded = Vec::new();
    let mut max_rel = 0.0f64;
    for &(pi, off) in coords {
        let orig = work[pi].as_slice().unwrap()[off];
        work[pi].as_slice_mut().unwrap()[off] = orig + step;
        let plus = loss(&work);
        work[pi].as_slice_mut().unwrap()[off] = orig - step;
        let minus = loss(&work);
        work[pi].as_slice_mut().unwrap()[off] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pi].as_slice().unwrap()[off];
        let denom = a.abs().max(numeric.abs());
        if denom < 1e-12 {
            // both effectively zero: agreement
            rows.push((pi, off, a, numeric, 0.0));
            continue;
        }
        let rel = (a - numeric).abs() / denom;
        // A clamp kinking inside [x-h, x+h] makes the central difference
        // meaningless; exclude the coordinate and report it.
        if a == 0.0 && numeric.abs() > 0.0 {
            excluded.push((pi, off));
            continue;
        }
        rows.push((pi, off, a, numeric, rel));
        max_rel = max_rel.max(rel);
    }
    Ok(FdReport {
        rows,
        excluded,
        max_rel_err: max_rel,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Graph;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn grad_of_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(0, ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y, 1).unwrap();
        assert_eq!(grads.get(0, &[1])[[0]], 6.0);
    }

    #[test]
    fn unused_param_gets_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(0, ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let _y_unused = g.param(1, ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let out = g.affine(x, 1.0, 0.0);
        let grads = g.backward(out, 2).unwrap();
        assert!(grads.is_zero(1));
        assert_eq!(grads.get(1, &[3]).len(), 3);
    }

    #[test]
    fn adamw_pure_decay_when_gradient_zero() {
        let cfg = AdamWConfig::default();
        let mut state = OptimState::<f64>::new(&[vec![1]], cfg);
        let mut params = vec![ArrayD::from_elem(IxDyn(&[1]), 1.0)];
        let grads = vec![ArrayD::from_elem(IxDyn(&[1]), 0.0)];
        adamw_step(&mut state, &mut params, &grads, 1e-4).unwrap();
        let expected = 1.0 * (1.0 - 1e-4 * 1e-5);
        assert!((params[0][[0]] - expected).abs() < 1e-18);
    }

    #[test]
    fn adamw_no_decay_no_grad_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = OptimState::<f64>::new(&[vec![2]], cfg);
        let mut params = vec![ArrayD::from_elem(IxDyn(&[2]), 0.5)];
        let grads = vec![ArrayD::from_elem(IxDyn(&[2]), 0.0)];
        adamw_step(&mut state, &mut params, &grads, 1e-4).unwrap();
        assert!(params[0].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn adamw_constant_gradient_approaches_lr_step() {
        // with constant gradient, |update| -> lr asymptotically
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = OptimState::<f64>::new(&[vec![1]], cfg);
        let mut params = vec![ArrayD::from_elem(IxDyn(&[1]), 0.0)];
        let grads = vec![ArrayD::from_elem(IxDyn(&[1]), 0.37)];
        let lr = 1e-3;
        let mut prev = params[0][[0]];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adamw_step(&mut state, &mut params, &grads, lr).unwrap();
            last_step = (params[0][[0]] - prev).abs();
            prev = params[0][[0]];
        }
        assert!((last_step - lr).abs() < lr * 0.01, "step {last_step}");
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = AdamWConfig::default();
        assert_eq!(decay_lr(&cfg, 0), 1e-4);
        assert!((decay_lr(&cfg, 1) - 9.85e-5).abs() < 1e-18);
        assert!((decay_lr(&cfg, 2) - 9.70225e-5).abs() < 1e-18);
    }

    #[test]
    fn fd_exact_on_quadratic() {
        // f(theta) = sum theta_i^2
        let params = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -1.2, 2.0]).unwrap()];
        let analytic = vec![params[0].mapv(|v| 2.0 * v)];
        let coords: Vec<(usize, usize)> = (0..3).map(|i| (0, i)).collect();
        let report = fd_check(
            |p| p[0].iter().map(|&v| v * v).sum(),
            &params,
            &analytic,
            &coords,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fd_excludes_active_clamp() {
        // f(x) = max(x, 0) with x = 0: analytic (subgradient) 0, numeric 0.5
        let params = vec![ArrayD::from_elem(IxDyn(&[1]), 0.0)];
        let analytic = vec![ArrayD::from_elem(IxDyn(&[1]), 0.0)];
        let report = fd_check(
            |p| p[0][[0]].max(0.0),
            &params,
            &analytic,
            &[(0, 0)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.excluded.len(), 1);
        assert!(report.passed());
    }

    #[test]
    fn fd_empty_coordinate_set_passes() {
        let report = fd_check(|_| 0.0, &[], &[], &[], 1e-5, 1e-8).unwrap();
        assert!(report.passed());
        assert!(report.rows.is_empty());
    }

    #[test]
    fn gradient_linearity() {
        // grad(a*f + b*g) = a*grad(f) + b*grad(g)
        let x0 = 0.7;
        let grad_of = |a: f64, b: f64| -> f64 {
            let mut g = Graph::<f64>::new();
            let x = g.param(0, ArrayD::from_elem(IxDyn(&[1]), x0));
            let f = g.mul(x, x); // x^2
            let sq = g.mul(x, x);
            let gg = g.mul(sq, x); // x^3
            let fa = g.affine(f, a, 0.0);
            let gb = g.affine(gg, b, 0.0);
            let sum = g.add(fa, gb);
            let grads = g.backward(sum, 1).unwrap();
            grads.get(0, &[1])[[0]]
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -1.5);
        assert!((combined - (2.5 * gf - 1.5 * gg)).abs() < 1e-12);
    }
}

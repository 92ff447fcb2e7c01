//! Self-supervised REN training by backpropagation through time.

use nalgebra::{DMatrix, DVector};

use super::iqc::{check_iqc, penalty_with_grad, RenIqcSpec};
use super::{equilibrium_solve, RenParams};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const GRAD_CLIP: f64 = 10.0;
const MAX_HALVINGS: usize = 12;

/// One replay window: REN inputs `x̂_k`, the model part of the next virtual
/// state `x_n,k`, and the measured next state `x_{k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSequence<T: Real> {
    pub init_state: DVector<T>,
    pub inputs: Vec<DVector<T>>,
    pub nominal_next: Vec<DVector<T>>,
    pub targets: Vec<DVector<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOutcome {
    pub loss: f64,
    pub penalty: f64,
    pub grad_norm: f64,
    /// Step length actually applied (zero when every trial broke the certificate).
    pub step: f64,
    pub certified: bool,
}

/// Gradient with the same layout as the trainable quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T: Real> {
    pub a: DMatrix<T>,
    pub b1: DMatrix<T>,
    pub b2: DMatrix<T>,
    pub c1: DMatrix<T>,
    pub c2: DMatrix<T>,
    pub d11: DMatrix<T>,
    pub d12: DMatrix<T>,
    pub d21: DMatrix<T>,
    pub d22: DMatrix<T>,
    pub bx: DVector<T>,
    pub bv: DVector<T>,
    pub by: DVector<T>,
    pub l: DMatrix<T>,
    pub lambda_log: DVector<T>,
}

impl<T: Real> Grads<T> {
    pub fn zeros(p: &RenParams<T>, s: &RenIqcSpec<T>) -> Self {
        Self {
            a: DMatrix::zeros(p.n_x, p.n_x),
            b1: DMatrix::zeros(p.n_x, p.n_v),
            b2: DMatrix::zeros(p.n_x, p.n),
            c1: DMatrix::zeros(p.n_v, p.n_x),
            c2: DMatrix::zeros(p.n, p.n_x),
            d11: DMatrix::zeros(p.n_v, p.n_v),
            d12: DMatrix::zeros(p.n_v, p.n),
            d21: DMatrix::zeros(p.n, p.n_v),
            d22: DMatrix::zeros(p.n, p.n),
            bx: DVector::zeros(p.n_x),
            bv: DVector::zeros(p.n_v),
            by: DVector::zeros(p.n),
            l: DMatrix::zeros(s.l.nrows(), s.l.ncols()),
            lambda_log: DVector::zeros(s.lambda_log.len()),
        }
    }

    fn slices(&self) -> [&[T]; 14] {
        [
            self.a.as_slice(),
            self.b1.as_slice(),
            self.b2.as_slice(),
            self.c1.as_slice(),
            self.c2.as_slice(),
            self.d11.as_slice(),
            self.d12.as_slice(),
            self.d21.as_slice(),
            self.d22.as_slice(),
            self.bx.as_slice(),
            self.bv.as_slice(),
            self.by.as_slice(),
            self.l.as_slice(),
            self.lambda_log.as_slice(),
        ]
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slices().iter().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn norm(&self) -> T {
        self.slices().iter().flat_map(|s| s.iter()).fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

fn param_slices_mut<'a, T: Real>(p: &'a mut RenParams<T>, s: &'a mut RenIqcSpec<T>) -> [&'a mut [T]; 14] {
    [
        p.a.as_mut_slice(),
        p.b1.as_mut_slice(),
        p.b2.as_mut_slice(),
        p.c1.as_mut_slice(),
        p.c2.as_mut_slice(),
        p.d11.as_mut_slice(),
        p.d12.as_mut_slice(),
        p.d21.as_mut_slice(),
        p.d22.as_mut_slice(),
        p.bx.as_mut_slice(),
        p.bv.as_mut_slice(),
        p.by.as_mut_slice(),
        s.l.as_mut_slice(),
        s.lambda_log.as_mut_slice(),
    ]
}

/// All trainable quantities in gradient order.
pub fn flatten<T: Real>(p: &RenParams<T>, s: &RenIqcSpec<T>) -> Vec<T> {
    let (mut p, mut s) = (p.clone(), s.clone());
    param_slices_mut(&mut p, &mut s).iter().flat_map(|x| x.iter().copied()).collect()
}

pub fn unflatten<T: Real>(p: &mut RenParams<T>, s: &mut RenIqcSpec<T>, flat: &[T]) {
    let mut k = 0;
    for slot in param_slices_mut(p, s) {
        for v in slot.iter_mut() {
            *v = flat[k];
            k += 1;
        }
    }
}

/// `false` for structurally fixed entries (upper part of `D₁₁` and of `L`).
pub fn trainable_mask<T: Real>(p: &RenParams<T>, s: &RenIqcSpec<T>) -> Vec<bool> {
    let mut g = Grads::zeros(p, s);
    g.d11 = DMatrix::from_fn(p.n_v, p.n_v, |i, j| if j < i { T::one() } else { T::zero() });
    g.l = DMatrix::from_fn(s.l.nrows(), s.l.ncols(), |i, j| if j <= i { T::one() } else { T::zero() });
    let fixed_d11 = g.d11.clone();
    let fixed_l = g.l.clone();
    for_each_grad(&mut g, |v| *v = T::one());
    g.d11 = fixed_d11;
    g.l = fixed_l;
    g.flatten().into_iter().map(|v| v != T::zero()).collect()
}

fn axpy_params<T: Real>(p: &mut RenParams<T>, s: &mut RenIqcSpec<T>, g: &Grads<T>, step: T) {
    for (dst, src) in param_slices_mut(p, s).into_iter().zip(g.slices()) {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d -= step * v;
        }
    }
}

fn check_batch<T: Real>(p: &RenParams<T>, batch: &[TrainSequence<T>]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::contract("training batch is empty"))?;
    let len = first.inputs.len();
    for seq in batch {
        if seq.inputs.len() != len || seq.nominal_next.len() != len || seq.targets.len() != len {
            return Err(Error::contract("training sequences must share one length"));
        }
        if seq.init_state.len() != p.n_x {
            return Err(Error::contract("initial hidden state has wrong size"));
        }
    }
    if len == 0 {
        return Err(Error::contract("training sequences are empty"));
    }
    Ok(len)
}

/// `L_REN` over the batch, with its gradient accumulated into `grads` when given.
pub fn loss_and_grad<T: Real>(p: &RenParams<T>, batch: &[TrainSequence<T>], mut grads: Option<&mut Grads<T>>) -> Result<T> {
    let len = check_batch(p, batch)?;
    let samples = T::lit((batch.len() * len) as f64);
    let scale = T::one() / (T::lit(p.n as f64) * samples);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    for seq in batch {
        // Forward pass, storing everything the backward pass needs.
        let mut xs = Vec::with_capacity(len + 1);
        let mut ws = Vec::with_capacity(len);
        let mut vs = Vec::with_capacity(len);
        let mut errs = Vec::with_capacity(len);
        xs.push(seq.init_state.clone());
        for k in 0..len {
            let x = &xs[k];
            let u = &seq.inputs[k];
            let (w, v) = equilibrium_solve(p, x, u);
            let y = &p.c2 * x + &p.d21 * &w + &p.d22 * u + &p.by;
            let x_next = &p.a * x + &p.b1 * &w + &p.b2 * u + &p.bx;
            let e = &seq.nominal_next[k] + y - &seq.targets[k];
            loss += e.norm_squared() * scale;
            errs.push(e);
            ws.push(w);
            vs.push(v);
            xs.push(x_next);
        }
        let Some(g) = grads.as_deref_mut() else { continue };
        let mut g_next = DVector::<T>::zeros(p.n_x);
        for k in (0..len).rev() {
            let (x, u, w, v) = (&xs[k], &seq.inputs[k], &ws[k], &vs[k]);
            let gy = &errs[k] * (two * scale);
            g.a += &g_next * x.transpose();
            g.b1 += &g_next * w.transpose();
            g.b2 += &g_next * u.transpose();
            g.bx += &g_next;
            g.c2 += &gy * x.transpose();
            g.d21 += &gy * w.transpose();
            g.d22 += &gy * u.transpose();
            g.by += &gy;
            let mut gw = p.b1.transpose() * &g_next + p.d21.transpose() * &gy;
            let mut gx = p.a.transpose() * &g_next + p.c2.transpose() * &gy;
            // Reverse forward substitution through the implicit layer.
            let mut gv = DVector::<T>::zeros(p.n_v);
            for i in (0..p.n_v).rev() {
                gv[i] = gw[i] * p.activation.deriv(v[i]);
                for j in 0..i {
                    gw[j] += p.d11[(i, j)] * gv[i];
                    g.d11[(i, j)] += gv[i] * w[j];
                }
            }
            g.c1 += &gv * x.transpose();
            g.d12 += &gv * u.transpose();
            g.bv += &gv;
            gx += p.c1.transpose() * &gv;
            g_next = gx;
        }
    }
    Ok(loss)
}

/// Training objective `L_REN + penalty` without gradients.
pub fn objective<T: Real>(p: &RenParams<T>, s: &RenIqcSpec<T>, batch: &[TrainSequence<T>], lambda_pen: T) -> Result<T> {
    let loss = loss_and_grad(p, batch, None)?;
    let mut scratch = Grads::zeros(p, s);
    Ok(loss + penalty_with_grad(p, s, lambda_pen, &mut scratch)?)
}

/// Full gradient of [`objective`].
pub fn gradient<T: Real>(p: &RenParams<T>, s: &RenIqcSpec<T>, batch: &[TrainSequence<T>], lambda_pen: T) -> Result<(T, T, Grads<T>)> {
    let mut g = Grads::zeros(p, s);
    let loss = loss_and_grad(p, batch, Some(&mut g))?;
    let pen = penalty_with_grad(p, s, lambda_pen, &mut g)?;
    Ok((loss, pen, g))
}

/// One clipped gradient-descent step on `L_REN + penalty`. A step that would
/// break an existing certificate is halved until it does not; parameters are
/// left untouched on a non-finite loss.
pub fn train_step<T: Real>(
    params: &mut RenParams<T>,
    spec: &mut RenIqcSpec<T>,
    batch: &[TrainSequence<T>],
    lr: T,
    lambda_pen: T,
) -> Result<TrainOutcome> {
    let (loss, pen, mut g) = gradient(params, spec, batch, lambda_pen)?;
    if !loss.is_finite_val() || !pen.is_finite_val() {
        return Err(Error::numerical("REN training loss is not finite"));
    }
    let norm = g.norm();
    if !norm.is_finite_val() {
        return Err(Error::numerical("REN gradient is not finite"));
    }
    let clip = T::lit(GRAD_CLIP);
    if norm > clip {
        let f = clip / norm;
        for_each_grad(&mut g, |v| *v *= f);
    }
    let was_certified = check_iqc(params, spec)?.certified;
    let mut step = lr;
    let mut accepted = None;
    for _ in 0..=MAX_HALVINGS {
        let (mut p2, mut s2) = (params.clone(), spec.clone());
        axpy_params(&mut p2, &mut s2, &g, step);
        let rep = check_iqc(&p2, &s2)?;
        if !was_certified || rep.certified {
            accepted = Some((p2, s2, rep.certified));
            break;
        }
        step *= T::lit(0.5);
    }
    let (certified, applied) = match accepted {
        Some((p2, s2, cert)) => {
            *params = p2;
            *spec = s2;
            (cert, step)
        }
        None => (was_certified, T::zero()),
    };
    Ok(TrainOutcome {
        loss: loss.as_f64(),
        penalty: pen.as_f64(),
        grad_norm: norm.as_f64(),
        step: applied.as_f64(),
        certified,
    })
}

fn for_each_grad<T: Real>(g: &mut Grads<T>, mut f: impl FnMut(&mut T)) {
    for m in [&mut g.a, &mut g.b1, &mut g.b2, &mut g.c1, &mut g.c2, &mut g.d11, &mut g.d12, &mut g.d21, &mut g.d22, &mut g.l] {
        m.iter_mut().for_each(&mut f);
    }
    for v in [&mut g.bx, &mut g.bv, &mut g.by, &mut g.lambda_log] {
        v.iter_mut().for_each(&mut f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ren::{ren_step, Activation, RenState};

    fn synthetic_batch(p: &RenParams<f64>, len: usize, seed: u64) -> Vec<TrainSequence<f64>> {
        let n = p.n;
        (0..2)
            .map(|b| {
                let inputs: Vec<_> = (0..len)
                    .map(|k| DVector::from_fn(n, |i, _| ((k * 3 + i + b) as f64 * 0.37 + seed as f64).sin()))
                    .collect();
                let nominal_next: Vec<_> = inputs.iter().map(|u| u * 0.8).collect();
                let targets: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, u)| u * 0.8 + DVector::from_fn(n, |i, _| 0.1 + 0.05 * ((k + i) as f64).cos()))
                    .collect();
                TrainSequence { init_state: DVector::zeros(p.n_x), inputs, nominal_next, targets }
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_zero_loss() {
        let p = RenParams::<f64>::zeros(2, 2, 2, Activation::Relu);
        let x = vec![DVector::from_vec(vec![0.3, -0.1]); 4];
        let seq = TrainSequence { init_state: DVector::zeros(2), inputs: x.clone(), nominal_next: x.clone(), targets: x };
        assert_eq!(loss_and_grad(&p, &[seq], None).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_unit_loss() {
        let p = RenParams::<f64>::zeros(1, 1, 1, Activation::Relu);
        let seq = TrainSequence {
            init_state: DVector::zeros(1),
            inputs: vec![DVector::zeros(1)],
            nominal_next: vec![DVector::zeros(1)],
            targets: vec![DVector::from_element(1, 1.0)],
        };
        assert_eq!(loss_and_grad(&p, &[seq], None).unwrap(), 1.0);
    }

    #[test]
    fn bias_gradient_one_step() {
        let p = RenParams::<f64>::zeros(1, 1, 1, Activation::Relu);
        let seq = TrainSequence {
            init_state: DVector::zeros(1),
            inputs: vec![DVector::zeros(1)],
            nominal_next: vec![DVector::from_element(1, 0.2)],
            targets: vec![DVector::from_element(1, 1.0)],
        };
        let mut g = Grads::zeros(&p, &RenIqcSpec::l2_gain(1, 1, 1, 1.0, 1.0).unwrap());
        loss_and_grad(&p, std::slice::from_ref(&seq), Some(&mut g)).unwrap();
        // d/d b_y of (0.2 + b_y − 1)² at b_y = 0 is 2(0.2 − 1).
        assert!((g.by[0] - 2.0 * (0.2 - 1.0)).abs() < 1e-12);
        let h = 1e-6;
        let mut pp = p.clone();
        pp.by[0] += h;
        let lp = loss_and_grad(&pp, std::slice::from_ref(&seq), None).unwrap();
        pp.by[0] -= 2.0 * h;
        let lm = loss_and_grad(&pp, std::slice::from_ref(&seq), None).unwrap();
        assert!(((lp - lm) / (2.0 * h) - g.by[0]).abs() < 1e-3);
    }

    fn fd_check(p: &RenParams<f64>, s: &RenIqcSpec<f64>, batch: &[TrainSequence<f64>], pen: f64) {
        let (_, _, g) = gradient(p, s, batch, pen).unwrap();
        let gf = g.flatten();
        let theta = flatten(p, s);
        let mask = trainable_mask(p, s);
        let mut checked = 0;
        for k in (0..theta.len()).step_by((theta.len() / 40).max(1)).filter(|&k| mask[k]) {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut plus = theta.clone();
            plus[k] += h;
            let mut minus = theta.clone();
            minus[k] -= h;
            let (mut p1, mut s1) = (p.clone(), s.clone());
            unflatten(&mut p1, &mut s1, &plus);
            let fp = objective(&p1, &s1, batch, pen).unwrap();
            unflatten(&mut p1, &mut s1, &minus);
            let fm = objective(&p1, &s1, batch, pen).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(gf[k].abs()).max(1e-6);
            assert!((fd - gf[k]).abs() / denom < 1e-3, "param {k}: fd {fd} vs analytic {}", gf[k]);
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut p = RenParams::<f64>::random_init(4, 5, 3, Activation::Tanh, 0.6, 11);
        p.c2 = DMatrix::from_fn(3, 4, |i, j| 0.1 * ((i + 2 * j) as f64).sin());
        p.d21 = DMatrix::from_fn(3, 5, |i, j| 0.1 * ((i * j) as f64).cos());
        let s = RenIqcSpec::l2_gain(4, 5, 3, 2.0, 1.0).unwrap();
        let batch = synthetic_batch(&p, 6, 1);
        fd_check(&p, &s, &batch, 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        // Large weights break the certificate so the penalty is active.
        let p = RenParams::<f64>::random_init(3, 4, 2, Activation::Logistic, 2.5, 5);
        let s = RenIqcSpec::l2_gain(3, 4, 2, 1.0, 0.9).unwrap();
        assert!(!check_iqc(&p, &s).unwrap().certified);
        let batch = synthetic_batch(&p, 4, 2);
        fd_check(&p, &s, &batch, 10.0);
    }

    #[test]
    fn training_reduces_loss_and_keeps_certificate() {
        let mut p = RenParams::<f64>::random_init(6, 6, 2, Activation::Tanh, 0.3, 4);
        let mut s = RenIqcSpec::l2_gain(6, 6, 2, 2.0, 1.0).unwrap();
        assert!(check_iqc(&p, &s).unwrap().certified);
        let batch = synthetic_batch(&p, 10, 3);
        let mut losses = Vec::new();
        for _ in 0..80 {
            let out = train_step(&mut p, &mut s, &batch, 0.05, 1e3).unwrap();
            losses.push(out.loss);
        }
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[70..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "{first} -> {last}");
        assert!(check_iqc(&p, &s).unwrap().certified);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut p = RenParams::<f64>::random_init(4, 4, 2, Activation::Relu, 0.3, 8);
            let mut s = RenIqcSpec::l2_gain(4, 4, 2, 2.0, 1.0).unwrap();
            let batch = synthetic_batch(&p, 5, 4);
            for _ in 0..5 {
                train_step(&mut p, &mut s, &batch, 0.01, 1e2).unwrap();
            }
            flatten(&p, &s)
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_loss_leaves_params() {
        let mut p = RenParams::<f64>::zeros(1, 1, 1, Activation::Relu);
        let mut s = RenIqcSpec::l2_gain(1, 1, 1, 1.0, 1.0).unwrap();
        let seq = TrainSequence {
            init_state: DVector::zeros(1),
            inputs: vec![DVector::zeros(1)],
            nominal_next: vec![DVector::from_element(1, f64::NAN)],
            targets: vec![DVector::zeros(1)],
        };
        let before = p.clone();
        assert!(train_step(&mut p, &mut s, &[seq], 0.1, 1.0).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut p = RenParams::<f64>::zeros(1, 1, 1, Activation::Relu);
        let mut s = RenIqcSpec::l2_gain(1, 1, 1, 1.0, 1.0).unwrap();
        assert!(train_step(&mut p, &mut s, &[], 0.1, 1.0).is_err());
    }

    #[test]
    fn rollout_matches_ren_step() {
        // The training forward pass is the same recursion as ren_step.
        let p = RenParams::<f64>::random_init(3, 3, 2, Activation::Tanh, 0.5, 2);
        let batch = synthetic_batch(&p, 3, 0);
        let seq = &batch[0];
        let mut state = RenState::zeros(&p);
        let mut manual = 0.0;
        for k in 0..3 {
            let (next, y) = ren_step(&p, &state, &seq.inputs[k]).unwrap();
            manual += (&seq.nominal_next[k] + y - &seq.targets[k]).norm_squared();
            state = next;
        }
        let l = loss_and_grad(&p, std::slice::from_ref(seq), None).unwrap();
        assert!((l - manual / 6.0).abs() < 1e-14);
    }
}

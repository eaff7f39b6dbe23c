//! Coordinate-wise LSTM meta-learner.
//!
//! The learner parameters are the LSTM cell state. One step computes, for
//! every coordinate `j` independently but with shared gate weights,
//!
//! ```text
//! u_j  = [pre(grad_j), pre(loss), c_j, f_prev_j, i_prev_j]
//! f_j  = sigmoid(W_F · u_j + b_F)
//! i_j  = sigmoid(W_I · u_j + b_I)
//! c'_j = f_j * c_j + i_j * (-grad_j)
//! ```
//!
//! so that `f = 1, i = α` is exactly gradient descent with rate `α`. The
//! gradient and loss enter through `stop_gradient`; the meta-gradient is
//! first order.

use rand::{Rng as _, SeedableRng};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::encoder::LearnerParams;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scaling constant of the log/sign input preprocessing.
pub const PREPROCESS_P: f64 = 10.0;

/// Length of the per-coordinate gate input `u_j`.
pub const FEATURE_DIM: usize = 7;

pub const INIT_FORGET_BIAS: f64 = 4.0;
pub const INIT_INPUT_BIAS: f64 = -4.0;
pub const INIT_GATE_WEIGHT_RANGE: f64 = 0.1;

/// Maps `v` to `(log|v| / p, sign v)` for `|v| >= e^-p`, else `(-1, e^p v)`.
pub fn preprocess(v: f64) -> Result<(f64, f64)> {
    if !v.is_finite() {
        return Err(Error::NonFiniteInput(format!("cannot preprocess {v}")));
    }
    if v.abs() >= (-PREPROCESS_P).exp() {
        Ok((v.abs().ln() / PREPROCESS_P, v.signum()))
    } else {
        Ok((-1.0, PREPROCESS_P.exp() * v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub forget_w: Vec<f64>,
    pub forget_b: f64,
    pub input_w: Vec<f64>,
    pub input_b: f64,
    /// Learned initial learner parameters.
    pub c0: LearnerParams,
}

impl MetaParams {
    pub fn param_count(&self) -> usize {
        self.c0.len()
    }

    /// Gate weights frozen so that `f = 1` and `i = alpha` in double precision.
    pub fn frozen_sgd(alpha: f64, c0: LearnerParams) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("frozen SGD rate must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            forget_w: vec![0.0; FEATURE_DIM],
            forget_b: 50.0,
            input_w: vec![0.0; FEATURE_DIM],
            input_b: (alpha / (1.0 - alpha)).ln(),
            c0,
        })
    }

    /// Places Θ on a tape as bindable inputs.
    pub fn bind(&self, tape: &mut Tape) -> MetaVars {
        MetaVars {
            forget_w: tape.input(self.forget_w.clone()),
            forget_b: tape.input(self.forget_b),
            input_w: tape.input(self.input_w.clone()),
            input_b: tape.input(self.input_b),
            c0: tape.input(self.c0.flat().to_vec()),
        }
    }

    /// Θ with every array shifted by `-step * grad`.
    pub fn apply_update(&self, grad: &MetaGrad, step: f64, train_c0: bool) -> Result<Self> {
        let sub = |a: &[f64], g: &[f64]| a.iter().zip(g).map(|(x, d)| x - step * d).collect::<Vec<_>>();
        let c0 = if train_c0 {
            self.c0.with_flat(sub(self.c0.flat(), &grad.c0))?
        } else {
            self.c0.clone()
        };
        Ok(Self {
            forget_w: sub(&self.forget_w, &grad.forget_w),
            forget_b: self.forget_b - step * grad.forget_b,
            input_w: sub(&self.input_w, &grad.input_w),
            input_b: self.input_b - step * grad.input_b,
            c0,
        })
    }
}

/// Θ as nodes on one tape.
#[derive(Clone, Copy, Debug)]
pub struct MetaVars {
    pub forget_w: NodeId,
    pub forget_b: NodeId,
    pub input_w: NodeId,
    pub input_b: NodeId,
    pub c0: NodeId,
}

impl MetaVars {
    pub fn nodes(&self) -> [NodeId; 5] {
        [self.forget_w, self.forget_b, self.input_w, self.input_b, self.c0]
    }

    pub fn gradient(&self, tape: &Tape, output: NodeId) -> Result<MetaGrad> {
        let mut g = tape.gradient(output, &self.nodes())?.into_iter();
        let mut next = || g.next().expect("five gradients").into_data();
        Ok(MetaGrad {
            forget_w: next(),
            forget_b: next()[0],
            input_w: next(),
            input_b: next()[0],
            c0: next(),
        })
    }
}

/// Gradient of a scalar with respect to every array of Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGrad {
    pub forget_w: Vec<f64>,
    pub forget_b: f64,
    pub input_w: Vec<f64>,
    pub input_b: f64,
    pub c0: Vec<f64>,
}

impl MetaGrad {
    pub fn norm(&self, include_c0: bool) -> f64 {
        let mut sq: f64 = self.forget_w.iter().chain(&self.input_w).map(|v| v * v).sum();
        sq += self.forget_b * self.forget_b + self.input_b * self.input_b;
        if include_c0 {
            sq += self.c0.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for v in self.forget_w.iter_mut().chain(&mut self.input_w).chain(&mut self.c0) {
            *v *= factor;
        }
        self.forget_b *= factor;
        self.input_b *= factor;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.forget_b.is_finite()
            && self.input_b.is_finite()
            && self.forget_w.iter().chain(&self.input_w).chain(&self.c0).all(|v| v.is_finite())
    }
}

/// Recurrent state of the meta-learner during one unroll.
#[derive(Clone, Copy, Debug)]
pub struct MetaState {
    /// Cell state, which is the current learner parameter vector.
    pub c: NodeId,
    pub f_prev: NodeId,
    pub i_prev: NodeId,
    pub t: usize,
}

impl MetaState {
    /// `c = c0`, previous gates at their resting values `sigmoid(b)`.
    pub fn initial(tape: &mut Tape, vars: &MetaVars) -> Result<Self> {
        let n = tape.shape(vars.c0)[0];
        let ones = tape.constant(Tensor::filled(&[n], 1.0));
        let f0 = tape.sigmoid(vars.forget_b)?;
        let i0 = tape.sigmoid(vars.input_b)?;
        Ok(Self {
            c: vars.c0,
            f_prev: tape.mul(ones, f0)?,
            i_prev: tape.mul(ones, i0)?,
            t: 0,
        })
    }
}

/// Loss and gradient of the learner at the current cell state.
#[derive(Clone, Copy, Debug)]
pub struct GradRecord {
    pub loss: NodeId,
    pub grad: NodeId,
}

impl GradRecord {
    pub fn constant(tape: &mut Tape, loss: f64, grad: Vec<f64>) -> Self {
        Self {
            loss: tape.constant(loss),
            grad: tape.constant(grad),
        }
    }
}

/// Gate values of the last step, for diagnostics.
#[derive(Clone, Debug)]
pub struct StepGates {
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
}

/// One meta-learner update of the cell state.
pub fn meta_step(tape: &mut Tape, vars: &MetaVars, state: &MetaState, rec: &GradRecord) -> Result<MetaState> {
    let n = tape.shape(state.c).to_vec();
    if tape.shape(rec.grad) != n.as_slice() {
        return Err(Error::Dimension(format!(
            "gradient has shape {:?}, cell state {:?}",
            tape.shape(rec.grad),
            n
        )));
    }
    if tape.shape(rec.loss).iter().product::<usize>() != 1 {
        return Err(Error::Dimension("loss must be a scalar".into()));
    }
    for node in [state.f_prev, state.i_prev] {
        if tape.shape(node) != n.as_slice() {
            return Err(Error::Dimension("gate state does not match the cell state".into()));
        }
    }
    for node in [vars.forget_w, vars.input_w] {
        if tape.shape(node) != [FEATURE_DIM] {
            return Err(Error::Dimension(format!("gate weights must have {FEATURE_DIM} entries")));
        }
    }

    let grad = tape.stop_gradient(rec.grad)?;
    let loss = tape.stop_gradient(rec.loss)?;

    let (loss_a, loss_b) = preprocess(tape.value(loss).data()[0])?;
    let mut features = Vec::with_capacity(n[0] * 4);
    for &g in tape.value(grad).data() {
        let (a, b) = preprocess(g)?;
        features.extend_from_slice(&[a, b, loss_a, loss_b]);
    }
    let features = tape.constant(Tensor::matrix(n[0], 4, features)?);
    let inputs = tape.concat_cols(&[features, state.c, state.f_prev, state.i_prev])?;

    let zf = tape.matvec(inputs, vars.forget_w)?;
    let zf = tape.add(zf, vars.forget_b)?;
    let forget = tape.sigmoid(zf)?;
    let zi = tape.matvec(inputs, vars.input_w)?;
    let zi = tape.add(zi, vars.input_b)?;
    let input = tape.sigmoid(zi)?;

    let kept = tape.mul(forget, state.c)?;
    let candidate = tape.scale(grad, -1.0)?;
    let written = tape.mul(input, candidate)?;
    let c = tape.add(kept, written)?;
    Ok(MetaState {
        c,
        f_prev: forget,
        i_prev: input,
        t: state.t + 1,
    })
}

/// Gate values recorded on the tape for `state` (after at least one step).
pub fn gates(tape: &Tape, state: &MetaState) -> StepGates {
    StepGates {
        forget: tape.value(state.f_prev).data().to_vec(),
        input: tape.value(state.i_prev).data().to_vec(),
    }
}

/// Random gate weights, `b_F = 4`, `b_I = -4`, and `c0` taken from `c0_init`.
pub fn init_meta(encoder_param_count: usize, seed: u64, c0_init: LearnerParams) -> Result<MetaParams> {
    if c0_init.len() != encoder_param_count {
        return Err(Error::Dimension(format!(
            "initial cell state has {} entries, encoder has {encoder_param_count} parameters",
            c0_init.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let r = INIT_GATE_WEIGHT_RANGE;
    let forget_w = (0..FEATURE_DIM).map(|_| rng.random_range(-r..=r)).collect();
    let input_w = (0..FEATURE_DIM).map(|_| rng.random_range(-r..=r)).collect();
    Ok(MetaParams {
        forget_w,
        forget_b: INIT_FORGET_BIAS,
        input_w,
        input_b: INIT_INPUT_BIAS,
        c0: c0_init,
    })
}

/// Plain gradient descent, `θ - α ∇L`.
pub fn sgd_step(theta: &[f64], grad: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "parameters have length {}, gradient {}",
            theta.len(),
            grad.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {alpha}")));
    }
    Ok(theta.iter().zip(grad).map(|(t, g)| t - alpha * g).collect())
}

//! Plain SGD and bias-corrected Adam over lists of tensors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{CvaeGrads, CvaeParams};
use crate::ndcore::Tensor2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Moment accumulators (Adam) and the step counter.
///
/// `first` and `second` are index-aligned with the parameter tensors and are
/// empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Tensor2>,
    pub second: Vec<Tensor2>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Tensor2]) -> Self {
        let zeros = || params.iter().map(|t| Tensor2::zeros(t.rows(), t.cols())).collect();
        match kind {
            OptimizerKind::Adam => OptimizerState { kind, step: 0, first: zeros(), second: zeros() },
            OptimizerKind::Sgd => OptimizerState { kind, step: 0, first: Vec::new(), second: Vec::new() },
        }
    }

    pub fn for_cvae(kind: OptimizerKind, params: &CvaeParams) -> Self {
        Self::new(kind, &params.tensors())
    }

    /// Widens moment tensors to match grown parameters. New columns get zero
    /// moments; existing values are kept bit for bit.
    pub fn extend_to(&mut self, params: &[&Tensor2]) -> Result<()> {
        if self.kind == OptimizerKind::Sgd {
            return Ok(());
        }
        for moments in [&mut self.first, &mut self.second] {
            if moments.len() != params.len() {
                return Err(Error::Config(format!(
                    "optimizer tracks {} tensors, model has {}",
                    moments.len(),
                    params.len()
                )));
            }
            for (m, p) in moments.iter_mut().zip(params) {
                if m.rows() != p.rows() || m.cols() > p.cols() {
                    return Err(Error::Shape { op: "optimizer extend", left: m.shape(), right: p.shape() });
                }
                while m.cols() < p.cols() {
                    *m = m.append_column(&vec![0.0; m.rows()])?;
                }
            }
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut [&mut Tensor2], grads: &[&Tensor2], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config("parameter and gradient lists differ in length".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "optimizer step", left: p.shape(), right: g.shape() });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads).zip(self.first.iter_mut()).zip(self.second.iter_mut())
                {
                    if m.shape() != p.shape() {
                        return Err(Error::Shape { op: "adam moments", left: m.shape(), right: p.shape() });
                    }
                    let w = p.data_mut();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let d = g.data()[i];
                        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * d;
                        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &CvaeParams, grads: &CvaeGrads, lr: f64) -> Result<CvaeParams> {
    let mut out = params.clone();
    let mut state = OptimizerState::for_cvae(OptimizerKind::Sgd, params);
    state.apply(&mut out.tensors_mut(), &grads.tensors(), lr)?;
    Ok(out)
}

pub fn adam_step(
    params: &CvaeParams,
    grads: &CvaeGrads,
    state: &OptimizerState,
    lr: f64,
) -> Result<(CvaeParams, OptimizerState)> {
    let mut out = params.clone();
    let mut state = state.clone();
    state.apply(&mut out.tensors_mut(), &grads.tensors(), lr)?;
    Ok((out, state))
}

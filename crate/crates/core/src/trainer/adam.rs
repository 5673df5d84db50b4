use std::collections::BTreeMap;

use crate::autograd::GradientSet;
use crate::error::{PegoError, Result};
use crate::numerics::Matrix;
use crate::vit::VitModel;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, keyed by parameter name. Weight decay is 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One step over `params`. Parameters without a gradient are untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Matrix)>,
        grads: &GradientSet,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(PegoError::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powf(self.t as f64);
        let bc2 = 1.0 - BETA2.powf(self.t as f64);
        for (name, p) in params {
            let Ok(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(PegoError::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self.v.entry(name).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut VitModel, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(model.params_mut(), grads, lr)
}

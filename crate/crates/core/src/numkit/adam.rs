use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, created lazily per parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected Adam update in place to every parameter
    /// named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f32) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "adam: `{name}` param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for state in [&self.m, &self.v] {
                if let Some(s) = state.get(name) {
                    if s.shape() != g.shape() {
                        return Err(Error::dim(format!("adam: `{name}` moment shape changed")));
                    }
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = f64::from(lr);
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            let p = params.get_mut(name).expect("checked above").data_mut();
            for i in 0..p.len() {
                let gi = f64::from(g.data()[i]);
                let mi = BETA1 * f64::from(m[i]) + (1.0 - BETA1) * gi;
                let vi = BETA2 * f64::from(v[i]) + (1.0 - BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`]: returns the updated parameters.
pub fn adam_step(params: &ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f32) -> Result<ParamSet> {
    let mut out = params.clone();
    state.step(&mut out, grads, lr)?;
    Ok(out)
}

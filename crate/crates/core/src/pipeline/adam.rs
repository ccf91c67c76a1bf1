use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::tensor::Tensor;

use super::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zero moments for every parameter of `params`.
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of the parameters named in `grads`.
/// Nothing changes when any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| PipelineError::Invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(PipelineError::Invalid(format!(
                "gradient {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(PipelineError::NonFiniteGradient {
                param: name.clone(),
                index: i,
                value: g.data()[i],
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let p = params.get(name).expect("checked above");
        let zeros = || Tensor::zeros(p.shape());
        let m_old = state.m.remove(name).unwrap_or_else(zeros);
        let v_old = state.v.remove(name).unwrap_or_else(zeros);
        let n = p.numel();
        let (mut m, mut v, mut out) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = b1 * m_old.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v_old.data()[i] + (1.0 - b2) * gi * gi;
            let step = (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
            out.push(p.data()[i] - lr * step);
            m.push(mi);
            v.push(vi);
        }
        let shape = p.shape().to_vec();
        params.set(name, Tensor::new(&shape, out)?);
        state.m.insert(name.clone(), Tensor::new(&shape, m)?);
        state.v.insert(name.clone(), Tensor::new(&shape, v)?);
    }
    Ok(())
}

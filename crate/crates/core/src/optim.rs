//! Adam restricted to a set of trainable parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Mask, Network, ParamId, Phase, Real};

pub const SOURCE_LR: f64 = 1e-4;
pub const ADAPT_LR: f64 = 5e-5;

/// Default learning rate of a phase unless `override_lr` is given.
pub fn make_lr(phase: Phase, override_lr: Option<f64>) -> f64 {
    override_lr.unwrap_or(match phase {
        Phase::SourceTrain => SOURCE_LR,
        Phase::Adapt => ADAPT_LR,
    })
}

/// Anything that hands out parameter tensors by id.
pub trait ParamStore<T> {
    fn param_len(&self, id: &ParamId) -> Option<usize>;
    fn param_values_mut(&mut self, id: &ParamId) -> Option<&mut [T]>;
}

impl<T: Real> ParamStore<T> for Network<T> {
    fn param_len(&self, id: &ParamId) -> Option<usize> {
        self.param(id).map(<[T]>::len)
    }

    fn param_values_mut(&mut self, id: &ParamId) -> Option<&mut [T]> {
        self.param_mut(id)
    }
}

impl<T> ParamStore<T> for BTreeMap<ParamId, Vec<T>> {
    fn param_len(&self, id: &ParamId) -> Option<usize> {
        self.get(id).map(Vec::len)
    }

    fn param_values_mut(&mut self, id: &ParamId) -> Option<&mut [T]> {
        self.get_mut(id).map(Vec::as_mut_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    /// Fresh state with zeroed moments for exactly the parameters in `mask`.
    pub fn new<T>(config: AdamConfig, mask: &Mask, store: &impl ParamStore<T>) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                config.lr
            )));
        }
        let mut moments = BTreeMap::new();
        for id in mask.iter() {
            let n = store.param_len(id).ok_or_else(|| {
                Error::OptimizerState(format!("masked parameter {id:?} does not exist"))
            })?;
            moments.insert(
                id.clone(),
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
        }
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.len() != self.moments.len() || mask.iter().any(|id| !self.moments.contains_key(id))
        {
            return Err(Error::OptimizerState(
                "optimizer state was built for a different mask".into(),
            ));
        }
        Ok(())
    }
}

/// One bias-corrected Adam step on the parameters in `mask`.
///
/// Every masked parameter needs a gradient; gradients for parameters outside
/// the mask are ignored and those parameters are left untouched.
pub fn adam_step<'a, T: Real>(
    store: &mut impl ParamStore<T>,
    grads: impl IntoIterator<Item = (&'a ParamId, &'a [T])>,
    mask: &Mask,
    state: &mut AdamState,
) -> Result<()> {
    state.check_mask(mask)?;
    let grads: BTreeMap<&ParamId, &[T]> = grads
        .into_iter()
        .filter(|(id, _)| mask.contains(id))
        .collect();
    if let Some(missing) = mask.iter().find(|id| !grads.contains_key(id)) {
        return Err(Error::OptimizerState(format!(
            "no gradient for masked parameter {missing:?}"
        )));
    }
    for (id, g) in &grads {
        let n = state.moments[*id].m.len();
        if g.len() != n || store.param_len(id) != Some(n) {
            return Err(Error::OptimizerState(format!("size mismatch for {id:?}")));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, g) in grads {
        let mom = state.moments.get_mut(id).expect("checked above");
        let p = store.param_values_mut(id).expect("checked above");
        for (((pv, gv), m), v) in p.iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v) {
            let gv = gv.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * gv;
            *v = beta2 * *v + (1.0 - beta2) * gv * gv;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            if update != 0.0 {
                *pv = T::from_f64(pv.as_f64() - update);
            }
        }
    }
    Ok(())
}

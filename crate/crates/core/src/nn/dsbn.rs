//! Domain-specific batch normalisation.
//!
//! Each domain owns a [`DomainBranch`]: for every normalised layer it keeps
//! its own affine parameters and running statistics, while every other network
//! weight is shared. In training mode a channel is whitened with the mini-batch
//! mean and (biased) variance over `B x H x W`, and the running statistics are
//! then moved towards the batch statistics by an exponential moving average
//! with factor `alpha`. In evaluation mode the running statistics are used and
//! nothing is mutated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor4;
use super::Real;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_EMA_ALPHA: f64 = 0.1;

/// Identifier of a domain (source or one of the targets).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(String);

impl DomainId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Per-layer state of one domain branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False after a statistics reset until the next training-mode pass.
    pub initialized: bool,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn reset_statistics(&mut self) {
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
        self.initialized = false;
    }
}

/// All normalisation state belonging to one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBranch<T> {
    pub epsilon: T,
    pub ema_alpha: T,
    /// One entry per normalisation layer, in network order.
    pub layers: Vec<BnState<T>>,
}

impl<T: Real> DomainBranch<T> {
    pub fn new(channels_per_layer: &[usize]) -> Self {
        Self {
            epsilon: T::from_f64(DEFAULT_EPSILON),
            ema_alpha: T::from_f64(DEFAULT_EMA_ALPHA),
            layers: channels_per_layer
                .iter()
                .map(|c| BnState::new(*c))
                .collect(),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(BnState::channels).sum()
    }

    pub fn reset_statistics(&mut self) {
        for l in &mut self.layers {
            l.reset_statistics();
        }
    }
}

/// Cache of a training-mode normalisation, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn channel_statistics<T: Real>(x: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let [b, c, _, _] = x.dims();
    let hw = x.plane();
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    for s in 0..b {
        for (ch, plane) in x.sample(s).chunks(hw).enumerate() {
            mean[ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; c];
    for s in 0..b {
        for (ch, plane) in x.sample(s).chunks(hw).enumerate() {
            let m = mean[ch];
            var[ch] += plane
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Training-mode normalisation: whitens with batch statistics, applies the
/// affine map and updates the running statistics.
pub(crate) fn normalize_train<T: Real>(
    x: &Tensor4<T>,
    state: &mut BnState<T>,
    epsilon: T,
    alpha: T,
) -> (Tensor4<T>, BnCache<T>) {
    let hw = x.plane();
    let (mean, var) = channel_statistics(x);
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64(1.0 / (v + epsilon.as_f64()).sqrt()))
        .collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for s in 0..x.batch() {
        let xh = x_hat.sample_mut(s);
        for (ch, plane) in xh.chunks_mut(hw).enumerate() {
            let m = T::from_f64(mean[ch]);
            for v in plane {
                *v = (*v - m) * inv_std[ch];
            }
        }
        let ys = y.sample_mut(s);
        let xh = x_hat.sample(s);
        for (ch, (yp, xp)) in ys.chunks_mut(hw).zip(xh.chunks(hw)).enumerate() {
            let (g, b) = (state.gamma[ch], state.beta[ch]);
            for (yv, xv) in yp.iter_mut().zip(xp) {
                *yv = g * *xv + b;
            }
        }
    }
    let one = T::one();
    for ch in 0..state.channels() {
        let (m, v) = (T::from_f64(mean[ch]), T::from_f64(var[ch]));
        if state.initialized {
            state.running_mean[ch] = (one - alpha) * state.running_mean[ch] + alpha * m;
            state.running_var[ch] = (one - alpha) * state.running_var[ch] + alpha * v;
        } else {
            state.running_mean[ch] = m;
            state.running_var[ch] = v;
        }
    }
    state.initialized = true;
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Evaluation-mode normalisation with the stored running statistics.
pub(crate) fn normalize_eval<T: Real>(
    x: &Tensor4<T>,
    state: &BnState<T>,
    epsilon: T,
    domain: &DomainId,
) -> Result<Tensor4<T>> {
    if !state.initialized {
        return Err(Error::UninitializedStatistics(domain.to_string()));
    }
    let hw = x.plane();
    let scale: Vec<T> = state
        .running_var
        .iter()
        .zip(&state.gamma)
        .map(|(v, g)| *g / (*v + epsilon).sqrt())
        .collect();
    let mut y = x.clone();
    for s in 0..x.batch() {
        for (ch, plane) in y.sample_mut(s).chunks_mut(hw).enumerate() {
            let (m, k, b) = (state.running_mean[ch], scale[ch], state.beta[ch]);
            for v in plane {
                *v = (*v - m) * k + b;
            }
        }
    }
    Ok(y)
}

/// Backward through training-mode normalisation, including the dependence of
/// the batch statistics on the input.
pub(crate) fn normalize_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Tensor4<T>,
    grads: Option<(&mut [T], &mut [T])>,
) -> Tensor4<T> {
    let [b, c, _, _] = dy.dims();
    let hw = dy.plane();
    let n = (b * hw) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for s in 0..b {
        for (ch, (gp, xp)) in dy
            .sample(s)
            .chunks(hw)
            .zip(cache.x_hat.sample(s).chunks(hw))
            .enumerate()
        {
            for (g, xh) in gp.iter().zip(xp) {
                sum_dy[ch] += g.as_f64();
                sum_dy_xhat[ch] += g.as_f64() * xh.as_f64();
            }
        }
    }
    if let Some((dgamma, dbeta)) = grads {
        for ch in 0..c {
            dgamma[ch] += T::from_f64(sum_dy_xhat[ch]);
            dbeta[ch] += T::from_f64(sum_dy[ch]);
        }
    }
    let mut dx = dy.clone();
    for s in 0..b {
        let xh = cache.x_hat.sample(s);
        for (ch, (dp, xp)) in dx
            .sample_mut(s)
            .chunks_mut(hw)
            .zip(xh.chunks(hw))
            .enumerate()
        {
            let k = T::from_f64(gamma[ch].as_f64() * cache.inv_std[ch].as_f64() / n);
            let nn = T::from_f64(n);
            let sd = T::from_f64(sum_dy[ch]);
            let sdx = T::from_f64(sum_dy_xhat[ch]);
            for (d, x) in dp.iter_mut().zip(xp) {
                *d = k * (nn * *d - sd - *x * sdx);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_channel_whitens_to_zero() {
        let x = Tensor4::new([4, 1, 2, 2], vec![3.0f64; 16]).unwrap();
        let mut st = BnState::new(1);
        let (y, _) = normalize_train(&x, &mut st, 1e-5, 0.1);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_law_on_whitened_data() {
        let vals: Vec<f64> = (0..64)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor4::new([16, 1, 2, 2], vals).unwrap();
        let mut st = BnState::new(1);
        st.gamma[0] = 2.0;
        st.beta[0] = 3.0;
        let (y, _) = normalize_train(&x, &mut st, 0.0, 0.1);
        let n = y.data().len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert_abs_diff_eq!(mean, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ema_update_arithmetic() {
        let x = Tensor4::new([2, 1, 1, 1], vec![2.0f64, 2.0]).unwrap();
        let mut st = BnState::new(1);
        st.running_mean[0] = 1.0;
        normalize_train(&x, &mut st, 1e-5, 0.1);
        assert_abs_diff_eq!(st.running_mean[0], 1.1, epsilon = 1e-15);
        // batch variance is 0: 0.9 * 1.0 + 0.1 * 0.0
        assert_abs_diff_eq!(st.running_var[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn eval_uses_running_statistics_and_checks_init() {
        let x = Tensor4::new([1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let mut st = BnState::new(1);
        st.running_mean[0] = 2.0;
        st.running_var[0] = 4.0;
        let y = normalize_eval(&x, &st, 0.0, &"d".into()).unwrap();
        assert_eq!(y.data(), &[-0.5, 0.5]);
        st.reset_statistics();
        assert!(matches!(
            normalize_eval(&x, &st, 0.0, &"d".into()),
            Err(Error::UninitializedStatistics(_))
        ));
        normalize_train(&x, &mut st, 0.0, 0.1);
        assert!(st.initialized);
        assert_eq!(st.running_mean[0], 2.0);
    }
}

//! Training objectives and their gradients with respect to the logits.
//!
//! All losses take pre-softmax logits (`B x C`, `f64`), average per-sample
//! terms over the batch and use natural logarithms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distmath::{self, QualityLabel, RatingScale};
use crate::error::{Error, Result};
use crate::nn::{DomainId, Matrix};

/// A loss value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Matrix<f64>,
}

/// Per-domain weights of the adaptation objective
/// `lambda_ent * L_ent - lambda_div * L_div + lambda_gau * L_gau`.
///
/// `lambda_ent` defaults to 1 and only departs from it in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptWeights {
    pub lambda_ent: f64,
    pub lambda_div: f64,
    pub lambda_gau: f64,
}

impl Default for AdaptWeights {
    fn default() -> Self {
        Self {
            lambda_ent: 1.0,
            lambda_div: 1.0,
            lambda_gau: 0.2,
        }
    }
}

impl AdaptWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ent, self.lambda_div, self.lambda_gau];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Penalty on the predicted mean in the source objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPenalty {
    /// `(mu - mu_hat)^2`
    #[default]
    Squared,
    /// `|mu - mu_hat|`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceLossOptions {
    pub sigma_floor: f64,
    pub mean_penalty: MeanPenalty,
}

impl Default for SourceLossOptions {
    fn default() -> Self {
        Self {
            sigma_floor: distmath::DEFAULT_SIGMA_FLOOR,
            mean_penalty: MeanPenalty::Squared,
        }
    }
}

/// Softmax probabilities and log-probabilities of one row.
fn log_softmax(z: &[f64], p: &mut [f64], logp: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for ((l, pv), zv) in logp.iter_mut().zip(p.iter_mut()).zip(z) {
        *l = zv - lse;
        *pv = l.exp();
    }
}

fn check_logits(logits: &Matrix<f64>) -> Result<()> {
    if logits.rows() == 0 || logits.cols() < 2 {
        return Err(Error::Shape(format!(
            "logits must be B x C with B >= 1 and C >= 2, got {}x{}",
            logits.rows(),
            logits.cols()
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    Ok(())
}

/// Cross-entropy to the discretised label plus a penalty on the predicted
/// mean rating.
pub fn source_loss(
    logits: &Matrix<f64>,
    labels: &[QualityLabel],
    scale: &RatingScale,
    opts: &SourceLossOptions,
) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b || c != scale.count() {
        return Err(Error::Shape(format!(
            "{} labels / {} levels for {b}x{c} logits",
            labels.len(),
            scale.count()
        )));
    }
    let levels = scale.levels();
    let mut grad = Matrix::zeros(b, c);
    let (mut p, mut logp) = (vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let q = distmath::discretize(label, scale, opts.sigma_floor)?;
        log_softmax(logits.row(i), &mut p, &mut logp);
        let ce: f64 = -q.probs().iter().zip(&logp).map(|(a, l)| a * l).sum::<f64>();
        let mu_hat: f64 = p.iter().zip(levels).map(|(a, l)| a * l).sum();
        let diff = label.mean - mu_hat;
        let (penalty, dpen_dmu_hat) = match opts.mean_penalty {
            MeanPenalty::Squared => (diff * diff, -2.0 * diff),
            MeanPenalty::Absolute => (diff.abs(), -diff.signum() * (diff != 0.0) as u8 as f64),
        };
        total += ce + penalty;
        let g = grad.row_mut(i);
        for k in 0..c {
            // d mu_hat / d z_k = p_k (l_k - mu_hat)
            g[k] = (p[k] - q.probs()[k] + dpen_dmu_hat * p[k] * (levels[k] - mu_hat)) / b as f64;
        }
    }
    Ok(LossOutput {
        value: total / b as f64,
        grad_logits: grad,
    })
}

/// Mean per-sample prediction entropy.
pub fn entropy_loss(logits: &Matrix<f64>) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(b, c);
    let (mut p, mut logp) = (vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for i in 0..b {
        log_softmax(logits.row(i), &mut p, &mut logp);
        let h: f64 = -p.iter().zip(&logp).map(|(a, l)| a * l).sum::<f64>();
        total += h;
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = -p[k] * (logp[k] + h) / b as f64;
        }
    }
    Ok(LossOutput {
        value: total / b as f64,
        grad_logits: grad,
    })
}

/// Entropy of the batch-averaged prediction.
///
/// With `B = 1` this equals the entropy loss of the single sample.
pub fn diversity_loss(logits: &Matrix<f64>) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, c) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(b, c);
    let mut logp = vec![0.0; c];
    let mut mean = vec![0.0; c];
    for i in 0..b {
        log_softmax(logits.row(i), probs.row_mut(i), &mut logp);
        for (m, p) in mean.iter_mut().zip(probs.row(i)) {
            *m += p / b as f64;
        }
    }
    // ln(0) is clamped; the corresponding term q log q is 0 anyway.
    let log_mean: Vec<f64> = mean.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect();
    let value = -mean.iter().zip(&log_mean).map(|(m, l)| m * l).sum::<f64>();
    let g_mean: Vec<f64> = log_mean.iter().map(|l| -(l + 1.0)).collect();
    let mut grad = Matrix::zeros(b, c);
    for i in 0..b {
        let p = probs.row(i);
        let dot: f64 = p.iter().zip(&g_mean).map(|(a, g)| a * g).sum();
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = p[k] * (g_mean[k] - dot) / b as f64;
        }
    }
    Ok(LossOutput {
        value,
        grad_logits: grad,
    })
}

/// Cross-entropy from each prediction to the discretised Gaussian rebuilt
/// from its own mean and variance. The target is held constant.
pub fn gaussian_reg_loss(
    logits: &Matrix<f64>,
    scale: &RatingScale,
    sigma_floor: f64,
) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, c) = (logits.rows(), logits.cols());
    if c != scale.count() {
        return Err(Error::Shape(format!(
            "{c} logits for {} levels",
            scale.count()
        )));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::InvalidArgument(
            "sigma floor must be positive".into(),
        ));
    }
    let mut grad = Matrix::zeros(b, c);
    let (mut p, mut logp, mut target) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for i in 0..b {
        log_softmax(logits.row(i), &mut p, &mut logp);
        distmath::pseudo_into(&p, scale.levels(), sigma_floor, &mut target);
        total -= target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (p[k] - target[k]) / b as f64;
        }
    }
    Ok(LossOutput {
        value: total / b as f64,
        grad_logits: grad,
    })
}

/// Loss decomposition for one target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLoss {
    pub domain: DomainId,
    pub entropy: f64,
    pub diversity: f64,
    pub gaussian: f64,
    /// Weighted combination for this domain, before averaging over domains.
    pub combined: f64,
    /// Gradient of the overall total with respect to this domain's logits.
    pub grad_logits: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub per_domain: Vec<DomainLoss>,
}

/// Average over target domains of the weighted adaptation objective, with
/// the diversity term subtracted.
pub fn total_adaptation_loss(
    batches: &[(DomainId, &Matrix<f64>)],
    weights: &BTreeMap<DomainId, AdaptWeights>,
    scale: &RatingScale,
    sigma_floor: f64,
) -> Result<TotalLoss> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one target domain".into(),
        ));
    }
    let t = batches.len() as f64;
    let mut per_domain = Vec::with_capacity(batches.len());
    let mut total = 0.0;
    for (domain, logits) in batches {
        let w = weights
            .get(domain)
            .ok_or_else(|| Error::Config(format!("no loss weights for domain `{domain}`")))?;
        w.validate()?;
        let ent = entropy_loss(logits)?;
        let div = diversity_loss(logits)?;
        let gau = gaussian_reg_loss(logits, scale, sigma_floor)?;
        let combined =
            w.lambda_ent * ent.value - w.lambda_div * div.value + w.lambda_gau * gau.value;
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        for (((g, e), d), s) in grad
            .data_mut()
            .iter_mut()
            .zip(ent.grad_logits.data())
            .zip(div.grad_logits.data())
            .zip(gau.grad_logits.data())
        {
            *g = (w.lambda_ent * e - w.lambda_div * d + w.lambda_gau * s) / t;
        }
        total += combined / t;
        per_domain.push(DomainLoss {
            domain: domain.clone(),
            entropy: ent.value,
            diversity: div.value,
            gaussian: gau.value,
            combined,
            grad_logits: grad,
        });
    }
    Ok(TotalLoss { total, per_domain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN5: f64 = 1.609_437_912_434_100_3;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn source_loss_at_its_minimiser() {
        let s = RatingScale::default();
        // Symmetric label: the discretised mean equals the label mean exactly.
        let label = QualityLabel::new(3.0, 0.5).unwrap();
        let q = distmath::discretize(&label, &s, 0.1).unwrap();
        let logits = m(&[&q.probs().iter().map(|p| p.ln()).collect::<Vec<_>>()]);
        let out = source_loss(&logits, &[label], &s, &SourceLossOptions::default()).unwrap();
        assert_abs_diff_eq!(out.value, q.entropy(), epsilon = 1e-12);
        for g in out.grad_logits.data() {
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn source_loss_closed_form() {
        let s = RatingScale::default();
        let label = QualityLabel::new(5.0, 0.0).unwrap();
        // Floor 1e-3 makes the label numerically one-hot at level 5.
        let opts = SourceLossOptions {
            sigma_floor: 1e-3,
            ..Default::default()
        };
        let out = source_loss(&Matrix::zeros(1, 5), &[label], &s, &opts).unwrap();
        assert_abs_diff_eq!(out.value, LN5 + 4.0, epsilon = 1e-9);
        let abs = SourceLossOptions {
            sigma_floor: 1e-3,
            mean_penalty: MeanPenalty::Absolute,
        };
        let out = source_loss(&Matrix::zeros(1, 5), &[label], &s, &abs).unwrap();
        assert_abs_diff_eq!(out.value, LN5 + 2.0, epsilon = 1e-9);
    }

    #[test]
    fn source_loss_rejects_out_of_scale_label() {
        let s = RatingScale::default();
        let label = QualityLabel::new(6.0, 0.2).unwrap();
        let err = source_loss(&Matrix::zeros(1, 5), &[label], &s, &Default::default());
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn entropy_bounds() {
        let out = entropy_loss(&Matrix::zeros(3, 5)).unwrap();
        assert_abs_diff_eq!(out.value, LN5, epsilon = 1e-12);
        let sharp = entropy_loss(&m(&[&[50.0, 0.0, 0.0, 0.0, 0.0]])).unwrap();
        assert!(sharp.value < 1e-8);
    }

    #[test]
    fn diversity_collapse_and_spread() {
        let collapsed = m(&[&[60.0, 0.0, 0.0, 0.0, 0.0], &[60.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(diversity_loss(&collapsed).unwrap().value < 1e-20);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|k| if k == i { 60.0 } else { 0.0 }).collect())
            .collect();
        let spread = diversity_loss(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert_abs_diff_eq!(spread.value, LN5, epsilon = 1e-12);
    }

    #[test]
    fn diversity_of_single_row_is_entropy() {
        let z = m(&[&[0.3, -1.2, 2.0, 0.1, 0.7]]);
        let d = diversity_loss(&z).unwrap();
        let e = entropy_loss(&z).unwrap();
        assert_abs_diff_eq!(d.value, e.value, epsilon = 1e-14);
        for (a, b) in d.grad_logits.data().iter().zip(e.grad_logits.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn diversity_ascent_escapes_collapse() {
        // Identical confident rows; one ascent step on L_div must raise it.
        let row = [4.0, 0.0, 0.0, 0.0, 0.0];
        let z = m(&[&row, &row, &row, &row]);
        let before = diversity_loss(&z).unwrap();
        let mut stepped = z.clone();
        for (v, g) in stepped.data_mut().iter_mut().zip(before.grad_logits.data()) {
            *v += 0.5 * g;
        }
        assert!(diversity_loss(&stepped).unwrap().value > before.value);
    }

    #[test]
    fn gaussian_reg_symmetric_gradient() {
        let s = RatingScale::default();
        let z = m(&[&[0.1, 0.9, 0.2, 0.9, 0.1]]);
        let out = gaussian_reg_loss(&z, &s, 0.1).unwrap();
        let g = out.grad_logits.row(0);
        assert_abs_diff_eq!(g[0], g[4], epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], g[3], epsilon = 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn total_reduces_to_entropy() {
        let s = RatingScale::default();
        let z = m(&[&[0.3, -1.2, 2.0, 0.1, 0.7], &[1.0, 0.0, -1.0, 0.5, 0.2]]);
        let d = DomainId::new("t1");
        let w = BTreeMap::from([(
            d.clone(),
            AdaptWeights {
                lambda_div: 0.0,
                lambda_gau: 0.0,
                ..Default::default()
            },
        )]);
        let total = total_adaptation_loss(&[(d, &z)], &w, &s, 0.1).unwrap();
        let e = entropy_loss(&z).unwrap();
        assert_eq!(total.total, e.value);
        assert_eq!(total.per_domain[0].grad_logits, e.grad_logits);
    }

    #[test]
    fn total_averages_over_domains() {
        let s = RatingScale::default();
        let z = m(&[&[0.3, -1.2, 2.0, 0.1, 0.7], &[1.0, 0.0, -1.0, 0.5, 0.2]]);
        let (a, b) = (DomainId::new("a"), DomainId::new("b"));
        let w: BTreeMap<_, _> = [
            (a.clone(), AdaptWeights::default()),
            (b.clone(), AdaptWeights::default()),
        ]
        .into();
        let one = total_adaptation_loss(&[(a.clone(), &z)], &w, &s, 0.1).unwrap();
        let two = total_adaptation_loss(&[(a, &z), (b, &z)], &w, &s, 0.1).unwrap();
        assert_abs_diff_eq!(one.total, two.total, epsilon = 1e-15);
    }

    #[test]
    fn total_requires_weights() {
        let s = RatingScale::default();
        let z = Matrix::zeros(2, 5);
        let err = total_adaptation_loss(&[(DomainId::new("x"), &z)], &BTreeMap::new(), &s, 0.1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn default_weights() {
        let w = AdaptWeights::default();
        assert_eq!((w.lambda_div, w.lambda_gau), (1.0, 0.2));
    }

    fn check_fd(f: impl Fn(&Matrix<f64>) -> LossOutput, z: &Matrix<f64>) {
        let analytic = f(z).grad_logits;
        let h = 1e-6;
        for i in 0..z.data().len() {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (f(&up).value - f(&dn).value) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "entry {i}: fd {fd} vs {a}"
            );
        }
    }

    proptest::proptest! {
        #[test]
        fn gradients_match_finite_differences(
            vals in proptest::collection::vec(-3.0f64..3.0, 15),
            mean in 1.0f64..5.0,
            var in 0.0f64..1.0,
        ) {
            let s = RatingScale::default();
            let z = Matrix::new(3, 5, vals).unwrap();
            let labels = [
                QualityLabel::new(mean, var).unwrap(),
                QualityLabel::new(3.0, 0.3).unwrap(),
                QualityLabel::new(1.5, 0.1).unwrap(),
            ];
            let opts = SourceLossOptions::default();
            check_fd(|z| source_loss(z, &labels, &s, &opts).unwrap(), &z);
            check_fd(|z| entropy_loss(z).unwrap(), &z);
            check_fd(|z| diversity_loss(z).unwrap(), &z);
            let d = DomainId::new("t");
            let w = BTreeMap::from([(d.clone(), AdaptWeights { lambda_gau: 0.0, ..Default::default() })]);
            check_fd(
                |z| {
                    let t = total_adaptation_loss(&[(d.clone(), z)], &w, &s, 0.1).unwrap();
                    LossOutput { value: t.total, grad_logits: t.per_domain[0].grad_logits.clone() }
                },
                &z,
            );
        }
    }
}

//! Evaluation metrics and analysis tools for rating data.
//!
//! Correlations follow the usual IQA protocol: SROCC on raw predictions and
//! PLCC after a fitted five-parameter logistic mapping.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distmath::RatingScale;
use crate::error::{Error, Result};

/// Parameters `beta1..beta5` of the logistic mapping.
pub type Betas = [f64; 5];

/// Minimum sample count for the logistic fit and PLCC.
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srocc: f64,
    pub plcc: f64,
    pub rmse: f64,
    pub betas: Betas,
    pub n: usize,
}

/// SROCC, PLCC with fitted logistic mapping, and RMSE of the raw predictions.
pub fn evaluate(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    let srocc = srocc(pred, gt)?;
    let (plcc, betas) = plcc(pred, gt)?;
    Ok(MetricReport {
        srocc,
        plcc,
        rmse: rmse(pred, gt)?,
        betas,
        n: pred.len(),
    })
}

fn check_pair(pred: &[f64], gt: &[f64], min: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::Metric(format!(
            "need at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value".into()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srocc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 3)?;
    pearson(&average_ranks(pred), &average_ranks(gt))
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 1)?;
    Ok((pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

/// `beta1 * (1/2 - 1/(1 + exp(beta2 (x - beta3)))) + beta4 x + beta5`.
pub fn logistic_map(x: f64, b: &Betas) -> f64 {
    let e = (b[1] * (x - b[2])).clamp(-500.0, 500.0).exp();
    b[0] * (0.5 - 1.0 / (1.0 + e)) + b[3] * x + b[4]
}

fn sse(pred: &[f64], gt: &[f64], b: &Betas) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (logistic_map(*p, b) - g).powi(2))
        .sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Nelder-Mead minimisation from `start` with per-coordinate initial steps.
fn nelder_mead<const N: usize>(
    f: &impl Fn(&[f64; N]) -> f64,
    start: [f64; N],
    steps: [f64; N],
    max_iter: usize,
    rel_tol: f64,
) -> ([f64; N], f64) {
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for i in 0..N {
        let mut p = start;
        p[i] += steps[i];
        simplex.push((p, f(&p)));
    }
    let combine = |a: &[f64; N], b: &[f64; N], t: f64| -> [f64; N] {
        std::array::from_fn(|i| a[i] + t * (b[i] - a[i]))
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[N].1);
        if (worst - best).abs() <= rel_tol * best.abs() + 1e-300 {
            break;
        }
        let centroid: [f64; N] =
            std::array::from_fn(|i| simplex[..N].iter().map(|p| p.0[i]).sum::<f64>() / N as f64);
        let w = simplex[N].0;
        let refl = combine(&centroid, &w, -1.0);
        let fr = f(&refl);
        if fr < simplex[0].1 {
            let exp = combine(&centroid, &w, -2.0);
            let fe = f(&exp);
            simplex[N] = if fe < fr { (exp, fe) } else { (refl, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (refl, fr);
        } else {
            let c = if fr < worst {
                combine(&centroid, &refl, 0.5)
            } else {
                combine(&centroid, &w, 0.5)
            };
            let fc = f(&c);
            if fc < worst.min(fr) {
                simplex[N] = (c, fc);
            } else {
                let b0 = simplex[0].0;
                for p in simplex.iter_mut().skip(1) {
                    p.0 = combine(&b0, &p.0, 0.5);
                    p.1 = f(&p.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Least-squares fit of the logistic mapping from `pred` to `gt`.
///
/// The simplex search is started from the conventional initial guess, from
/// the identity map and from the least-squares line, and each start is
/// restarted three times around its optimum; the lowest residual wins.
pub fn fit_logistic(pred: &[f64], gt: &[f64]) -> Result<Betas> {
    check_pair(pred, gt, MIN_FIT_SAMPLES).map_err(|e| Error::Fit(e.to_string()))?;
    let (mp, mg) = (mean(pred), mean(gt));
    let spread = |xs: &[f64]| {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                (l.min(*v), h.max(*v))
            });
        hi - lo
    };
    let (rp, rg) = (spread(pred), spread(gt));
    if rp == 0.0 || rg == 0.0 {
        return Err(Error::Fit("constant input".into()));
    }
    let sxx: f64 = pred.iter().map(|p| (p - mp).powi(2)).sum();
    let sxy: f64 = pred.iter().zip(gt).map(|(p, g)| (p - mp) * (g - mg)).sum();
    let slope = sxy / sxx;
    let starts: [Betas; 3] = [
        [rg, 1.0, mp, 0.0, mg],
        [0.0, 1.0, mp, 1.0, 0.0],
        [0.0, 1.0, mp, slope, mg - slope * mp],
    ];
    let f = |b: &Betas| sse(pred, gt, b);
    let steps_for = |b: &Betas| -> Betas {
        let base = [rg, 4.0 / rp, rp, rg / rp, rg];
        std::array::from_fn(|i| 0.1 * base[i].max(b[i].abs()))
    };
    let mut best = (starts[0], f(&starts[0]));
    for s in starts {
        let mut cur = (s, f(&s));
        for _ in 0..3 {
            let next = nelder_mead(&f, cur.0, steps_for(&cur.0), 2000, 1e-10);
            if next.1 <= cur.1 {
                cur = next;
            }
        }
        if cur.1 < best.1 {
            best = cur;
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Fit("logistic fit diverged".into()));
    }
    Ok(best.0)
}

/// Pearson correlation of the logistically mapped predictions with `gt`.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<(f64, Betas)> {
    let betas = fit_logistic(pred, gt)?;
    let mapped: Vec<f64> = pred.iter().map(|p| logistic_map(*p, &betas)).collect();
    let r = pearson(&mapped, gt).map_err(|e| Error::Fit(format!("mapped predictions: {e}")))?;
    Ok((r, betas))
}

/// Counts of raters per rating category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterHistogram {
    counts: Vec<u64>,
}

impl RaterHistogram {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() || counts.iter().sum::<u64>() == 0 {
            return Err(Error::InvalidArgument(
                "histogram needs at least one rating".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|c| *c as f64 / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GofFamily {
    Gaussian,
    Gamma,
    Weibull,
}

impl GofFamily {
    pub const ALL: [GofFamily; 3] = [GofFamily::Gaussian, GofFamily::Gamma, GofFamily::Weibull];

    pub fn name(self) -> &'static str {
        match self {
            GofFamily::Gaussian => "gaussian",
            GofFamily::Gamma => "gamma",
            GofFamily::Weibull => "weibull",
        }
    }
}

impl std::str::FromStr for GofFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(GofFamily::Gaussian),
            "gamma" => Ok(GofFamily::Gamma),
            "weibull" => Ok(GofFamily::Weibull),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution family `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofFit {
    pub family: GofFamily,
    /// gaussian: (mean, std); gamma: (shape, scale); weibull: (shape, scale).
    /// Gamma and Weibull live on the shifted support `rating - r1 + 1`.
    pub params: [f64; 2],
    /// Fitted density at each category, renormalised to sum to 1.
    pub probs: Vec<f64>,
    pub rmse: f64,
}

/// Digamma by upward recurrence and the asymptotic series.
pub(crate) fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + x.ln()
        - 0.5 / x
        - f * (1.0 / 12.0 - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f / 132.0))))
}

pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + 1.0 / x
        + f / 2.0
        + f / x
            * (1.0 / 6.0 - f * (1.0 / 30.0 - f * (1.0 / 42.0 - f * (1.0 / 30.0 - f * 5.0 / 66.0))))
}

const NEWTON_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Gamma shape by Newton on `ln k - digamma(k) = s`, `s > 0`.
fn gamma_shape(s: f64) -> f64 {
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..NEWTON_ITERS {
        let g = k.ln() - digamma(k) - s;
        let dg = 1.0 / k - trigamma(k);
        let mut next = k - g / dg;
        if next <= 0.0 {
            next = k / 2.0;
        }
        let done = ((next - k) / k).abs() < NEWTON_TOL;
        k = next;
        if done {
            break;
        }
    }
    k
}

/// Weibull shape by Newton on the profile-likelihood equation
/// `sum(w x^k ln x) / sum(w x^k) - 1/k - mean_w(ln x) = 0`.
fn weibull_shape(xs: &[f64], ws: &[f64]) -> f64 {
    let n: f64 = ws.iter().sum();
    let mean_log = xs.iter().zip(ws).map(|(x, w)| w * x.ln()).sum::<f64>() / n;
    let var_log = xs
        .iter()
        .zip(ws)
        .map(|(x, w)| w * (x.ln() - mean_log).powi(2))
        .sum::<f64>()
        / n;
    let mut k = 1.2 / var_log.sqrt();
    for _ in 0..NEWTON_ITERS {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (x, w) in xs.iter().zip(ws) {
            let l = x.ln();
            let xk = w * (k * l).exp();
            s0 += xk;
            s1 += xk * l;
            s2 += xk * l * l;
        }
        let g = s1 / s0 - 1.0 / k - mean_log;
        let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        let mut next = k - g / dg;
        if next <= 0.0 {
            next = k / 2.0;
        }
        let done = ((next - k) / k).abs() < NEWTON_TOL;
        k = next;
        if done {
            break;
        }
    }
    k
}

fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn family_log_weights(family: GofFamily, params: [f64; 2], xs: &[f64]) -> Vec<f64> {
    let [a, b] = params;
    match family {
        GofFamily::Gaussian => xs
            .iter()
            .map(|x| -(x - a).powi(2) / (2.0 * b * b))
            .collect(),
        GofFamily::Gamma => xs.iter().map(|x| (a - 1.0) * x.ln() - x / b).collect(),
        GofFamily::Weibull => xs
            .iter()
            .map(|x| (a - 1.0) * x.ln() - (x / b).powf(a))
            .collect(),
    }
}

/// Moment/likelihood estimates that treat every rating as a point sample.
fn point_estimates(family: GofFamily, xs: &[f64], ws: &[f64], sigma_floor: f64) -> [f64; 2] {
    let n: f64 = ws.iter().sum();
    let m = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / n;
    match family {
        GofFamily::Gaussian => {
            let var = xs
                .iter()
                .zip(ws)
                .map(|(x, w)| w * (x - m).powi(2))
                .sum::<f64>()
                / n;
            [m, var.sqrt().max(sigma_floor)]
        }
        GofFamily::Gamma => {
            let ml = xs.iter().zip(ws).map(|(x, w)| w * x.ln()).sum::<f64>() / n;
            let k = gamma_shape(m.ln() - ml);
            [k, m / k]
        }
        GofFamily::Weibull => {
            let k = weibull_shape(xs, ws);
            let lam =
                (xs.iter().zip(ws).map(|(x, w)| w * x.powf(k)).sum::<f64>() / n).powf(1.0 / k);
            [k, lam]
        }
    }
}

/// Fits `family` to the raters in `hist` and compares the fitted category
/// probabilities with the empirical frequencies by RMSE.
///
/// The likelihood maximised is that of the observed category counts under
/// the family's density evaluated at the categories and renormalised, so a
/// histogram drawn from the family is recovered as the sample grows. The
/// point-sample estimates (closed form for the Gaussian, Newton for Gamma and
/// Weibull) seed the search. Gamma and Weibull use the shifted support
/// `rating - r1 + 1`.
pub fn gof_fit(
    hist: &RaterHistogram,
    family: GofFamily,
    scale: &RatingScale,
    sigma_floor: f64,
) -> Result<GofFit> {
    if hist.counts().len() != scale.count() {
        return Err(Error::Fit(format!(
            "{} categories for a {}-level scale",
            hist.counts().len(),
            scale.count()
        )));
    }
    if hist.total() < 5 {
        return Err(Error::Fit(format!(
            "need at least 5 raters, got {}",
            hist.total()
        )));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::InvalidArgument(
            "sigma floor must be positive".into(),
        ));
    }
    let freq = hist.frequencies();
    let ws: Vec<f64> = hist.counts().iter().map(|c| *c as f64).collect();
    let xs: Vec<f64> = match family {
        GofFamily::Gaussian => scale.levels().to_vec(),
        GofFamily::Gamma | GofFamily::Weibull => {
            if hist.counts().iter().filter(|c| **c > 0).count() < 2 {
                return Err(Error::Fit(format!(
                    "{} fit needs at least two used categories",
                    family.name()
                )));
            }
            scale
                .levels()
                .iter()
                .map(|l| l - scale.lower() + 1.0)
                .collect()
        }
    };
    let init = point_estimates(family, &xs, &ws, sigma_floor);
    if init
        .iter()
        .any(|p| !p.is_finite() || *p <= 0.0 && family != GofFamily::Gaussian)
    {
        return Err(Error::Fit(format!(
            "{} fit did not converge",
            family.name()
        )));
    }

    // Search over (location, ln scale) for the Gaussian and (ln shape, ln
    // scale) otherwise; the Gaussian's scale is held at or above the floor.
    let ln_floor = sigma_floor.ln();
    let decode = |t: &[f64; 2]| -> [f64; 2] {
        match family {
            GofFamily::Gaussian => [t[0], t[1].max(ln_floor).exp()],
            _ => [t[0].exp(), t[1].exp()],
        }
    };
    let nll = |t: &[f64; 2]| -> f64 {
        let p = normalize_log_weights(&family_log_weights(family, decode(t), &xs));
        let v: f64 = -ws
            .iter()
            .zip(&p)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, q)| w * q.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>();
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let start = match family {
        GofFamily::Gaussian => [init[0], init[1].ln()],
        _ => [init[0].ln(), init[1].ln()],
    };
    let mut best = (start, nll(&start));
    for _ in 0..3 {
        let next = nelder_mead(&nll, best.0, [0.1 * scale.spacing(), 0.1], 2000, 1e-12);
        if next.1 <= best.1 {
            best = next;
        }
    }
    let params = decode(&best.0);
    let probs = normalize_log_weights(&family_log_weights(family, params, &xs));
    if params.iter().any(|p| !p.is_finite()) || probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit(format!(
            "{} fit did not converge",
            family.name()
        )));
    }
    let rmse = (probs
        .iter()
        .zip(&freq)
        .map(|(p, f)| (p - f).powi(2))
        .sum::<f64>()
        / probs.len() as f64)
        .sqrt();
    Ok(GofFit {
        family,
        params,
        probs,
        rmse,
    })
}

/// Result of k-means over normalised histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Share of histograms in each cluster, in percent.
    pub percentages: Vec<f64>,
    pub inertia: f64,
}

pub const KMEANS_RESTARTS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    // k-means++ seeding
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|x, y| sq_dist(p, &centroids[*x]).total_cmp(&sq_dist(p, &centroids[*y])))
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assignments
        .iter()
        .zip(points)
        .map(|(a, p)| sq_dist(p, &centroids[*a]))
        .sum();
    let mut counts = vec![0usize; k];
    for a in &assignments {
        counts[*a] += 1;
    }
    Clustering {
        assignments,
        centroids,
        percentages: counts
            .iter()
            .map(|c| 100.0 * *c as f64 / points.len() as f64)
            .collect(),
        inertia,
    }
}

/// k-means with k-means++ seeding and [`KMEANS_RESTARTS`] restarts; the run
/// with the lowest inertia is returned.
pub fn cluster_distributions(histograms: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || histograms.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and at least k histograms (k = {k}, got {})",
            histograms.len()
        )));
    }
    let dim = histograms[0].len();
    if dim == 0
        || histograms
            .iter()
            .any(|h| h.len() != dim || h.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "histograms must share a non-zero length and be finite".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_once(histograms, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

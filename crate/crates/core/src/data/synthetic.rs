//! Procedural image domains with analytic quality labels.
//!
//! Every image is a procedural texture (a handful of gratings and sharp-edged
//! rectangles) degraded by one distortion of strength `s ~ U(0, 1)`. The label
//! mean is `5 - 4 s^gamma`. A domain shift applies `a x + b` per channel after
//! distortion and leaves labels untouched.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSet};
use crate::distmath::QualityLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionFamily {
    Blur,
    Noise,
    Contrast,
}

/// Per-channel affine covariate shift `x' = scale * x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|a| *a == 1.0) && self.offset.iter().all(|b| *b == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of distinct procedural contents; images cycle through them.
    pub content_groups: usize,
    pub families: Vec<DistortionFamily>,
    /// Gaussian blur sigma in pixels at strength 0 and 1.
    pub blur_sigma: (f64, f64),
    /// Additive noise standard deviation at strength 0 and 1.
    pub noise_sigma: (f64, f64),
    /// Contrast multiplier at strength 0 and 1.
    pub contrast_scale: (f64, f64),
    /// Exponent of the quality map `5 - 4 s^gamma`.
    pub quality_gamma: f64,
    /// Label variance on the `[1, 5]` scale.
    pub label_variance: f64,
    pub shift: Option<DomainShift>,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            channels: 3,
            content_groups: 200,
            families: vec![
                DistortionFamily::Blur,
                DistortionFamily::Noise,
                DistortionFamily::Contrast,
            ],
            blur_sigma: (0.0, 2.5),
            noise_sigma: (0.0, 0.2),
            contrast_scale: (1.0, 0.25),
            quality_gamma: 1.0,
            label_variance: 0.25,
            shift: None,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!(
                "image size {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if self.content_groups == 0 {
            return bad("content_groups must be at least 1".into());
        }
        if self.families.is_empty() {
            return bad("no distortion family enabled".into());
        }
        let ranges = [
            ("blur_sigma", self.blur_sigma, 0.0),
            ("noise_sigma", self.noise_sigma, 0.0),
            ("contrast_scale", self.contrast_scale, f64::MIN_POSITIVE),
        ];
        for (name, (a, b), min) in ranges {
            if !(a.is_finite() && b.is_finite()) || a < min || b < min || a == b {
                return bad(format!(
                    "{name} range ({a}, {b}) must be finite, non-degenerate and admissible"
                ));
            }
        }
        if !(self.quality_gamma > 0.0 && self.quality_gamma.is_finite()) {
            return bad(format!(
                "quality_gamma must be positive, got {}",
                self.quality_gamma
            ));
        }
        if !(self.label_variance >= 0.0 && self.label_variance.is_finite()) {
            return bad(format!(
                "label_variance must be non-negative, got {}",
                self.label_variance
            ));
        }
        if let Some(s) = &self.shift {
            if s.scale.len() != self.channels || s.offset.len() != self.channels {
                return bad("shift needs one scale and one offset per channel".into());
            }
            if s.scale.iter().chain(&s.offset).any(|v| !v.is_finite()) {
                return bad("non-finite shift".into());
            }
        }
        Ok(())
    }
}

/// Label mean for distortion strength `s` in `[0, 1]`.
pub fn quality_from_strength(s: f64, gamma: f64) -> f64 {
    5.0 - 4.0 * s.clamp(0.0, 1.0).powf(gamma)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ tag) ^ index))
}

/// Procedural content: base colour, three gratings and four flat rectangles.
fn texture(spec: &SyntheticDomainSpec, group: u64) -> Vec<f64> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut rng = stream(spec.seed, 0xC0_47E7, group);
    let mut img = vec![0.0; c * h * w];
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.35..0.65)).collect();
    for (k, b) in base.iter().enumerate() {
        img[k * h * w..(k + 1) * h * w].fill(*b);
    }
    let tau = std::f64::consts::TAU;
    for _ in 0..3 {
        let freq = rng.random_range(1.5..6.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..tau);
        let amp = rng.random_range(0.04..0.1);
        let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.0)).collect();
        let (kx, ky) = (
            theta.cos() * freq * tau / w as f64,
            theta.sin() * freq * tau / h as f64,
        );
        for y in 0..h {
            for x in 0..w {
                let v = amp * (kx * x as f64 + ky * y as f64 + phase).sin();
                for (k, t) in tint.iter().enumerate() {
                    img[k * h * w + y * w + x] += t * v;
                }
            }
        }
    }
    for _ in 0..4 {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (
            rng.random_range(2..=h.div_ceil(2).max(2)),
            rng.random_range(2..=w.div_ceil(2).max(2)),
        );
        let delta: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                for (k, d) in delta.iter().enumerate() {
                    img[k * h * w + y * w + x] += d;
                }
            }
        }
    }
    img
}

fn gaussian_blur(img: &mut [f64], c: usize, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for k in 0..c {
        let plane = &mut img[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - radius, w)])
                    .sum::<f64>()
                    / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                    .sum::<f64>()
                    / norm;
            }
        }
    }
}

fn lerp((a, b): (f64, f64), s: f64) -> f64 {
    a + (b - a) * s
}

/// Generates `n` labelled images. Image `i` depends only on the spec and `i`.
pub fn generate_domain(spec: &SyntheticDomainSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("need at least one sample".into()));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut images = ImageSet::empty([c, h, w]);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let shift = spec.shift.as_ref().filter(|s| !s.is_identity());
    for i in 0..n {
        let mut rng = stream(spec.seed, 0xD157, i as u64);
        let group = rng.random_range(0..spec.content_groups as u64);
        let family = spec.families[rng.random_range(0..spec.families.len())];
        let s: f64 = rng.random();
        let mut img = texture(spec, group);
        match family {
            DistortionFamily::Blur => gaussian_blur(&mut img, c, h, w, lerp(spec.blur_sigma, s)),
            DistortionFamily::Noise => {
                let sd = lerp(spec.noise_sigma, s);
                if sd > 0.0 {
                    let normal = Normal::new(0.0, sd).expect("finite sd");
                    for v in &mut img {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            DistortionFamily::Contrast => {
                let k = lerp(spec.contrast_scale, s);
                for plane in img.chunks_mut(h * w) {
                    let m = plane.iter().sum::<f64>() / (h * w) as f64;
                    for v in plane {
                        *v = m + k * (*v - m);
                    }
                }
            }
        }
        let mut pixels: Vec<f32> = img.iter().map(|v| *v as f32).collect();
        if let Some(sh) = shift {
            for (k, plane) in pixels.chunks_mut(h * w).enumerate() {
                let (a, b) = (sh.scale[k] as f32, sh.offset[k] as f32);
                for v in plane {
                    *v = a * *v + b;
                }
            }
        }
        images.push(&pixels)?;
        labels.push(QualityLabel::new(
            quality_from_strength(s, spec.quality_gamma),
            spec.label_variance,
        )?);
        groups.push(group);
    }
    Dataset::new(images, labels, Some(groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            seed,
            height: 16,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn identity_shift_is_bit_identical() {
        let plain = generate_domain(&small(4), 20).unwrap();
        let spec = SyntheticDomainSpec {
            shift: Some(DomainShift::identity(3)),
            ..small(4)
        };
        let shifted = generate_domain(&spec, 20).unwrap();
        assert_eq!(plain, shifted);
    }

    #[test]
    fn shift_is_affine_per_channel() {
        let plain = generate_domain(&small(4), 5).unwrap();
        let spec = SyntheticDomainSpec {
            shift: Some(DomainShift {
                scale: vec![1.4, 0.6, 1.0],
                offset: vec![0.3, -0.3, 0.0],
            }),
            ..small(4)
        };
        let shifted = generate_domain(&spec, 5).unwrap();
        assert_eq!(plain.labels, shifted.labels);
        let (a, b) = (plain.images.image(2), shifted.images.image(2));
        assert_eq!(b[0], 1.4f32 * a[0] + 0.3f32);
        assert_eq!(b[256], 0.6f32 * a[256] - 0.3f32);
        assert_eq!(b[600], a[600]);
    }

    #[test]
    fn generation_is_reproducible_and_prefix_stable() {
        let a = generate_domain(&small(11), 30).unwrap();
        let b = generate_domain(&small(11), 30).unwrap();
        assert_eq!(a, b);
        let prefix = generate_domain(&small(11), 10).unwrap();
        assert_eq!(prefix, a.subset(&(0..10).collect::<Vec<_>>()));
        assert_ne!(a, generate_domain(&small(12), 30).unwrap());
    }

    #[test]
    fn quality_map_is_strictly_decreasing() {
        for g in [0.5, 1.0, 2.0] {
            let mut prev = f64::INFINITY;
            for i in 0..=100 {
                let q = quality_from_strength(i as f64 / 100.0, g);
                assert!(q < prev);
                prev = q;
            }
        }
        assert_eq!(quality_from_strength(0.0, 1.0), 5.0);
        assert_eq!(quality_from_strength(1.0, 1.0), 1.0);
    }

    #[test]
    fn stronger_blur_lowers_high_frequency_energy() {
        let mut a = texture(&small(0), 3);
        let mut b = a.clone();
        gaussian_blur(&mut a, 3, 16, 16, 0.5);
        gaussian_blur(&mut b, 3, 16, 16, 2.0);
        let energy = |x: &[f64]| x.windows(2).map(|p| (p[1] - p[0]).powi(2)).sum::<f64>();
        assert!(energy(&b) < energy(&a));
    }

    #[test]
    fn label_distribution_matches_quality_map() {
        // mu = 5 - 4 s, s ~ U(0, 1): mu is uniform on [1, 5].
        let d = generate_domain(
            &SyntheticDomainSpec {
                height: 4,
                width: 4,
                ..small(7)
            },
            10_000,
        )
        .unwrap();
        let mut mus = d.means();
        mus.sort_by(f64::total_cmp);
        let n = mus.len() as f64;
        let ks = mus
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let cdf = (m - 1.0) / 4.0;
                (cdf - i as f64 / n)
                    .abs()
                    .max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "Kolmogorov distance {ks}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(0);
        s.blur_sigma = (1.0, 1.0);
        assert!(matches!(generate_domain(&s, 3), Err(Error::Spec(_))));
        let mut s = small(0);
        s.families.clear();
        assert!(matches!(generate_domain(&s, 3), Err(Error::Spec(_))));
        let mut s = small(0);
        s.shift = Some(DomainShift::identity(2));
        assert!(matches!(generate_domain(&s, 3), Err(Error::Spec(_))));
        assert!(matches!(generate_domain(&small(0), 0), Err(Error::Spec(_))));
    }
}

//! Datasets: in-memory image sets, label rescaling, splitting, cropping and
//! batching, plus the synthetic generator and the on-disk manifest format.

mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distmath::{QualityLabel, RatingScale};
use crate::error::{Error, Result};
use crate::nn::Tensor4;

pub use manifest::{
    load_dataset, write_dataset, DatasetManifest, LoadedDataset, ManifestMeta, ManifestRecord,
};
pub(crate) use synthetic::splitmix;
pub use synthetic::{
    generate_domain, quality_from_strength, DistortionFamily, DomainShift, SyntheticDomainSpec,
};

/// Variance assigned on the `[1, 5]` scale when a dataset has none.
pub const DEFAULT_LABEL_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Images of identical shape stored contiguously, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    chw: [usize; 3],
    data: Vec<f32>,
}

impl ImageSet {
    pub fn new(chw: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let per: usize = chw.iter().product();
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(Error::Data(format!(
                "{} values do not form {chw:?} images",
                data.len()
            )));
        }
        Ok(Self { chw, data })
    }

    pub fn empty(chw: [usize; 3]) -> Self {
        Self {
            chw,
            data: Vec::new(),
        }
    }

    pub fn chw(&self) -> [usize; 3] {
        self.chw
    }

    pub fn image_len(&self) -> usize {
        self.chw.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32]) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::Data(format!(
                "image has {} values, expected {}",
                image.len(),
                self.image_len()
            )));
        }
        self.data.extend_from_slice(image);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut out = ImageSet::empty(self.chw);
        for &i in indices {
            out.data.extend_from_slice(self.image(i));
        }
        out
    }

    /// Stacks the selected images into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor4<f32>> {
        let [c, h, w] = self.chw;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor4::new([indices.len(), c, h, w], data)
    }

    /// Applies `f` to every image (same output shape).
    pub fn map_images(
        &self,
        chw: [usize; 3],
        mut f: impl FnMut(usize, &[f32]) -> Result<Vec<f32>>,
    ) -> Result<ImageSet> {
        let mut out = ImageSet::empty(chw);
        for i in 0..self.len() {
            out.push(&f(i, self.image(i))?)?;
        }
        Ok(out)
    }
}

/// Labelled images with optional content-group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: Vec<QualityLabel>,
    /// Content group per image (images sharing source content).
    pub groups: Option<Vec<u64>>,
}

impl Dataset {
    pub fn new(
        images: ImageSet,
        labels: Vec<QualityLabel>,
        groups: Option<Vec<u64>>,
    ) -> Result<Self> {
        if labels.len() != images.len() || groups.as_ref().is_some_and(|g| g.len() != images.len())
        {
            return Err(Error::Data(
                "images, labels and groups differ in length".into(),
            ));
        }
        Ok(Self {
            images,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.subset(indices),
            labels: indices.iter().map(|i| self.labels[*i]).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|g| indices.iter().map(|i| g[*i]).collect()),
        }
    }

    /// The images with every label dropped.
    pub fn unlabeled(&self) -> ImageSet {
        self.images.clone()
    }

    pub fn means(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.mean).collect()
    }

    /// Images whose tag equals `tag`.
    pub fn select(&self, tags: &[SplitTag], tag: SplitTag) -> Dataset {
        let idx: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect();
        self.subset(&idx)
    }
}

/// Maps a score from `[from_min, from_max]` onto the rating scale, flipping
/// lower-is-better scores first. The variance scales with the squared slope.
pub fn rescale_labels(
    mos: f64,
    variance: f64,
    from: (f64, f64),
    higher_is_better: bool,
    scale: &RatingScale,
) -> Result<QualityLabel> {
    let (lo, hi) = from;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Data(format!("empty score range [{lo}, {hi}]")));
    }
    if !(lo..=hi).contains(&mos) {
        return Err(Error::Data(format!("score {mos} outside [{lo}, {hi}]")));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Data(format!("invalid variance {variance}")));
    }
    let slope = (scale.upper() - scale.lower()) / (hi - lo);
    let oriented = if higher_is_better { mos - lo } else { hi - mos };
    QualityLabel::new(scale.lower() + slope * oriented, variance * slope * slope)
}

/// Inverse of [`rescale_labels`] for the mean.
pub fn unscale_mos(
    mean: f64,
    from: (f64, f64),
    higher_is_better: bool,
    scale: &RatingScale,
) -> f64 {
    let (lo, hi) = from;
    let t = (mean - scale.lower()) * (hi - lo) / (scale.upper() - scale.lower());
    if higher_is_better {
        lo + t
    } else {
        hi - t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Split(format!(
                "ratios must be in [0, 1] and sum to 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Counts `floor(train n)`, `floor(val n)` and the remainder.
    fn counts(&self, n: usize) -> [usize; 3] {
        let tr = (self.train * n as f64 + 1e-9).floor() as usize;
        let va = (self.val * n as f64 + 1e-9).floor() as usize;
        [tr, va, n - tr - va]
    }
}

/// Assigns each of `n` items to train/val/test.
///
/// With `groups`, whole groups are allocated (group counts follow the
/// ratios), so no group straddles two splits. Every split with a positive
/// ratio must receive at least one item.
pub fn split(
    n: usize,
    groups: Option<&[u64]>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<SplitTag>> {
    ratios.validate()?;
    if n == 0 {
        return Err(Error::Split("nothing to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let wanted = [ratios.train > 0.0, ratios.val > 0.0, ratios.test > 0.0];
    let mut tags = vec![SplitTag::Train; n];
    let counts = match groups {
        Some(g) => {
            if g.len() != n {
                return Err(Error::Split(
                    "group list length differs from item count".into(),
                ));
            }
            let mut ids: Vec<u64> = g.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.shuffle(&mut rng);
            let counts = ratios.counts(ids.len());
            let mut assign = BTreeMap::new();
            let mut k = 0;
            for (tag, c) in order.iter().zip(counts) {
                for id in &ids[k..k + c] {
                    assign.insert(*id, *tag);
                }
                k += c;
            }
            for (t, id) in tags.iter_mut().zip(g) {
                *t = assign[id];
            }
            counts
        }
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let counts = ratios.counts(n);
            let mut k = 0;
            for (tag, c) in order.iter().zip(counts) {
                for i in &idx[k..k + c] {
                    tags[*i] = *tag;
                }
                k += c;
            }
            counts
        }
    };
    for ((tag, c), w) in order.iter().zip(counts).zip(wanted) {
        if w && c == 0 {
            return Err(Error::Split(format!(
                "{tag} split would be empty; too few {}",
                if groups.is_some() {
                    "content groups"
                } else {
                    "items"
                }
            )));
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

/// Crops an `h x w` window out of a channel-major image.
pub fn crop(
    image: &[f32],
    chw: [usize; 3],
    size: (usize, usize),
    mode: CropMode,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let [c, h, w] = chw;
    let (ch, cw) = size;
    if image.len() != c * h * w {
        return Err(Error::Crop(format!(
            "image has {} values, expected {}",
            image.len(),
            c * h * w
        )));
    }
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::Crop(format!("cannot crop {ch}x{cw} out of {h}x{w}")));
    }
    let (top, left) = match mode {
        CropMode::Center => ((h - ch) / 2, (w - cw) / 2),
        CropMode::Random => (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw)),
    };
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in top..top + ch {
            let row = k * h * w + y * w;
            out.extend_from_slice(&image[row + left..row + left + cw]);
        }
    }
    Ok(out)
}

/// Crops every image of a set.
pub fn crop_all(
    images: &ImageSet,
    size: (usize, usize),
    mode: CropMode,
    seed: u64,
) -> Result<ImageSet> {
    let [c, h, w] = images.chw();
    if (h, w) == size {
        return Ok(images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.map_images([c, size.0, size.1], |_, img| {
        crop(img, [c, h, w], size, mode, &mut rng)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// A trailing partial batch is dropped.
    Train,
    /// A trailing partial batch is kept.
    Eval,
}

/// Index lists for one pass over `n` items.
pub fn batches(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mode == BatchMode::Train && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    Ok(out)
}

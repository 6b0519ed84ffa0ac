//! On-disk dataset format.
//!
//! A dataset is a CSV manifest with header `path,mos,variance,split,group`
//! next to a TOML sidecar of the same stem holding `mos_min`, `mos_max`,
//! `higher_is_better`, `height`, `width` and `channels` (plus optional
//! `default_variance`). `variance`, `split` and `group` may be empty. Each
//! `path` is relative to the manifest directory and names a blob of
//! `channels * height * width` little-endian `f32` values, channel-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{rescale_labels, Dataset, ImageSet, SplitTag, DEFAULT_LABEL_VARIANCE};
use crate::distmath::RatingScale;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub mos_min: f64,
    pub mos_max: f64,
    pub higher_is_better: bool,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Variance on the rating scale for records without one.
    #[serde(default = "default_variance")]
    pub default_variance: f64,
}

fn default_variance() -> f64 {
    DEFAULT_LABEL_VARIANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub mos: f64,
    pub variance: Option<f64>,
    pub split: Option<SplitTag>,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("toml")
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ManifestMeta =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
        if !(meta.mos_min < meta.mos_max)
            || meta.height == 0
            || meta.width == 0
            || meta.channels == 0
        {
            return Err(Error::Data(format!(
                "{}: invalid metadata {meta:?}",
                side.display()
            )));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let expected = ["path", "mos", "variance", "split", "group"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Data(format!(
                "{}: header must be `{}`",
                path.display(),
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let ctx = |m: String| Error::Data(format!("{} row {}: {m}", path.display(), line + 2));
            let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
            let p = field(0).ok_or_else(|| ctx("empty path".into()))?.to_owned();
            if !seen.insert(p.clone()) {
                return Err(ctx(format!("duplicate path `{p}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| ctx(format!("`{s}`: {e}")));
            let mos = num(field(1).ok_or_else(|| ctx("missing mos".into()))?)?;
            let variance = field(2).map(num).transpose()?;
            let split = field(3)
                .map(str::parse)
                .transpose()
                .map_err(|e: Error| ctx(e.to_string()))?;
            records.push(ManifestRecord {
                path: p,
                mos,
                variance,
                split,
                group: field(4).map(str::to_owned),
            });
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: no records", path.display())));
        }
        Ok(Self {
            meta,
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let side = sidecar_path(path);
        let text = toml::to_string(&self.meta).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["path", "mos", "variance", "split", "group"])?;
        for r in &self.records {
            w.write_record([
                r.path.clone(),
                r.mos.to_string(),
                r.variance.map(|v| v.to_string()).unwrap_or_default(),
                r.split.map(|s| s.to_string()).unwrap_or_default(),
                r.group.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn read_blob(path: &Path, len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * len {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * len
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// A loaded dataset and the split tags stored in its manifest (if every
/// record has one).
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub tags: Option<Vec<SplitTag>>,
    pub manifest: DatasetManifest,
}

/// Reads a manifest and its blobs, rescaling labels onto `scale`.
pub fn load_dataset(path: &Path, scale: &RatingScale) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(path)?;
    let m = &manifest.meta;
    let chw = [m.channels, m.height, m.width];
    let mut images = ImageSet::empty(chw);
    let mut labels = Vec::with_capacity(manifest.records.len());
    let mut group_ids: BTreeMap<&str, u64> = BTreeMap::new();
    let mut groups = Vec::with_capacity(manifest.records.len());
    let named_groups = manifest.records.iter().any(|r| r.group.is_some());
    for (i, r) in manifest.records.iter().enumerate() {
        images.push(&read_blob(
            &manifest.root.join(&r.path),
            images.image_len(),
        )?)?;
        let mut label = rescale_labels(
            r.mos,
            r.variance.unwrap_or(0.0),
            (m.mos_min, m.mos_max),
            m.higher_is_better,
            scale,
        )
        .map_err(|e| Error::Data(format!("{}: {e}", r.path)))?;
        if r.variance.is_none() {
            label.variance = m.default_variance;
        }
        labels.push(label);
        // Records without a group form singleton groups.
        let next = group_ids.len() as u64;
        groups.push(match &r.group {
            Some(g) => *group_ids.entry(g.as_str()).or_insert(next),
            None => u64::MAX - i as u64,
        });
    }
    let tags: Option<Vec<SplitTag>> = manifest.records.iter().map(|r| r.split).collect();
    Ok(LoadedDataset {
        dataset: Dataset::new(images, labels, named_groups.then_some(groups))?,
        tags,
        manifest,
    })
}

/// Writes `dataset` as blobs under `dir/images` plus `dir/<name>.csv` and its
/// sidecar. Labels are written on the rating scale.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    dataset: &Dataset,
    tags: Option<&[SplitTag]>,
    scale: &RatingScale,
) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let [c, h, w] = dataset.images.chw();
    let mut records = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let rel = format!("images/{name}_{i:06}.f32");
        let bytes: Vec<u8> = dataset
            .images
            .image(i)
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let p = dir.join(&rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        records.push(ManifestRecord {
            path: rel,
            mos: dataset.labels[i].mean,
            variance: Some(dataset.labels[i].variance),
            split: tags.map(|t| t[i]),
            group: dataset.groups.as_ref().map(|g| g[i].to_string()),
        });
    }
    let manifest = DatasetManifest {
        meta: ManifestMeta {
            mos_min: scale.lower(),
            mos_max: scale.upper(),
            higher_is_better: true,
            height: h,
            width: w,
            channels: c,
            default_variance: DEFAULT_LABEL_VARIANCE,
        },
        records,
        root: dir.to_path_buf(),
    };
    let path = dir.join(format!("{name}.csv"));
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, split, SplitRatios, SyntheticDomainSpec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDomainSpec {
            height: 8,
            width: 8,
            ..Default::default()
        };
        let d = generate_domain(&spec, 12).unwrap();
        let tags = split(12, None, SplitRatios::default(), 1).unwrap();
        let s = RatingScale::default();
        let path = write_dataset(dir.path(), "src", &d, Some(&tags), &s).unwrap();
        let loaded = load_dataset(&path, &s).unwrap();
        assert_eq!(loaded.dataset.images, d.images);
        assert_eq!(loaded.dataset.labels, d.labels);
        assert_eq!(loaded.tags.unwrap(), tags);
        let g = loaded.dataset.groups.unwrap();
        let orig = d.groups.unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(g[i] == g[j], orig[i] == orig[j]);
            }
        }
    }

    fn write_raw(dir: &Path, csv_body: &str, meta: &str) -> PathBuf {
        let p = dir.join("m.csv");
        fs::write(&p, csv_body).unwrap();
        fs::write(dir.join("m.toml"), meta).unwrap();
        fs::write(dir.join("a.f32"), [0u8; 8]).unwrap();
        fs::write(dir.join("b.f32"), [0u8; 8]).unwrap();
        p
    }

    const META: &str = "mos_min = 0.0\nmos_max = 100.0\nhigher_is_better = false\nheight = 1\nwidth = 2\nchannels = 1\n";

    #[test]
    fn dmos_rescaling_and_default_variance() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "path,mos,variance,split,group\na.f32,37.5,25,,\nb.f32,0,,,\n",
            META,
        );
        let l = load_dataset(&p, &RatingScale::default()).unwrap();
        assert!((l.dataset.labels[0].mean - 3.5).abs() < 1e-12);
        assert!((l.dataset.labels[0].variance - 0.04).abs() < 1e-12);
        assert_eq!(l.dataset.labels[1].mean, 5.0);
        assert_eq!(l.dataset.labels[1].variance, DEFAULT_LABEL_VARIANCE);
        assert!(l.tags.is_none());
        assert!(l.dataset.groups.is_none());
    }

    #[test]
    fn manifest_errors() {
        let s = RatingScale::default();
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "path,mos,variance,split,group\na.f32,1,,,\na.f32,2,,,\n",
            META,
        );
        assert!(matches!(load_dataset(&p, &s), Err(Error::Data(_))));
        let p = write_raw(
            dir.path(),
            "path,mos,variance,split,group\na.f32,150,,,\n",
            META,
        );
        assert!(matches!(load_dataset(&p, &s), Err(Error::Data(_))));
        let p = write_raw(
            dir.path(),
            "path,mos,variance,split,group\na.f32,1,,holdout,\n",
            META,
        );
        assert!(matches!(load_dataset(&p, &s), Err(Error::Data(_))));
        let p = write_raw(
            dir.path(),
            "path,mos,variance,split,group\nmissing.f32,1,,,\n",
            META,
        );
        assert!(matches!(load_dataset(&p, &s), Err(Error::Io { .. })));
        let p = write_raw(dir.path(), "path,mos\na.f32,1\n", META);
        assert!(matches!(load_dataset(&p, &s), Err(Error::Data(_))));
        fs::write(dir.path().join("a.f32"), [0u8; 4]).unwrap();
        fs::write(
            dir.path().join("m.csv"),
            "path,mos,variance,split,group\na.f32,1,,,\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p, &s), Err(Error::Data(_))));
    }
}

//! Command implementations. Each writes its artifacts under the output
//! directory and returns the paths it wrote.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::thread;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfiqa::data::{generate_domain, load_dataset, split, SplitRatios};
use sfiqa::distmath::{discretize, dist_mean};
use sfiqa::engine::{self, fmt_real, AdaptTarget, BranchChoice, RunLog, TrainConfig};
use sfiqa::metrics::{cluster_distributions, gof_fit, GofFamily, RaterHistogram, MIN_FIT_SAMPLES};
use sfiqa::{
    Architecture, Checkpoint, Dataset, DomainId, Error, ImageSet, MetricReport, QualityLabel,
    RatingDistribution, RatingScale, Result, SplitTag,
};

use crate::config::{AnalysisSection, Config, DataSource, HistogramSpec};

/// Options shared by the training commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Vec<u64>,
    pub parallel: bool,
    pub no_entropy: bool,
    pub no_div: bool,
    pub no_gau: bool,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// A dataset with split tags (from its manifest or a seeded split).
fn load_data(
    cfg: &Config,
    src: &DataSource,
    scale: &RatingScale,
    seed: u64,
    what: &str,
) -> Result<Dataset> {
    let (dataset, tags) = match (&src.manifest, &src.synthetic) {
        (Some(m), None) => {
            let loaded = load_dataset(&cfg.resolve(m), scale)?;
            (loaded.dataset, loaded.tags)
        }
        (None, Some(spec)) => (generate_domain(spec, src.count)?, None),
        _ => {
            return Err(Error::Config(format!(
                "{what}: give exactly one of `manifest` or `synthetic`"
            )));
        }
    };
    match src.split {
        None => Ok(dataset),
        Some(tag) => {
            let tags = match tags {
                Some(t) => t,
                None => split(
                    dataset.len(),
                    dataset.groups.as_deref(),
                    SplitRatios::default(),
                    seed,
                )?,
            };
            let subset = dataset.select(&tags, tag);
            if subset.is_empty() {
                return Err(Error::Data(format!("{what}: split `{tag}` is empty")));
            }
            Ok(subset)
        }
    }
}

fn seeds(cfg: &Config, opts: &RunOptions) -> Vec<u64> {
    if opts.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        opts.seeds.clone()
    }
}

/// Runs `job` once per seed, in parallel threads if requested; results come
/// back in seed order either way.
fn fan_out<T: Send>(
    seeds: &[u64],
    parallel: bool,
    job: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel {
        thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|seed| s.spawn(|| job(*seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    } else {
        seeds.iter().map(|s| job(*s)).collect()
    }
}

fn header(command: &str, cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let mut h = vec![
        ("command", command.to_string()),
        ("seed", cfg.seed.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
    ];
    if command == "train-source" {
        h.push(("lr", cfg.source_lr.to_string()));
        h.push(("max_epochs", cfg.max_epochs.to_string()));
        h.push(("patience", cfg.patience.to_string()));
    } else {
        h.push(("adapt_lr", cfg.adapt_lr.to_string()));
        h.push(("adapt_steps", cfg.adapt_steps.to_string()));
        h.push(("checkpoint_window", cfg.checkpoint_window.to_string()));
        h.push(("bn_policy", format!("{:?}", cfg.bn_policy)));
        for (d, w) in &cfg.weights {
            h.push((
                "weights",
                format!(
                    "{d}:ent={},div={},gau={}",
                    w.lambda_ent, w.lambda_div, w.lambda_gau
                ),
            ));
        }
    }
    h
}

fn write_logs(dir: &Path, log: &RunLog, header: &[(&str, String)]) -> Result<()> {
    log.write_steps_csv(create(&dir.join("runlog.csv"))?, header)?;
    if !log.epochs.is_empty() {
        log.write_epochs_csv(create(&dir.join("epochs.csv"))?)?;
    }
    log.write_checkpoints_csv(create(&dir.join("checkpoints.csv"))?)
}

fn seed_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = out.join(format!("seed{seed}"));
    create_dir(&dir)?;
    Ok(dir)
}

/// Trains one source model per seed and reports test-split metrics with
/// their mean over seeds.
pub fn train_source(cfg: &Config, opts: &RunOptions, out: &Path) -> Result<Vec<PathBuf>> {
    let section = cfg
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("train-source needs a [source] section".into()))?;
    let scale = cfg.scale()?;
    let domain = DomainId::new(section.domain.as_str());
    create_dir(out)?;
    let seeds = seeds(cfg, opts);
    let results = fan_out(&seeds, opts.parallel, |seed| {
        let tcfg = cfg.train_config(seed)?;
        let data = load_data(cfg, &section.data(), &scale, seed, "[source]")?;
        let tags = match &section.manifest {
            Some(m) => load_dataset(&cfg.resolve(m), &scale)?.tags,
            None => None,
        };
        let tags = match tags {
            Some(t) => t,
            None => split(
                data.len(),
                data.groups.as_deref(),
                SplitRatios::default(),
                seed,
            )?,
        };
        let arch = Architecture {
            in_channels: data.images.chw()[0],
            blocks: cfg.model.blocks.clone(),
            hidden: cfg.model.hidden,
            levels: scale.count(),
        };
        let (net, log) = engine::train_source(&arch, &domain, &data, &tags, &tcfg)?;
        let dir = seed_dir(out, seed)?;
        let ckpt = dir.join("model.ckpt");
        Checkpoint::new(net.clone(), scale.clone())?.save(&ckpt)?;
        write_logs(&dir, &log, &header("train-source", &tcfg))?;
        let test = data.select(&tags, SplitTag::Test);
        let report = if test.len() >= MIN_FIT_SAMPLES {
            Some(
                engine::evaluate(&net, &test, &BranchChoice::Domain(domain.clone()), &tcfg)?.report,
            )
        } else {
            eprintln!(
                "seed {seed}: test split has {} images; no test metrics",
                test.len()
            );
            None
        };
        Ok((seed, ckpt, report))
    })?;

    let report_path = out.join("report.csv");
    let mut w = csv::Writer::from_writer(create(&report_path)?);
    w.write_record(["seed", "srocc", "plcc", "rmse", "n"])?;
    let mut rows: Vec<&MetricReport> = Vec::new();
    for (seed, _, report) in &results {
        if let Some(r) = report {
            w.write_record([
                seed.to_string(),
                fmt_real(r.srocc),
                fmt_real(r.plcc),
                fmt_real(r.rmse),
                r.n.to_string(),
            ])?;
            rows.push(r);
        }
    }
    if !rows.is_empty() {
        let mean = |f: fn(&MetricReport) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        w.write_record([
            "mean".to_string(),
            fmt_real(mean(|r| r.srocc)),
            fmt_real(mean(|r| r.plcc)),
            fmt_real(mean(|r| r.rmse)),
            rows[0].n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&report_path, e))?;
    let mut written: Vec<PathBuf> = results.into_iter().map(|(_, p, _)| p).collect();
    written.push(report_path);
    Ok(written)
}

fn base_branch(cfg: &Config, ckpt: &Checkpoint) -> Result<DomainId> {
    if let Some(b) = &cfg.base_branch {
        return Ok(DomainId::new(b.as_str()));
    }
    let domains: Vec<&DomainId> = ckpt.network.domains().collect();
    match domains.as_slice() {
        [only] => Ok((*only).clone()),
        _ => Err(Error::Config(
            "checkpoint has several branches; set `base_branch` to the one targets start from"
                .into(),
        )),
    }
}

fn load_checkpoint(cfg: &Config) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("`checkpoint` is required".into()))?;
    Checkpoint::load(&cfg.resolve(path))
}

/// Source-free adaptation to the configured targets, jointly or in order.
pub fn adapt(cfg: &Config, opts: &RunOptions, out: &Path, continual: bool) -> Result<Vec<PathBuf>> {
    if cfg.targets.is_empty() {
        return Err(Error::Config("no [[targets]] configured".into()));
    }
    let ckpt = load_checkpoint(cfg)?;
    let base = base_branch(cfg, &ckpt)?;
    let scale = ckpt.scale.clone();
    let command = if continual {
        "adapt-continual"
    } else {
        "adapt"
    };
    create_dir(out)?;
    let seeds = seeds(cfg, opts);
    fan_out(&seeds, opts.parallel, |seed| {
        let mut tcfg = cfg.train_config(seed)?;
        tcfg.scale = scale.clone();
        for w in tcfg.weights.values_mut() {
            if opts.no_entropy {
                w.lambda_ent = 0.0;
            }
            if opts.no_div {
                w.lambda_div = 0.0;
            }
            if opts.no_gau {
                w.lambda_gau = 0.0;
            }
        }
        let ids: Vec<DomainId> = cfg
            .targets
            .iter()
            .map(|t| DomainId::new(t.name.as_str()))
            .collect();
        let images: Vec<ImageSet> = cfg
            .targets
            .iter()
            .map(|t| {
                Ok(load_data(
                    cfg,
                    &t.data(),
                    &scale,
                    seed,
                    &format!("target `{}`", t.name),
                )?
                .unlabeled())
            })
            .collect::<Result<_>>()?;
        let targets: Vec<AdaptTarget> = ids
            .iter()
            .zip(&images)
            .map(|(domain, images)| AdaptTarget { domain, images })
            .collect();
        let (net, log) = if continual {
            engine::adapt_continual(&ckpt.network, &base, &targets, &tcfg)?
        } else {
            engine::adapt(&ckpt.network, &base, &targets, &tcfg)?
        };
        let dir = seed_dir(out, seed)?;
        let path = dir.join("adapted.ckpt");
        Checkpoint::new(net, scale.clone())?.save(&path)?;
        write_logs(&dir, &log, &header(command, &tcfg))?;
        Ok(path)
    })
}

/// Metrics of the checkpoint on every configured dataset.
pub fn evaluate(cfg: &Config, domain: Option<&str>, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(cfg)?;
    let domain = domain
        .or(cfg.domain.as_deref())
        .ok_or_else(|| Error::Config("no domain given (use --domain or `domain`)".into()))?;
    let choice: BranchChoice = domain.parse()?;
    if cfg.datasets.is_empty() {
        return Err(Error::Config("no [[datasets]] configured".into()));
    }
    let mut tcfg = cfg.train_config(cfg.train.seed)?;
    tcfg.scale = ckpt.scale.clone();
    create_dir(out)?;
    let path = out.join("report.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut head = vec![
        "dataset", "domain", "srocc", "plcc", "rmse", "beta1", "beta2", "beta3", "beta4", "beta5",
        "n",
    ];
    let auto = choice == BranchChoice::Auto;
    if auto {
        head.push("chosen_branch");
    }
    w.write_record(&head)?;
    for ds in &cfg.datasets {
        let data = load_data(
            cfg,
            &ds.data(),
            &ckpt.scale,
            cfg.train.seed,
            &format!("dataset `{}`", ds.name),
        )?;
        let ev = engine::evaluate(&ckpt.network, &data, &choice, &tcfg)?;
        let r = &ev.report;
        let mut row = vec![
            ds.name.clone(),
            choice.to_string(),
            fmt_real(r.srocc),
            fmt_real(r.plcc),
            fmt_real(r.rmse),
        ];
        row.extend(r.betas.iter().map(|b| fmt_real(*b)));
        row.push(r.n.to_string());
        if auto {
            row.push(ev.branch.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(vec![path])
}

/// Histograms drawn from discretised Gaussians with random mean and spread.
pub fn synthetic_histograms(
    spec: &HistogramSpec,
    scale: &RatingScale,
    seed: u64,
) -> Result<Vec<RaterHistogram>> {
    let [m0, m1] = spec.mean_range;
    let [s0, s1] = spec.sd_range;
    if !(m0 < m1 && s0 < s1 && s0 > 0.0) || spec.count == 0 || spec.raters == 0 {
        return Err(Error::Config(format!(
            "invalid synthetic histogram spec {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.count)
        .map(|_| {
            let mu = rng.random_range(m0..m1).clamp(scale.lower(), scale.upper());
            let sd: f64 = rng.random_range(s0..s1);
            let q = discretize(&QualityLabel::new(mu, sd * sd)?, scale, sd.min(0.1))?;
            let mut counts = vec![0u64; scale.count()];
            for _ in 0..spec.raters {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let k = q
                    .probs()
                    .iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(scale.count() - 1);
                counts[k] += 1;
            }
            RaterHistogram::new(counts)
        })
        .collect()
}

fn read_histograms(path: &Path, levels: usize) -> Result<Vec<RaterHistogram>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let counts: Vec<u64> = rec
            .iter()
            .map(|v| v.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if counts.len() != levels {
            return Err(Error::Data(format!(
                "{} row {}: {} counts for {levels} levels",
                path.display(),
                i + 1,
                counts.len()
            )));
        }
        out.push(RaterHistogram::new(counts)?);
    }
    Ok(out)
}

fn histograms(
    cfg: &Config,
    section: &AnalysisSection,
    scale: &RatingScale,
    seed: u64,
) -> Result<Vec<RaterHistogram>> {
    match (&section.histograms, &section.synthetic) {
        (Some(p), None) => read_histograms(&cfg.resolve(p), scale.count()),
        (None, Some(spec)) => synthetic_histograms(spec, scale, seed),
        _ => Err(Error::Config(
            "give exactly one of `histograms` or `synthetic`".into(),
        )),
    }
}

fn histogram_mean(h: &RaterHistogram, scale: &RatingScale) -> Result<f64> {
    Ok(dist_mean(&RatingDistribution::new(h.frequencies())?, scale))
}

/// Per-family GoF RMSE averaged within MOS ranges, plus per-histogram fits.
pub fn gof(cfg: &Config, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let section = cfg
        .gof
        .as_ref()
        .ok_or_else(|| Error::Config("gof needs a [gof] section".into()))?;
    let ranges = &section.ranges;
    if ranges.len() < 2 || ranges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "`ranges` must be at least two increasing boundaries".into(),
        ));
    }
    let scale = cfg.scale()?;
    let hists = histograms(cfg, section, &scale, seed)?;
    create_dir(out)?;

    let fits_path = out.join("gof_fits.csv");
    let mut fw = csv::Writer::from_writer(create(&fits_path)?);
    let mut head = vec!["index".to_string(), "mean".to_string()];
    head.extend(GofFamily::ALL.iter().map(|f| f.name().to_string()));
    head.push("best".into());
    fw.write_record(&head)?;

    let bins = ranges.len() - 1;
    // sums[family][bin], counts[family][bin]
    let mut sums = vec![vec![0.0; bins]; GofFamily::ALL.len()];
    let mut counts = vec![vec![0usize; bins]; GofFamily::ALL.len()];
    let mut members = vec![0usize; bins];
    for (i, h) in hists.iter().enumerate() {
        let mean = histogram_mean(h, &scale)?;
        let bin = ranges
            .windows(2)
            .position(|w| mean >= w[0] && mean < w[1])
            .or_else(|| (mean == ranges[bins]).then_some(bins - 1));
        let rmse: Vec<f64> = GofFamily::ALL
            .iter()
            .map(|f| gof_fit(h, *f, &scale, cfg.train.sigma_floor).map_or(f64::NAN, |g| g.rmse))
            .collect();
        let best = GofFamily::ALL
            .iter()
            .zip(&rmse)
            .filter(|(_, r)| r.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or("none", |(f, _)| f.name());
        let mut row = vec![i.to_string(), fmt_real(mean)];
        row.extend(rmse.iter().map(|r| fmt_real(*r)));
        row.push(best.to_string());
        fw.write_record(&row)?;
        if let Some(b) = bin {
            members[b] += 1;
            for (f, r) in rmse.iter().enumerate() {
                if r.is_finite() {
                    sums[f][b] += r;
                    counts[f][b] += 1;
                }
            }
        }
    }
    fw.flush().map_err(|e| Error::io(&fits_path, e))?;

    let table_path = out.join("gof.csv");
    let mut w = csv::Writer::from_writer(create(&table_path)?);
    let mut head = vec!["family".to_string()];
    head.extend(ranges.windows(2).map(|r| format!("{}-{}", r[0], r[1])));
    head.push("weighted_avg".into());
    w.write_record(&head)?;
    let total: usize = members.iter().sum();
    let share: Vec<f64> = members
        .iter()
        .map(|m| *m as f64 / total.max(1) as f64)
        .collect();
    let mut row = vec!["percentage".to_string()];
    row.extend(share.iter().map(|s| fmt_real(100.0 * s)));
    row.push(fmt_real(100.0));
    w.write_record(&row)?;
    for (f, family) in GofFamily::ALL.iter().enumerate() {
        let means: Vec<f64> = (0..bins)
            .map(|b| {
                if counts[f][b] > 0 {
                    sums[f][b] / counts[f][b] as f64
                } else {
                    f64::NAN
                }
            })
            .collect();
        let weighted: f64 = means
            .iter()
            .zip(&share)
            .filter(|(m, _)| m.is_finite())
            .map(|(m, s)| m * s)
            .sum();
        let mut row = vec![family.name().to_string()];
        row.extend(means.iter().map(|m| fmt_real(*m)));
        row.push(fmt_real(weighted));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&table_path, e))?;
    Ok(vec![table_path, fits_path])
}

/// k-means over normalised histograms: centroids with membership shares and
/// the assignment of every histogram.
pub fn cluster(cfg: &Config, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let section = cfg
        .cluster
        .as_ref()
        .ok_or_else(|| Error::Config("cluster needs a [cluster] section".into()))?;
    let scale = cfg.scale()?;
    let hists = histograms(cfg, section, &scale, seed)?;
    if section.k == 0 || section.k > hists.len() {
        return Err(Error::Config(format!(
            "k = {} but there are {} histograms",
            section.k,
            hists.len()
        )));
    }
    let points: Vec<Vec<f64>> = hists.iter().map(RaterHistogram::frequencies).collect();
    let c = cluster_distributions(&points, section.k, seed)?;
    create_dir(out)?;

    let centroids_path = out.join("centroids.csv");
    let mut w = csv::Writer::from_writer(create(&centroids_path)?);
    let mut head = vec!["cluster".to_string(), "percentage".to_string()];
    head.extend((1..=scale.count()).map(|k| format!("p{k}")));
    w.write_record(&head)?;
    for (i, (centroid, pct)) in c.centroids.iter().zip(&c.percentages).enumerate() {
        let mut row = vec![i.to_string(), fmt_real(*pct)];
        row.extend(centroid.iter().map(|v| fmt_real(*v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&centroids_path, e))?;

    let assign_path = out.join("assignments.csv");
    let mut w = csv::Writer::from_writer(create(&assign_path)?);
    w.write_record(["index", "cluster"])?;
    for (i, a) in c.assignments.iter().enumerate() {
        w.write_record([i.to_string(), a.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&assign_path, e))?;
    Ok(vec![centroids_path, assign_path])
}

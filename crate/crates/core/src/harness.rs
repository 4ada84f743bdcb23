//! Batch runners behind the `segment` and `ablate` subcommands.
//!
//! Images are processed on a worker pool, one training session per worker.
//! Every output row is sorted by file name before writing, and nothing
//! depends on scheduling, so results are byte-identical for any thread
//! count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{kmeans_segment, FeatureMode, KMeansConfig};
use crate::error::{Error, Result};
use crate::io::{image_seed, write_label_png, DatasetEntry, DatasetLayout, Size};
use crate::labels::LabelMap;
use crate::losses::LossWeights;
use crate::metrics::{evaluate, mean_std, EvalReport};
use crate::trainer::{ablation_run, train_single_image, Ablation, TrainConfig, TrainTrace};

/// Default side length images are resized to.
pub const DEFAULT_RESIZE: Size = Size::new(128, 128);

pub const METRICS_HEADER: &str = "image,cluster_id,dsc,hm,xor";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sgscn,
    Kmeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Dermoscopy: lr 0.1.
    #[default]
    Derm,
    /// Ultrasound: lr 0.05.
    Us,
}

impl Profile {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Derm => TrainConfig::dermoscopy(),
            Profile::Us => TrainConfig::ultrasound(),
        }
    }
}

/// Everything a run depends on. Serialized verbatim into the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub method: Method,
    pub layout: DatasetLayout,
    pub out_dir: PathBuf,
    pub profile: Profile,
    /// Clusters for k-means.
    pub k: usize,
    pub kmeans_features: FeatureMode,
    pub weights: LossWeights,
    pub max_iters: usize,
    pub min_labels: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl RunOptions {
    pub fn new(images_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let defaults = TrainConfig::dermoscopy();
        let mut layout = DatasetLayout::new(images_dir);
        layout.resize = Some(DEFAULT_RESIZE);
        RunOptions {
            method: Method::Sgscn,
            layout,
            out_dir: out_dir.into(),
            profile: Profile::Derm,
            k: 3,
            kmeans_features: FeatureMode::Rgb,
            weights: defaults.weights,
            max_iters: defaults.max_iters,
            min_labels: defaults.min_labels,
            seed: 0,
            threads: 0,
        }
    }

    /// Training configuration for one image.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut c = self.profile.train_config().with_seed(seed).with_weights(self.weights);
        c.max_iters = self.max_iters;
        c.min_labels = self.min_labels;
        c
    }

    pub fn kmeans_config(&self, seed: u64) -> KMeansConfig {
        let mut c = KMeansConfig::new(self.k).with_seed(seed);
        c.feature_mode = self.kmeans_features;
        c
    }

    fn validate(&self) -> Result<()> {
        self.train_config(self.seed).validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestImage {
    pub image: String,
    pub seed: u64,
    pub source: PathBuf,
    pub mask: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

/// What was run, with which resolved settings, and where results went.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub options: RunOptions,
    /// Resolved per-image training configuration (seed aside).
    pub train_config: TrainConfig,
    pub images: Vec<ManifestImage>,
    /// Seconds since the Unix epoch.
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Mean and population standard deviation of each metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub n: usize,
    pub dsc: (f64, f64),
    pub hm: (f64, f64),
    pub xor: (f64, f64),
}

impl MetricSummary {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Self {
        let reports: Vec<&EvalReport> = reports.into_iter().collect();
        let col = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        MetricSummary {
            n: reports.len(),
            dsc: col(|r| r.dsc),
            hm: col(|r| r.hm),
            xor: col(|r| r.xor),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageResult {
    pub entry: DatasetEntry,
    pub seed: u64,
    pub labels: LabelMap,
    pub trace: Option<TrainTrace>,
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct SegmentSummary {
    pub results: Vec<ImageResult>,
    /// `(image file name, error)` for every image that failed.
    pub failures: Vec<(String, String)>,
    pub metrics: Option<MetricSummary>,
    pub manifest: RunManifest,
}

impl SegmentSummary {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failures.is_empty())
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn metrics_row(out: &mut String, image: &str, r: &EvalReport) {
    let _ = writeln!(out, "{image},{},{:.6},{:.6},{:.6}", r.matched_cluster_id, r.dsc, r.hm, r.xor);
}

fn segment_one(opts: &RunOptions, entry: &DatasetEntry) -> Result<ImageResult> {
    let seed = image_seed(opts.seed, &entry.file_name);
    let (image, mask) = opts.layout.load(entry)?;
    let (labels, trace) = match opts.method {
        Method::Sgscn => {
            let (labels, trace) = train_single_image(&image, &opts.train_config(seed))?;
            (labels, Some(trace))
        }
        Method::Kmeans => (kmeans_segment(&image, &opts.kmeans_config(seed))?, None),
    };
    let report = mask.as_ref().map(|m| evaluate(&labels, m)).transpose()?;
    Ok(ImageResult { entry: entry.clone(), seed, labels, trace, report })
}

/// Segments every image of the dataset and writes `labels/<stem>.png`,
/// `trace/<stem>.csv` (network runs), `metrics.csv` and `summary.csv` (when
/// masks are given) and `manifest.json` under `out_dir`.
pub fn run_segment(opts: &RunOptions) -> Result<SegmentSummary> {
    opts.validate()?;
    let started = unix_now();
    let entries = opts.layout.entries()?;
    let (labels_dir, trace_dir) = (opts.out_dir.join("labels"), opts.out_dir.join("trace"));
    create_dir(&labels_dir)?;
    if opts.method == Method::Sgscn {
        create_dir(&trace_dir)?;
    }

    let outcomes: Vec<Result<ImageResult>> =
        pool(opts.threads)?.install(|| entries.par_iter().map(|e| segment_one(opts, e)).collect());

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut images = Vec::new();
    for (entry, outcome) in entries.iter().zip(outcomes) {
        let mut outputs = Vec::new();
        let written = outcome.and_then(|r| {
            let png = labels_dir.join(format!("{}.png", entry.stem));
            write_label_png(&png, &r.labels)?;
            outputs.push(png);
            if let Some(trace) = &r.trace {
                let csv = trace_dir.join(format!("{}.csv", entry.stem));
                write_file(&csv, trace.to_csv())?;
                outputs.push(csv);
            }
            Ok(r)
        });
        let error = match written {
            Ok(r) => {
                results.push(r);
                None
            }
            Err(e) => {
                log::error!("{}: {e}", entry.file_name);
                failures.push((entry.file_name.clone(), e.to_string()));
                Some(e.to_string())
            }
        };
        images.push(ManifestImage {
            image: entry.file_name.clone(),
            seed: image_seed(opts.seed, &entry.file_name),
            source: entry.image.clone(),
            mask: entry.mask.clone(),
            outputs,
            error,
        });
    }

    let mut metrics = None;
    if opts.layout.masks_dir.is_some() {
        let mut csv = format!("{METRICS_HEADER}\n");
        for r in &results {
            metrics_row(&mut csv, &r.entry.file_name, r.report.as_ref().expect("mask given"));
        }
        write_file(&opts.out_dir.join("metrics.csv"), csv)?;
        let summary = MetricSummary::of(results.iter().filter_map(|r| r.report.as_ref()));
        write_file(&opts.out_dir.join("summary.csv"), summary_csv(&[("all", summary)]))?;
        metrics = Some(summary);
    }

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "segment".into(),
        options: opts.clone(),
        train_config: opts.train_config(opts.seed),
        images,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_manifest(&opts.out_dir, &manifest)?;
    Ok(SegmentSummary { results, failures, metrics, manifest })
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))?;
    write_file(&out_dir.join("manifest.json"), json + "\n")
}

fn summary_csv(rows: &[(&str, MetricSummary)]) -> String {
    let mut s = String::from("setting,n,dsc_mean,dsc_std,hm_mean,hm_std,xor_mean,xor_std\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.n, m.dsc.0, m.dsc.1, m.hm.0, m.hm.1, m.xor.0, m.xor.1
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    /// Per setting (CE, CE+SS, CE+SS+CC): metric means and deviations.
    pub table: Vec<(String, MetricSummary)>,
    pub per_image: Vec<(String, [EvalReport; 3])>,
    pub failures: Vec<(String, String)>,
    pub manifest: RunManifest,
}

impl AblationSummary {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failures.is_empty())
    }

    pub fn mean_dsc(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.table[i].1.dsc.0)
    }
}

fn ablate_one(opts: &RunOptions, entry: &DatasetEntry) -> Result<(Ablation, [EvalReport; 3])> {
    let seed = image_seed(opts.seed, &entry.file_name);
    let (image, mask) = opts.layout.load(entry)?;
    let mask = mask.ok_or(Error::EmptyGroundTruth)?;
    let ab = ablation_run(&image, &opts.train_config(seed))?;
    let [a, b, c] = ab.runs().map(|(labels, _)| evaluate(labels, &mask));
    Ok((ab, [a?, b?, c?]))
}

/// Trains each image under the three loss settings and writes
/// `ablation.csv` (one row per setting: mean and std of DSC / HM / XOR),
/// `ablation_images.csv`, the label maps under `labels/<setting>/` and
/// `manifest.json`. Requires ground-truth masks.
pub fn run_ablation(opts: &RunOptions) -> Result<AblationSummary> {
    opts.validate()?;
    if opts.layout.masks_dir.is_none() {
        return Err(Error::InvalidConfig("ablation needs ground-truth masks (--masks)".into()));
    }
    let started = unix_now();
    let entries = opts.layout.entries()?;
    let settings: Vec<&str> = Ablation::SETTINGS.iter().map(|(n, _)| *n).collect();
    let dirs: Vec<PathBuf> = settings
        .iter()
        .map(|n| opts.out_dir.join("labels").join(n.replace('+', "_")))
        .collect();
    for d in &dirs {
        create_dir(d)?;
    }

    let outcomes: Vec<Result<(Ablation, [EvalReport; 3])>> =
        pool(opts.threads)?.install(|| entries.par_iter().map(|e| ablate_one(opts, e)).collect());

    let mut per_image = Vec::new();
    let mut failures = Vec::new();
    let mut images = Vec::new();
    let mut rows = String::from("image,setting,cluster_id,dsc,hm,xor\n");
    for (entry, outcome) in entries.iter().zip(outcomes) {
        let mut outputs = Vec::new();
        let written = outcome.and_then(|(ab, reports)| {
            for ((labels, _), dir) in ab.runs().into_iter().zip(&dirs) {
                let png = dir.join(format!("{}.png", entry.stem));
                write_label_png(&png, labels)?;
                outputs.push(png);
            }
            Ok(reports)
        });
        let error = match written {
            Ok(reports) => {
                for (name, r) in settings.iter().zip(&reports) {
                    let _ = writeln!(
                        rows,
                        "{},{name},{},{:.6},{:.6},{:.6}",
                        entry.file_name, r.matched_cluster_id, r.dsc, r.hm, r.xor
                    );
                }
                per_image.push((entry.file_name.clone(), reports));
                None
            }
            Err(e) => {
                log::error!("{}: {e}", entry.file_name);
                failures.push((entry.file_name.clone(), e.to_string()));
                Some(e.to_string())
            }
        };
        images.push(ManifestImage {
            image: entry.file_name.clone(),
            seed: image_seed(opts.seed, &entry.file_name),
            source: entry.image.clone(),
            mask: entry.mask.clone(),
            outputs,
            error,
        });
    }

    let table: Vec<(String, MetricSummary)> = settings
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), MetricSummary::of(per_image.iter().map(|(_, r)| &r[i]))))
        .collect();
    let borrowed: Vec<(&str, MetricSummary)> = table.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    write_file(&opts.out_dir.join("ablation.csv"), summary_csv(&borrowed))?;
    write_file(&opts.out_dir.join("ablation_images.csv"), rows)?;

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "ablate".into(),
        options: opts.clone(),
        train_config: opts.train_config(opts.seed),
        images,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_manifest(&opts.out_dir, &manifest)?;
    Ok(AblationSummary { table, per_image, failures, manifest })
}

/// Human-readable table of per-setting means.
pub fn format_table(rows: &[(String, MetricSummary)]) -> String {
    let mut s = format!("{:<10} {:>4} {:>17} {:>17} {:>17}\n", "setting", "n", "DSC", "HM", "XOR");
    for (name, m) in rows {
        let cell = |(mean, std): (f64, f64)| format!("{mean:.4} +- {std:.4}");
        let _ = writeln!(s, "{name:<10} {:>4} {:>17} {:>17} {:>17}", m.n, cell(m.dsc), cell(m.hm), cell(m.xor));
    }
    s
}

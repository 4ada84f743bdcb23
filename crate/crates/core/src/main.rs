use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgscn::baselines::FeatureMode;
use sgscn::checks;
use sgscn::harness::{self, Method, Profile, RunOptions};
use sgscn::io::Size;
use sgscn::losses::LossWeights;

#[derive(Parser)]
#[command(version, about = "Unsupervised single-image segmentation by self-supervised clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment every image in a directory, optionally scoring against masks.
    Segment {
        #[arg(long, value_enum, default_value_t = MethodArg::Sgscn)]
        method: MethodArg,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train each image with CE, CE+SS and CE+SS+CC and compare against masks.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = checks::DEFAULT_STEP)]
        step: f64,
        /// Print one line per check instead of the per-check worst case.
        #[arg(long)]
        verbose: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sgscn,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Derm,
    Us,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    Rgb,
    RgbXy,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Mask file stem = image stem + this suffix.
    #[arg(long, default_value = "")]
    mask_suffix: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ProfileArg::Derm)]
    profile: ProfileArg,
    /// Clusters for k-means.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// k-means pixel features.
    #[arg(long, value_enum, default_value_t = FeaturesArg::Rgb)]
    features: FeaturesArg,
    /// Loss weights as CE,SS,CC.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<LossWeights>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    min_labels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resize every image (and mask) to WxH.
    #[arg(long, default_value_t = harness::DEFAULT_RESIZE, conflicts_with = "no_resize")]
    resize: Size,
    /// Keep the original resolution.
    #[arg(long)]
    no_resize: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [ce, ss, cc] = parts[..] else {
        return Err(format!("expected CE,SS,CC, got `{s}`"));
    };
    let w = LossWeights::new(ce, ss, cc);
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

impl DataArgs {
    fn options(self, method: Method) -> RunOptions {
        let mut o = RunOptions::new(self.images, self.out);
        o.method = method;
        o.layout.masks_dir = self.masks;
        o.layout.mask_suffix = self.mask_suffix;
        o.layout.resize = (!self.no_resize).then_some(self.resize);
        o.profile = match self.profile {
            ProfileArg::Derm => Profile::Derm,
            ProfileArg::Us => Profile::Us,
        };
        o.k = self.k;
        o.kmeans_features = match self.features {
            FeaturesArg::Rgb => FeatureMode::Rgb,
            FeaturesArg::RgbXy => FeatureMode::RgbXy,
        };
        if let Some(w) = self.weights {
            o.weights = w;
        }
        if let Some(n) = self.max_iters {
            o.max_iters = n;
        }
        if let Some(n) = self.min_labels {
            o.min_labels = n;
        }
        o.seed = self.seed;
        o.threads = self.threads;
        o
    }
}

fn run(cli: Cli) -> sgscn::Result<i32> {
    match cli.command {
        Command::Segment { method, data } => {
            let method = match method {
                MethodArg::Sgscn => Method::Sgscn,
                MethodArg::Kmeans => Method::Kmeans,
            };
            let s = harness::run_segment(&data.options(method))?;
            println!("segmented {} image(s), {} failed", s.results.len(), s.failures.len());
            if let Some(m) = s.metrics {
                print!("{}", harness::format_table(&[("all".to_string(), m)]));
            }
            for (image, e) in &s.failures {
                eprintln!("{image}: {e}");
            }
            Ok(s.exit_code())
        }
        Command::Ablate { data } => {
            let s = harness::run_ablation(&data.options(Method::Sgscn))?;
            print!("{}", harness::format_table(&s.table));
            for (image, e) in &s.failures {
                eprintln!("{image}: {e}");
            }
            Ok(s.exit_code())
        }
        Command::Gradcheck { seeds, step, verbose } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let results = checks::run_seeds(&seeds, step)?;
            let mut worst = std::collections::BTreeMap::<&str, (f64, bool)>::new();
            for r in &results {
                if verbose {
                    println!(
                        "{:<32} seed {:>3}  err {:.2e}  checked {:>3}  skipped {:>2}  {}",
                        r.name,
                        r.seed,
                        r.max_rel_error,
                        r.checked,
                        r.skipped,
                        if r.passed() { "ok" } else { "FAIL" }
                    );
                }
                let e = worst.entry(&r.name).or_insert((0.0, true));
                e.0 = e.0.max(r.max_rel_error);
                e.1 &= r.passed();
            }
            for (name, (err, ok)) in &worst {
                println!("{name:<32} max rel err {err:.2e}  {}", if *ok { "ok" } else { "FAIL" });
            }
            Ok(i32::from(worst.values().any(|(_, ok)| !ok)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

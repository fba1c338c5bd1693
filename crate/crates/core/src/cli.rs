//! The `mdnet` command line.
//!
//! Every command resolves its flags into a [`RunConfig`], writes it next to
//! its primary output as `<output>.config.toml`, and then executes it. `mdnet
//! replay <snapshot>` executes a stored config again.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{extract, ExtractConfig, MultiFeatureSet};
use crate::io::{list_images, load_image, save_image, write_atomic};
use crate::losses::LossWeights;
use crate::matcher::{bench_pairwise, match_partitioned, thread_budget, BenchConfig, Match, MatchResult};
use crate::metrics::{evaluate_pair, report_csv};
use crate::model::{load_weights, ModelWeights};
use crate::synthwarp::{generate_texture, Corpus, Homography};
use crate::trainer::{train_joint, train_priming, Stage, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn ctx<E: std::fmt::Display>(what: &str, path: &Path) -> impl FnOnce(E) -> CliError {
    let prefix = format!("{what} {}", path.display());
    move |e| CliError::Input(format!("{prefix}: {e}"))
}

#[derive(Parser, Debug)]
#[command(name = "mdnet", version, about = "Multi-detector local features: train, extract, match, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Priming,
    Joint,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic texture images and a manifest of their seeds.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the priming or the joint training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML training config; replaces the preset entirely.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Primed checkpoint to start the joint stage from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Joint stage from random weights instead of a primed checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        num_detectors: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect multi-set keypoints and describe them.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        budget: usize,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        nms: usize,
        #[arg(long, default_value_t = 256)]
        min_dim: usize,
        #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
        scale_factor: f64,
    },
    /// Set-by-set mutual nearest neighbour matching of two feature files.
    Match {
        #[arg(long)]
        f1: PathBuf,
        #[arg(long)]
        f2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a matched pair against a ground-truth homography.
    Eval {
        #[arg(long)]
        f1: PathBuf,
        #[arg(long)]
        f2: PathBuf,
        /// Nine numbers, row-major, mapping image 1 to image 2.
        #[arg(long)]
        homography: PathBuf,
        /// Match CSV; the features are matched afresh when omitted.
        #[arg(long)]
        matches: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pair")]
        name: String,
    },
    /// Time all-pairs matching of synthetic descriptors for several set counts.
    Bench {
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 2048)]
        kpts: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        detectors: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a stored `*.config.toml` snapshot again.
    Replay {
        snapshot: PathBuf,
        /// Write the primary output here instead of the recorded path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Fully resolved command: everything a rerun needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenCorpus {
        out: PathBuf,
        count: usize,
        size: usize,
        seed: u64,
    },
    Train {
        corpus: PathBuf,
        out: PathBuf,
        from: Option<PathBuf>,
        train: TrainConfig,
    },
    Extract {
        model: PathBuf,
        image: PathBuf,
        out: PathBuf,
        extract: ExtractConfig,
    },
    Match {
        f1: PathBuf,
        f2: PathBuf,
        out: PathBuf,
    },
    Eval {
        f1: PathBuf,
        f2: PathBuf,
        homography: PathBuf,
        matches: Option<PathBuf>,
        out: PathBuf,
        name: String,
    },
    Bench {
        images: usize,
        keypoints: usize,
        detectors: Vec<usize>,
        descriptor_dim: usize,
        seed: u64,
        out: PathBuf,
    },
}

impl RunConfig {
    pub fn output(&self) -> &Path {
        match self {
            RunConfig::GenCorpus { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Extract { out, .. }
            | RunConfig::Match { out, .. }
            | RunConfig::Eval { out, .. }
            | RunConfig::Bench { out, .. } => out,
        }
    }

    pub fn with_output(mut self, path: PathBuf) -> Self {
        match &mut self {
            RunConfig::GenCorpus { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Extract { out, .. }
            | RunConfig::Match { out, .. }
            | RunConfig::Eval { out, .. }
            | RunConfig::Bench { out, .. } => *out = path,
        }
        self
    }

    /// Where the snapshot of this run goes. Directory outputs keep it inside.
    pub fn snapshot_path(&self) -> PathBuf {
        match self {
            RunConfig::GenCorpus { out, .. } => out.join("config.toml"),
            other => sidecar(other.output(), ".config.toml"),
        }
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn load_snapshot(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(ctx("cannot read snapshot", path))?;
    toml::from_str(&text).map_err(ctx("malformed snapshot", path))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(ctx("cannot read", path))?;
    toml::from_str(&text).map_err(ctx("malformed config", path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(ctx("cannot create", dir))?;
    }
    write_atomic(path, bytes).map_err(ctx("cannot write", path))
}

/// Parses a homography file: nine whitespace- or comma-separated numbers.
pub fn read_homography(path: &Path) -> Result<Homography, CliError> {
    let text = fs::read_to_string(path).map_err(ctx("cannot read", path))?;
    let vals: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(ctx("bad number in", path))?;
    let arr: [f64; 9] = vals
        .try_into()
        .map_err(|v: Vec<f64>| CliError::Input(format!("{}: expected 9 numbers, found {}", path.display(), v.len())))?;
    Homography::from_row_major(arr).map_err(ctx("unusable homography in", path))
}

pub fn format_homography(g: &Homography) -> String {
    let v = g.to_row_major();
    let mut s = String::new();
    for row in v.chunks(3) {
        let _ = writeln!(s, "{:e} {:e} {:e}", row[0], row[1], row[2]);
    }
    s
}

/// Parses a match CSV written by `mdnet match`.
pub fn read_matches(path: &Path) -> Result<Vec<Match>, CliError> {
    let text = fs::read_to_string(path).map_err(ctx("cannot read", path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MatchResult::CSV_HEADER) {
        return Err(CliError::Input(format!("{}: not a match CSV", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Input(format!("{}: bad match row {l:?}", path.display()));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Match {
                set: f[0].parse().map_err(|_| bad())?,
                idx1: f[1].parse().map_err(|_| bad())?,
                idx2: f[2].parse().map_err(|_| bad())?,
                distance: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Resolves parsed arguments into a run config.
pub fn resolve(command: Command) -> Result<RunConfig, CliError> {
    Ok(match command {
        Command::GenCorpus { out, count, size, seed } => RunConfig::GenCorpus { out, count, size, seed },
        Command::Train {
            stage,
            corpus,
            out,
            config,
            preset,
            from,
            from_scratch,
            num_detectors,
            iterations,
            seed,
        } => {
            let stage = match stage {
                StageArg::Priming => Stage::Priming,
                StageArg::Joint => Stage::Joint,
            };
            let mut train = match config {
                Some(path) => read_toml::<TrainConfig>(&path)?,
                None => match preset {
                    Preset::Desk => TrainConfig::desk(stage),
                    Preset::Paper => TrainConfig::paper(stage),
                },
            };
            train.stage = stage;
            if let Some(n) = iterations {
                train.iterations = n;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            if let Some(n) = num_detectors {
                train.model.num_detectors = n;
                train.loss.weights = LossWeights::for_detectors(n);
            }
            match (stage, &from, from_scratch) {
                (Stage::Joint, None, false) => {
                    return Err(CliError::Input("joint training needs --from <checkpoint> or --from-scratch".into()))
                }
                (Stage::Joint, Some(_), true) => return Err(CliError::Input("--from and --from-scratch exclude each other".into())),
                (Stage::Priming, Some(_), _) | (Stage::Priming, _, true) => {
                    return Err(CliError::Input("priming always starts from random weights".into()))
                }
                _ => {}
            }
            RunConfig::Train { corpus, out, from, train }
        }
        Command::Extract {
            model,
            image,
            out,
            budget,
            threshold,
            nms,
            min_dim,
            scale_factor,
        } => RunConfig::Extract {
            model,
            image,
            out,
            extract: ExtractConfig {
                budget,
                threshold,
                nms_radius: nms,
                scale_factor,
                min_dim,
                ..ExtractConfig::default()
            },
        },
        Command::Match { f1, f2, out } => RunConfig::Match { f1, f2, out },
        Command::Eval {
            f1,
            f2,
            homography,
            matches,
            out,
            name,
        } => RunConfig::Eval {
            f1,
            f2,
            homography,
            matches,
            out,
            name,
        },
        Command::Bench {
            images,
            kpts,
            detectors,
            dim,
            seed,
            out,
        } => RunConfig::Bench {
            images,
            keypoints: kpts,
            detectors,
            descriptor_dim: dim,
            seed,
            out,
        },
        Command::Replay { snapshot, out } => {
            let run = load_snapshot(&snapshot)?;
            match out {
                Some(path) => run.with_output(path),
                None => run,
            }
        }
    })
}

fn load_features(path: &Path) -> Result<MultiFeatureSet, CliError> {
    MultiFeatureSet::load(path).map_err(ctx("cannot load features", path))
}

fn check_compatible(f1: &MultiFeatureSet, f2: &MultiFeatureSet) -> Result<(), CliError> {
    if f1.num_sets() != f2.num_sets() {
        return Err(CliError::Input(format!("feature files have {} and {} keypoint sets", f1.num_sets(), f2.num_sets())));
    }
    if f1.descriptor_dim != f2.descriptor_dim {
        return Err(CliError::Input(format!(
            "feature files have {}-d and {}-d descriptors",
            f1.descriptor_dim, f2.descriptor_dim
        )));
    }
    Ok(())
}

/// Executes a resolved run: snapshot first, then the work.
pub fn execute(run: &RunConfig) -> Result<(), CliError> {
    let snapshot = toml::to_string(run).map_err(input)?;
    match run {
        RunConfig::GenCorpus { .. } => {}
        _ => write(&run.snapshot_path(), snapshot.as_bytes())?,
    }
    match run {
        RunConfig::GenCorpus { out, count, size, seed } => {
            if *size < 8 {
                return Err(CliError::Input(format!("image size {size} is too small")));
            }
            fs::create_dir_all(out).map_err(ctx("cannot create", out))?;
            let mut manifest = String::from("file,seed,width,height\n");
            for i in 0..*count {
                let s = seed.wrapping_add(i as u64);
                let name = format!("img_{i:05}.png");
                save_image(&generate_texture(s, *size, *size), &out.join(&name)).map_err(ctx("cannot write", &out.join(&name)))?;
                let _ = writeln!(manifest, "{name},{s},{size},{size}");
            }
            write(&out.join("manifest.csv"), manifest.as_bytes())?;
            write(&run.snapshot_path(), snapshot.as_bytes())?;
            info!("wrote {count} images to {}", out.display());
        }
        RunConfig::Train { corpus, out, from, train } => {
            if list_images(corpus).map_err(ctx("cannot list", corpus))?.is_empty() {
                return Err(CliError::Input(format!("no images in {}", corpus.display())));
            }
            let images = Corpus::from_dir(corpus).map_err(ctx("cannot load corpus", corpus))?;
            let outcome = match (train.stage, from) {
                (Stage::Priming, _) => train_priming::<f32>(train, &images, Some(out)),
                (Stage::Joint, Some(ckpt)) => {
                    let primed = load_weights::<f32>(ckpt).map_err(ctx("cannot load checkpoint", ckpt))?;
                    let mut cfg = train.clone();
                    cfg.model = primed.config.clone().with_detectors(train.model.num_detectors);
                    train_joint(&cfg, &images, &primed, Some(out))
                }
                (Stage::Joint, None) => {
                    let init = ModelWeights::<f32>::init(train.model.clone(), train.seed).map_err(input)?;
                    train_joint(train, &images, &init, Some(out))
                }
            }
            .map_err(|e| match e {
                TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } | TrainError::TooManyDegenerate { .. } => {
                    CliError::Numerical(e.to_string())
                }
                other => CliError::Input(other.to_string()),
            })?;
            write(&sidecar(out, ".log.csv"), outcome.log.to_csv().as_bytes())?;
            if let (Some(first), Some(last)) = (outcome.log.records.first(), outcome.log.records.last()) {
                eprintln!(
                    "{:?}: {} iterations, loss {:.4} -> {:.4}",
                    train.stage,
                    outcome.log.records.len(),
                    first.total,
                    last.total
                );
            }
        }
        RunConfig::Extract { model, image, out, extract: cfg } => {
            let weights = load_weights::<f32>(model).map_err(ctx("cannot load model", model))?;
            let img = load_image(image).map_err(ctx("cannot read image", image))?;
            let feats = extract(&img, &weights, cfg).map_err(input)?;
            write(out, &feats.encode())?;
            let counts: Vec<String> = feats.counts().iter().map(|c| c.to_string()).collect();
            eprintln!("{} keypoints, per set: {}", feats.total(), counts.join(" "));
        }
        RunConfig::Match { f1, f2, out } => {
            let (a, b) = (load_features(f1)?, load_features(f2)?);
            check_compatible(&a, &b)?;
            let result = match_partitioned(&a, &b).map_err(input)?;
            write(out, result.to_csv().as_bytes())?;
            eprintln!(
                "{} matches, {} distance evaluations, {:.3} ms",
                result.len(),
                result.distance_computations,
                result.wallclock.as_secs_f64() * 1e3
            );
        }
        RunConfig::Eval {
            f1,
            f2,
            homography,
            matches,
            out,
            name,
        } => {
            let (a, b) = (load_features(f1)?, load_features(f2)?);
            check_compatible(&a, &b)?;
            let g = read_homography(homography)?;
            let result = match matches {
                Some(path) => {
                    let m = read_matches(path)?;
                    for x in &m {
                        let ok = x.set < a.num_sets() && x.idx1 < a.sets[x.set].len() && x.idx2 < b.sets[x.set].len();
                        if !ok {
                            return Err(CliError::Input(format!("{}: match {x:?} is out of range", path.display())));
                        }
                    }
                    MatchResult {
                        matches: m,
                        distance_computations: 0,
                        wallclock: Default::default(),
                    }
                }
                None => match_partitioned(&a, &b).map_err(input)?,
            };
            let report = evaluate_pair(&a, &b, &g, &result);
            write(out, report_csv(&[(name.clone(), report)]).as_bytes())?;
        }
        RunConfig::Bench {
            images,
            keypoints,
            detectors,
            descriptor_dim,
            seed,
            out,
        } => {
            let cfg = BenchConfig {
                images: *images,
                keypoints: *keypoints,
                detectors: detectors.clone(),
                descriptor_dim: *descriptor_dim,
                seed: *seed,
                threads: thread_budget(),
            };
            let report = bench_pairwise(&cfg).map_err(input)?;
            write(out, report.to_csv().as_bytes())?;
            for r in &report.rows {
                eprintln!(
                    "N={}: {:.3} ms/pair, {} distances/pair, speedup {:.2}",
                    r.detectors,
                    r.ms_per_pair(),
                    r.distances_per_pair,
                    r.speedup_vs_1
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match resolve(cli.command).and_then(|run| execute(&run)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

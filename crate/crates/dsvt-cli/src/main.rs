//! `dsvt` command line: partition dumps, forward runs, batching benchmarks,
//! the randomized invariant suite, and synthetic scene generation.
//!
//! Exit codes: 0 success, 1 invariant violation, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsvt::backbone::{forward, partition_dump, save_bev, BackboneConfig, BackboneWeights};
use dsvt::bench::{
    run_bench, synth_scene, write_reports_csv, write_reports_json, BenchConfig, SceneModel,
    Strategy,
};
use dsvt::error::Error;
use dsvt::selfcheck::{run_check, CheckOptions, Mutation};
use dsvt::voxel::{voxelize, EmbedParams, PointCloud};

#[derive(Parser)]
#[command(name = "dsvt", version, about = "Sparse voxel transformer data-path tools")]
struct Cli {
    /// Worker threads for internal parallelism. Defaults to DSVT_THREADS or
    /// all cores; results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in configuration: dsvt-p, dsvt-v, or dsvt-nus.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Backbone configuration JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<BackboneConfig, Error> {
        match (&self.preset, &self.config) {
            (Some(name), None) => BackboneConfig::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{name}` (expected dsvt-p, dsvt-v, or dsvt-nus)"
                ))
            }),
            (None, Some(path)) => BackboneConfig::from_json_file(path),
            _ => Err(Error::Config(
                "exactly one of --preset or --config is required".into(),
            )),
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Point-cloud file: `.csv` with an `x,y,z[,a0,...]` header, anything
    /// else as raw little-endian f32 rows of `3 + extra-dims` floats.
    #[arg(long)]
    input: PathBuf,

    /// Per-point attribute count of a binary input file.
    #[arg(long, default_value_t = 0)]
    extra_dims: usize,
}

impl InputArgs {
    fn load(&self) -> Result<PointCloud, Error> {
        PointCloud::from_file(&self.input, self.extra_dims)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dump every block's per-window set partitions as JSON.
    Partition {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the backbone and write the BEV blob plus its JSON sidecar.
    Forward {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Weights blob (with its sidecar next to it) to load.
        #[arg(long, conflicts_with = "seed")]
        weights: Option<PathBuf>,
        /// Generate deterministic weights from this seed instead of loading.
        #[arg(long)]
        seed: Option<u64>,
        /// Persist the weights in use (handy for reusing seeded fixtures).
        #[arg(long)]
        save_weights: Option<PathBuf>,
        /// Output blob path; the sidecar lands next to it with a .json
        /// extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark batching strategies on a scene.
    Bench {
        /// Point-cloud file to benchmark; omit to synthesize a scene.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Per-point attribute count of a binary input file.
        #[arg(long, default_value_t = 0)]
        extra_dims: usize,
        /// Scene-model JSON for synthesis (used when --input is absent).
        #[arg(long, conflicts_with = "input")]
        model: Option<PathBuf>,
        /// Comma-separated list: dynamic_set, fully_padding, bucketing.
        #[arg(long, default_value = "dynamic_set,fully_padding,bucketing")]
        strategies: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 36)]
        tau: usize,
        /// Window size as L,W,H.
        #[arg(long, default_value = "12,12,1")]
        window: String,
        #[arg(long, default_value_t = 192)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 384)]
        ffn: usize,
        /// Ascending bucket capacities; defaults to thirds of the window.
        #[arg(long)]
        bucket_bounds: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path; a JSON mirror lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized invariant suite; nonzero exit on any violation.
    Check {
        /// Randomized (N, tau) pairs for the partition theorems.
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        /// Randomized attention instances per numeric check.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        max_n: usize,
        #[arg(long, default_value_t = 512)]
        max_tau: usize,
        /// Swap in a known-broken implementation (test hook): float-floor.
        #[arg(long)]
        mutate: Option<String>,
    },
    /// Write a synthetic scene file from a scene-model JSON.
    Gen {
        /// Scene-model JSON file.
        #[arg(long)]
        model: PathBuf,
        /// Override the model's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output path: `.csv` or raw binary by extension.
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_partition(input: &InputArgs, config: &ConfigArgs, out: &Path) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let pc = input.load()?;
    let embed = EmbedParams::seeded(3 + pc.extra_dim(), cfg.channels, 0);
    let grid = voxelize(&pc, &cfg.grid, &embed)?;
    let dump = partition_dump(&grid, &cfg)?;
    let json = serde_json::to_string_pretty(&dump)
        .map_err(|e| Error::Parse(format!("dump encode: {e}")))?;
    std::fs::write(out, json)?;
    println!(
        "partition: {} voxels, {} blocks -> {}",
        dump.voxels,
        dump.blocks.len(),
        out.display()
    );
    Ok(())
}

fn cmd_forward(
    input: &InputArgs,
    config: &ConfigArgs,
    weights_path: Option<&Path>,
    seed: Option<u64>,
    save_weights: Option<&Path>,
    out: &Path,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let pc = input.load()?;
    let weights = match weights_path {
        Some(path) => BackboneWeights::load(path, &cfg)?,
        None => BackboneWeights::seeded(&cfg, pc.extra_dim(), seed.unwrap_or(0)),
    };
    if let Some(path) = save_weights {
        weights.save(path)?;
    }
    let (bev, report) = forward(&pc, &cfg, &weights)?;
    save_bev(out, &bev, &report)?;
    println!(
        "forward: {} points -> {} voxels, BEV {:?} -> {}",
        pc.len(),
        report.final_voxels,
        report.bev_shape,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    input: Option<&Path>,
    extra_dims: usize,
    model_path: Option<&Path>,
    strategies: &str,
    repeats: usize,
    tau: usize,
    window: &str,
    channels: usize,
    heads: usize,
    ffn: usize,
    bucket_bounds: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<(), Error> {
    let strategies = Strategy::parse_list(strategies)?;
    let window = parse_triple(window)?;

    let (pc, model) = match (input, model_path) {
        (Some(path), _) => (PointCloud::from_file(path, extra_dims)?, None),
        (None, Some(path)) => {
            let model = SceneModel::from_json_str(&std::fs::read_to_string(path)?)?;
            (synth_scene(&model)?, Some(model))
        }
        (None, None) => {
            let model = SceneModel {
                seed,
                ..SceneModel::default()
            };
            (synth_scene(&model)?, Some(model))
        }
    };

    let extent = model
        .as_ref()
        .map(|m| m.extent)
        .unwrap_or([150.0, 150.0, 6.0]);
    let mut cfg = BenchConfig::for_extent(extent, [window[0], window[1]], tau);
    cfg.window = window;
    cfg.channels = channels;
    cfg.heads = heads;
    cfg.ffn = ffn;
    cfg.repeats = repeats;
    cfg.seed = seed;
    if let Some(bounds) = bucket_bounds {
        cfg.bucket_bounds = bounds
            .split(',')
            .map(|b| {
                b.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bucket bound `{b}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
    }

    let reports = run_bench(&pc, &cfg, &strategies)?;
    write_reports_csv(out, &reports)?;
    write_reports_json(&out.with_extension("json"), &cfg, model.as_ref(), &reports)?;
    for r in &reports {
        println!(
            "{:<14} windows={:<6} slots={:<9} valid={:<8} pad_ratio={:.4} invocations={} median={:.2}ms p90={:.2}ms",
            r.strategy, r.windows, r.total_slots, r.valid_slots, r.pad_ratio, r.invocations,
            r.median_ms, r.p90_ms
        );
    }
    Ok(())
}

fn cmd_check(
    iters: usize,
    trials: usize,
    seed: u64,
    max_n: usize,
    max_tau: usize,
    mutate: Option<&str>,
) -> Result<(), Error> {
    let mutation = match mutate {
        None => None,
        Some("float-floor") => Some(Mutation::FloatFloor),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown mutation `{other}` (expected float-floor)"
            )))
        }
    };
    let opts = CheckOptions {
        iters,
        trials,
        seed,
        max_n,
        max_tau,
        mutation,
    };
    let summary = run_check(&opts)?;
    println!(
        "check: {} partition pairs, {} mask trials, {} oracle trials - all invariants hold",
        summary.partition_pairs, summary.mask_trials, summary.oracle_trials
    );
    Ok(())
}

fn cmd_gen(model_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let mut model = SceneModel::from_json_str(&std::fs::read_to_string(model_path)?)?;
    if let Some(seed) = seed {
        model.seed = seed;
    }
    let pc = synth_scene(&model)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => pc.to_csv(out)?,
        _ => pc.to_le_bin(out)?,
    }
    println!("gen: {} points -> {}", pc.len(), out.display());
    Ok(())
}

fn parse_triple(s: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "expected L,W,H with three components, got `{s}`"
        )));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse()
            .map_err(|e| Error::Config(format!("window component `{p}`: {e}")))?;
    }
    Ok(out)
}

fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("DSVT_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|e| {
                Error::Config(format!("DSVT_THREADS `{v}`: {e}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Partition { input, config, out } => cmd_partition(input, config, out),
        Command::Forward {
            input,
            config,
            weights,
            seed,
            save_weights,
            out,
        } => cmd_forward(
            input,
            config,
            weights.as_deref(),
            *seed,
            save_weights.as_deref(),
            out,
        ),
        Command::Bench {
            input,
            extra_dims,
            model,
            strategies,
            repeats,
            tau,
            window,
            channels,
            heads,
            ffn,
            bucket_bounds,
            seed,
            out,
        } => cmd_bench(
            input.as_deref(),
            *extra_dims,
            model.as_deref(),
            strategies,
            *repeats,
            *tau,
            window,
            *channels,
            *heads,
            *ffn,
            bucket_bounds.as_deref(),
            *seed,
            out,
        ),
        Command::Check {
            iters,
            trials,
            seed,
            max_n,
            max_tau,
            mutate,
        } => cmd_check(*iters, *trials, *seed, *max_n, *max_tau, mutate.as_deref()),
        Command::Gen { model, seed, out } => cmd_gen(model, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Invariant(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

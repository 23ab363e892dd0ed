//! `paretomerge` command-line interface.
//!
//! Exit status is 0 on success, 1 for errors caused by the inputs (bad
//! flags, missing files, invalid configs) and 2 for internal failures.

mod merge_job;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use paretomerge::driver::{
    partition_models, resume, run, write_report, FrontReport, PartitionSettings, RunConfig,
    RunState, SelectionReport,
};
use paretomerge::partition::NormOrder;
use paretomerge::tensor_store::{infer_layer_index, load_tensor_map};
use paretomerge::Error;

#[derive(Parser, Debug)]
#[command(
    name = "paretomerge",
    version,
    about = "Block-wise model merging with multi-objective Bayesian optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Norm {
    L1,
    L2,
}

impl From<Norm> for NormOrder {
    fn from(n: Norm) -> Self {
        match n {
            Norm::L1 => NormOrder::L1,
            Norm::L2 => NormOrder::L2,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Partition the layers of two expert models into blocks.
    Partition {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "layers.{n}.")]
        layer_pattern: String,
        #[arg(long, default_value_t = 6)]
        blocks: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = Norm::L2)]
        norm: Norm,
        #[arg(long, default_value_t = 1.0)]
        variance_weight: f64,
        /// Use the raw difference profile instead of rescaling it to sum to L.
        #[arg(long)]
        raw_profile: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge models according to a recipe file.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the recipe's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an optimization from a config file.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue an interrupted optimization.
    Resume {
        #[arg(long)]
        state: PathBuf,
    },
    /// Pick solutions from a front for Das-Dennis preference vectors.
    Select {
        #[arg(long)]
        front: PathBuf,
        #[arg(long, default_value_t = 4)]
        divisions: usize,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        /// Defaults to `selection.json` next to the front file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write trace and scatter CSVs from a run state.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> paretomerge::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn summarize(state: &RunState) -> String {
    let front = state.front();
    format!(
        "{} evaluations over {} iterations, {} Pareto-optimal",
        state.observations.len(),
        state.completed_iterations(),
        front.len()
    )
}

fn execute(cmd: Command) -> paretomerge::Result<()> {
    match cmd {
        Command::Partition {
            model_a,
            model_b,
            base,
            layer_pattern,
            blocks,
            lambda,
            norm,
            variance_weight,
            raw_profile,
            out,
        } => {
            let a = load_tensor_map(&model_a)?;
            let b = load_tensor_map(&model_b)?;
            a.check_compatible(&b)?;
            let base = base.map(load_tensor_map).transpose()?;
            if let Some(base) = &base {
                a.check_compatible(base)?;
            }
            let index = infer_layer_index(&a, &layer_pattern)?;
            let settings = PartitionSettings {
                k: blocks,
                lambda,
                variance_weight,
                norm_order: norm.into(),
                normalize_profile: !raw_profile,
            };
            let (_, report) = partition_models(&[a, b], base.as_ref(), &index, &settings)?;
            write_json(&report, &out)?;
            log::info!(
                "{} layers in {} blocks, cost {:.6}",
                report.d.len(),
                report.blocks.len(),
                report.cost
            );
        }
        Command::Merge { recipe, out, seed } => {
            let manifest = merge_job::run(&recipe, &out, seed)?;
            log::info!("wrote {} ({})", out.display(), manifest.output.sha256);
        }
        Command::Optimize {
            config,
            out_dir,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.output_dir = Some(out_dir);
            let state = run(&cfg)?;
            log::info!("{}", summarize(&state));
        }
        Command::Resume { state } => {
            let s = resume(&state, None)?;
            log::info!("{}", summarize(&s));
        }
        Command::Select {
            front,
            divisions,
            top_k,
            out,
        } => {
            let report = FrontReport::load(&front)?;
            let selection = SelectionReport::new(&report, divisions, top_k)?;
            let out = out.unwrap_or_else(|| front.with_file_name("selection.json"));
            write_json(&selection, &out)?;
        }
        Command::Report { state, out_dir } => {
            let s = RunState::load(&state)?;
            for p in write_report(&s, &out_dir)? {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

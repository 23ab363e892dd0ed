//! End-to-end optimization runs: partition, warm start, the batch
//! Bayesian-optimization loop, persisted and resumable run state, and
//! preference-based selection from the final front.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::merge::WeightMode;
use crate::mobo::{
    hypervolume, optimize_acquisition, pareto_filter, reference_point, sobol, AcquisitionOptions,
    ParetoFront,
};
use crate::objectives::{
    EvaluationContext, Evaluator, ExternalCommandEvaluator, MergeInputs, ObjectiveSpec, RawScores,
    SyntheticConflictingEvaluator,
};
use crate::partition::{
    attach_boundary_blocks, compute_layer_diffs, optimal_partition, BlockPartition, NormOrder,
    PartitionConfig, PartitionReport,
};
use crate::surrogate::{fit_gp_with, GpFitOptions, GpHyperparams};
use crate::tensor_store::{infer_layer_index, load_tensor_map, LayerIndex, TensorMap};

pub const STATE_SCHEMA_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    /// Two quadratic objectives peaking at anchors `a` and `b`.
    Synthetic { a: Vec<f64>, b: Vec<f64> },
    /// Shell command with `{model}` and `{output}` placeholders.
    Command {
        command: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_timeout_secs() -> f64 {
    3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSettings {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    pub variance_weight: f64,
    pub norm_order: NormOrder,
    /// Rescale the difference profile to sum to the layer count first.
    pub normalize_profile: bool,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        Self {
            k: 6,
            lambda: 1.0,
            variance_weight: 1.0,
            norm_order: NormOrder::L2,
            normalize_profile: true,
        }
    }
}

impl PartitionSettings {
    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            k: self.k,
            lambda: self.lambda,
            variance_weight: self.variance_weight,
            ..PartitionConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSettings {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    /// Das-Dennis divisions per objective.
    pub divisions: usize,
    pub top_k: usize,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            divisions: 4,
            top_k: 3,
        }
    }
}

/// A run description, read from and written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_a: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_b: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    #[serde(default = "default_layer_pattern")]
    pub layer_pattern: String,
    #[serde(default)]
    pub partition: PartitionSettings,
    #[serde(default)]
    pub weight_mode: WeightMode,
    /// May be empty for the synthetic evaluator, which supplies its own.
    #[serde(default)]
    pub objectives: Vec<ObjectiveSpec>,
    pub evaluator: EvaluatorConfig,
    /// Search dimension when no models are given; derived otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub surrogate: SurrogateSettings,
    #[serde(default)]
    pub acquisition: AcquisitionOptions,
    #[serde(default)]
    pub selection: SelectionSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_layer_pattern() -> String {
    "layers.{n}.".into()
}
fn default_n0() -> usize {
    8
}
fn default_t() -> usize {
    20
}
fn default_q() -> usize {
    4
}
fn default_concurrency() -> usize {
    1
}

impl RunConfig {
    /// Default budget on the synthetic evaluator.
    pub fn synthetic(a: Vec<f64>, b: Vec<f64>, seed: u64) -> Self {
        Self {
            model_a: None,
            model_b: None,
            base: None,
            layer_pattern: default_layer_pattern(),
            partition: PartitionSettings::default(),
            weight_mode: WeightMode::Interpolation,
            objectives: Vec::new(),
            evaluator: EvaluatorConfig::Synthetic { a, b },
            dimension: None,
            n0: default_n0(),
            t: default_t(),
            q: default_q(),
            seed,
            concurrency: 1,
            surrogate: SurrogateSettings::default(),
            acquisition: AcquisitionOptions::default(),
            selection: SelectionSettings::default(),
            output_dir: None,
        }
    }

    /// Reads a config; relative model paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model_a, &mut cfg.model_b, &mut cfg.base]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 < 3 {
            return Err(Error::Config(format!(
                "n0 = {} leaves no room for the three heuristic points",
                self.n0
            )));
        }
        if self.q == 0 {
            return Err(Error::Config("batch size q must be at least 1".into()));
        }
        if self.model_a.is_some() != self.model_b.is_some() {
            return Err(Error::Config(
                "model_a and model_b must be given together".into(),
            ));
        }
        if self.selection.top_k == 0 || self.selection.divisions == 0 {
            return Err(Error::Config(
                "selection top_k and divisions must be at least 1".into(),
            ));
        }
        self.partition.partition_config().validate()
    }

    fn digest(&self, context_digest: &str) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("serializable"));
        h.update(context_digest.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Evaluation context plus the partition it was built on.
pub struct Prepared {
    pub context: EvaluationContext,
    pub partition: Option<PartitionReport>,
}

/// Difference profile and optimal block partition (boundary blocks
/// attached) for a set of expert models.
pub fn partition_models(
    models: &[TensorMap],
    base: Option<&TensorMap>,
    index: &LayerIndex,
    settings: &PartitionSettings,
) -> Result<(BlockPartition, PartitionReport)> {
    let mut profile = compute_layer_diffs(models, base, index, settings.norm_order)?;
    if settings.normalize_profile {
        profile = profile.normalized();
    }
    let cfg = settings.partition_config();
    let part = attach_boundary_blocks(&optimal_partition(&profile, &cfg)?, index);
    let report = PartitionReport::new(&profile, &cfg, &part);
    Ok((part, report))
}

/// Loads models, partitions layers and builds the evaluator for `config`.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (evaluator, default_specs): (Box<dyn Evaluator>, Vec<ObjectiveSpec>) = match &config
        .evaluator
    {
        EvaluatorConfig::Synthetic { a, b } => {
            let e = SyntheticConflictingEvaluator::new(a.clone(), b.clone())?;
            let specs = e.objective_specs();
            (Box::new(e), specs)
        }
        EvaluatorConfig::Command {
            command,
            timeout_secs,
        } => {
            if !(*timeout_secs > 0.0) {
                return Err(Error::Config("evaluator timeout must be positive".into()));
            }
            let timeout =
                ExternalCommandEvaluator::timeout_from_env(Duration::from_secs_f64(*timeout_secs));
            (
                Box::new(ExternalCommandEvaluator::new(command.clone(), timeout)?),
                Vec::new(),
            )
        }
    };
    let specs = if config.objectives.is_empty() {
        default_specs
    } else {
        config.objectives.clone()
    };

    let (merge, partition, model_dim) = match (&config.model_a, &config.model_b) {
        (Some(pa), Some(pb)) => {
            let a = load_tensor_map(pa)?;
            let b = load_tensor_map(pb)?;
            a.check_compatible(&b)?;
            let base = config.base.as_ref().map(load_tensor_map).transpose()?;
            if let Some(base) = &base {
                a.check_compatible(base)?;
            }
            let index = infer_layer_index(&a, &config.layer_pattern)?;
            let models = vec![a, b];
            let (part, report) =
                partition_models(&models, base.as_ref(), &index, &config.partition)?;
            let dim = part.num_decision_blocks();
            let inputs = MergeInputs {
                models,
                base,
                partition: part,
                index,
                mode: config.weight_mode,
            };
            (Some(inputs), Some(report), Some(dim))
        }
        _ => (None, None, None),
    };
    let evaluator_dim = match &config.evaluator {
        EvaluatorConfig::Synthetic { a, .. } => Some(a.len()),
        EvaluatorConfig::Command { .. } => None,
    };
    let mut dim = None;
    for d in [model_dim, config.dimension, evaluator_dim]
        .into_iter()
        .flatten()
    {
        match dim {
            Some(prev) if prev != d => {
                return Err(Error::Config(format!(
                    "conflicting search dimensions {prev} and {d}"
                )));
            }
            _ => dim = Some(d),
        }
    }
    let dim = dim.ok_or_else(|| {
        Error::Config("search dimension is undetermined: give models or `dimension`".into())
    })?;
    if dim == 0 {
        return Err(Error::Config("search dimension must be positive".into()));
    }
    if merge.is_none() && matches!(config.evaluator, EvaluatorConfig::Command { .. }) {
        return Err(Error::Config(
            "the command evaluator needs model_a and model_b".into(),
        ));
    }
    let context = EvaluationContext::new(merge, dim, specs, evaluator)?;
    Ok(Prepared { context, partition })
}

/// Initial design: all-0, all-1, all-0.5, then scrambled Sobol points.
pub fn warm_start(n0: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n0 < 3 {
        return Err(Error::Config(format!(
            "n0 = {n0} leaves no room for the three heuristic points"
        )));
    }
    let mut rows = vec![vec![0.0; dim], vec![1.0; dim], vec![0.5; dim]];
    let mut extra = 0;
    while rows.len() < n0 {
        let need = n0 - rows.len() + extra;
        let candidates = sobol(need, dim, seed)?;
        for c in candidates.into_iter().skip(extra) {
            extra += 1;
            if !rows.contains(&c) {
                rows.push(c);
            }
            if rows.len() == n0 {
                break;
            }
        }
    }
    Ok(rows)
}

/// Simplex lattice with `divisions` steps per axis, in lexicographic order.
pub fn das_dennis(num_objectives: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, h: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.iter().map(|&v| v as f64 / h as f64).collect());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(left - v, slots - 1, h, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if num_objectives == 0 || divisions == 0 {
        return out;
    }
    rec(
        divisions,
        num_objectives,
        divisions,
        &mut Vec::new(),
        &mut out,
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceChoice {
    pub preference: Vec<f64>,
    /// Archive index of the chosen front member.
    pub index: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub by_preference: Vec<PreferenceChoice>,
    /// Archive index of the best front member for each objective.
    pub per_objective_best: Vec<usize>,
}

fn rescale(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = points[0].len();
    let bounds: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p[j]), hi.max(p[j]))
                })
        })
        .collect();
    points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&bounds)
                .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
                .collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Picks front members for each preference vector: the `top_k` members most
/// aligned with the preference (cosine on min-max rescaled objectives), then
/// the one with the largest rescaled sum among them.
pub fn select_solutions(
    front: &ParetoFront,
    prefs: &[Vec<f64>],
    top_k: usize,
) -> Result<Selection> {
    if front.is_empty() {
        return Err(Error::EmptyFront);
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let k = front.points[0].len();
    for w in prefs {
        if w.len() != k {
            return Err(Error::Arity(format!(
                "preference of length {} for {k} objectives",
                w.len()
            )));
        }
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain(format!(
                "preference {w:?} has negative entries"
            )));
        }
    }
    let scaled = rescale(&front.points);
    let sums: Vec<f64> = scaled.iter().map(|p| p.iter().sum()).collect();
    let by_preference = prefs
        .iter()
        .map(|w| {
            let cos: Vec<f64> = scaled.iter().map(|p| cosine(p, w)).collect();
            let mut order: Vec<usize> = (0..scaled.len()).collect();
            order.sort_by(|&i, &j| cos[j].total_cmp(&cos[i]).then(i.cmp(&j)));
            let chosen = order
                .into_iter()
                .take(top_k)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if sums[b] >= sums[i] => Some(b),
                    _ => Some(i),
                })
                .expect("non-empty front");
            PreferenceChoice {
                preference: w.clone(),
                index: front.indices[chosen],
                cosine: cos[chosen],
            }
        })
        .collect();
    let per_objective_best = (0..k)
        .map(|j| {
            let best = (0..front.len())
                .max_by(|&a, &b| {
                    front.points[a][j]
                        .total_cmp(&front.points[b][j])
                        .then(front.indices[b].cmp(&front.indices[a]))
                })
                .expect("non-empty front");
            front.indices[best]
        })
        .collect();
    Ok(Selection {
        by_preference,
        per_objective_best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub objectives: Vec<f64>,
    pub raw: RawScores,
    /// 0 for the warm start, `t` for the batch chosen in iteration `t`.
    pub iteration: usize,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Surrogates used to choose this iteration's batch (empty for the warm start).
    pub gp: Vec<GpHyperparams>,
    /// Reference point over the archive after this iteration.
    pub reference: Vec<f64>,
    pub hypervolume: f64,
    pub pareto_indices: Vec<usize>,
    pub acquisition_score: Option<f64>,
    pub best_probe_score: Option<f64>,
    pub seed: u64,
    pub fit_secs: f64,
    pub acquisition_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema_version: u32,
    pub config_digest: String,
    pub config: RunConfig,
    pub partition: Option<PartitionReport>,
    pub dimension: usize,
    pub objective_names: Vec<String>,
    pub observations: Vec<Observation>,
    pub iterations: Vec<IterationRecord>,
    pub seed_chain: Vec<u64>,
    pub finished: bool,
    pub updated_unix_secs: f64,
}

fn next_seed(seed: u64, iteration: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((iteration as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn unix_now() -> f64 {
    #[cfg(target_arch = "wasm32")]
    {
        0.0
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64())
    }
}

impl RunState {
    /// Number of completed BO iterations.
    pub fn completed_iterations(&self) -> usize {
        self.iterations.len().saturating_sub(1)
    }

    pub fn objective_matrix(&self) -> Vec<Vec<f64>> {
        self.observations
            .iter()
            .map(|o| o.objectives.clone())
            .collect()
    }

    pub fn front(&self) -> ParetoFront {
        pareto_filter(&self.objective_matrix())
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunState {
        let mut s = self.clone();
        s.updated_unix_secs = 0.0;
        for o in &mut s.observations {
            o.elapsed_secs = 0.0;
        }
        for r in &mut s.iterations {
            r.fit_secs = 0.0;
            r.acquisition_secs = 0.0;
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: RunState = serde_json::from_str(&text)?;
        if state.schema_version != STATE_SCHEMA_VERSION {
            return Err(Error::Resume(format!(
                "state schema version {} is not supported (expected {STATE_SCHEMA_VERSION})",
                state.schema_version
            )));
        }
        Ok(state)
    }

    /// Writes to a temporary sibling and renames over `path`.
    pub fn save_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Hypervolume after each iteration against the final reference point.
    pub fn hv_trace(&self) -> Result<Vec<HvTraceRow>> {
        let all = self.objective_matrix();
        if all.is_empty() {
            return Ok(Vec::new());
        }
        let fixed = reference_point(&all)?;
        self.iterations
            .iter()
            .map(|rec| {
                let upto: Vec<Vec<f64>> = self
                    .observations
                    .iter()
                    .filter(|o| o.iteration <= rec.iteration)
                    .map(|o| o.objectives.clone())
                    .collect();
                let front = pareto_filter(&upto);
                Ok(HvTraceRow {
                    iteration: rec.iteration,
                    hypervolume: hypervolume(&front.points, &fixed)?,
                    dynamic_hypervolume: rec.hypervolume,
                    front_size: front.len(),
                    evaluations: upto.len(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvTraceRow {
    pub iteration: usize,
    /// Against the final reference point.
    pub hypervolume: f64,
    /// Against that iteration's own reference point.
    pub dynamic_hypervolume: f64,
    pub front_size: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Return after this many completed iterations, leaving the run resumable.
    pub stop_after: Option<usize>,
    /// Where to persist state; `None` keeps the run in memory.
    pub state_path: Option<PathBuf>,
    /// Write front/selection/trace/partition files here when finished.
    pub output_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn for_config(config: &RunConfig) -> Self {
        Self {
            stop_after: None,
            state_path: config.output_dir.as_ref().map(|d| d.join(STATE_FILE)),
            output_dir: config.output_dir.clone(),
        }
    }
}

/// Runs a fresh optimization described by `config`.
pub fn run(config: &RunConfig) -> Result<RunState> {
    run_with(config, &RunOptions::for_config(config))
}

pub fn run_with(config: &RunConfig, opts: &RunOptions) -> Result<RunState> {
    let prepared = prepare(config)?;
    run_prepared(config, prepared, None, opts)
}

/// Continues a run from its state file. Outputs go next to the state file.
pub fn resume(state_path: impl AsRef<Path>, stop_after: Option<usize>) -> Result<RunState> {
    let state_path = state_path.as_ref();
    let state = RunState::load(state_path)?;
    let config = state.config.clone();
    let prepared = prepare(&config)?;
    let opts = RunOptions {
        stop_after,
        state_path: Some(state_path.to_path_buf()),
        output_dir: state_path.parent().map(Path::to_path_buf),
    };
    run_prepared(&config, prepared, Some(state), &opts)
}

/// Runs or continues the loop on an already built context.
pub fn run_prepared(
    config: &RunConfig,
    prepared: Prepared,
    state: Option<RunState>,
    opts: &RunOptions,
) -> Result<RunState> {
    let ctx = &prepared.context;
    let digest = config.digest(ctx.digest());
    let persist = |s: &mut RunState| -> Result<()> {
        s.updated_unix_secs = unix_now();
        if let Some(p) = &opts.state_path {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            s.save_atomic(p)?;
        }
        Ok(())
    };

    let mut state = match state {
        Some(s) => {
            if s.config_digest != digest {
                return Err(Error::Resume(
                    "configuration or inputs changed since the state was written".into(),
                ));
            }
            s
        }
        None => {
            let mut s = RunState {
                schema_version: STATE_SCHEMA_VERSION,
                config_digest: digest,
                config: config.clone(),
                partition: prepared.partition.clone(),
                dimension: ctx.dimension,
                objective_names: ctx.specs.iter().map(|s| s.name.clone()).collect(),
                observations: Vec::new(),
                iterations: Vec::new(),
                seed_chain: vec![config.seed],
                finished: false,
                updated_unix_secs: 0.0,
            };
            let xs = warm_start(config.n0, ctx.dimension, config.seed)?;
            append_batch(ctx, &mut s, &xs, 0, config.concurrency)?;
            let rec = summarize(&s, 0, Vec::new(), None, config.seed, 0.0, 0.0)?;
            s.iterations.push(rec);
            persist(&mut s)?;
            s
        }
    };

    while state.completed_iterations() < config.t {
        if opts
            .stop_after
            .is_some_and(|n| state.completed_iterations() >= n)
        {
            return Ok(state);
        }
        let t = state.completed_iterations() + 1;
        let seed = next_seed(*state.seed_chain.last().expect("seeded"), t);

        let watch = Stopwatch::start();
        let xs: Vec<Vec<f64>> = state.observations.iter().map(|o| o.x.clone()).collect();
        let ys = state.objective_matrix();
        let gp_opts = |k: usize| GpFitOptions {
            restarts: config.surrogate.restarts,
            max_iterations: config.surrogate.max_iterations,
            seed: seed.wrapping_add(k as u64),
        };
        let models = (0..ctx.num_objectives())
            .map(|k| {
                let y: Vec<f64> = ys.iter().map(|v| v[k]).collect();
                fit_gp_with(&xs, &y, &gp_opts(k))
            })
            .collect::<Result<Vec<_>>>()?;
        let fit_secs = watch.elapsed_secs();

        let watch = Stopwatch::start();
        let front = pareto_filter(&ys);
        let inputs: Vec<Vec<f64>> = front.indices.iter().map(|&i| xs[i].clone()).collect();
        let reference = reference_point(&ys)?;
        let acq = optimize_acquisition(
            &models,
            &front,
            &inputs,
            &reference,
            config.q,
            &config.acquisition,
            seed,
        )?;
        let acquisition_secs = watch.elapsed_secs();

        append_batch(ctx, &mut state, &acq.batch, t, config.concurrency)?;
        let rec = summarize(
            &state,
            t,
            models.into_iter().map(|m| m.hyper).collect(),
            Some((acq.score, acq.best_probe_score)),
            seed,
            fit_secs,
            acquisition_secs,
        )?;
        log::info!(
            "iteration {t}/{}: {} evaluations, front {}, hypervolume {:.6} (fit {fit_secs:.1}s, acquisition {acquisition_secs:.1}s)",
            config.t,
            state.observations.len(),
            rec.pareto_indices.len(),
            rec.hypervolume,
        );
        state.iterations.push(rec);
        state.seed_chain.push(seed);
        persist(&mut state)?;
    }

    state.finished = true;
    persist(&mut state)?;
    if let Some(dir) = &opts.output_dir {
        write_outputs(&state, dir)?;
    }
    Ok(state)
}

fn append_batch(
    ctx: &EvaluationContext,
    state: &mut RunState,
    xs: &[Vec<f64>],
    iteration: usize,
    concurrency: usize,
) -> Result<()> {
    // all-or-nothing so a failed batch leaves the archive untouched
    let evals = ctx
        .evaluate_batch(xs, concurrency)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for (x, e) in xs.iter().zip(evals) {
        state.observations.push(Observation {
            x: x.clone(),
            objectives: e.objectives.0,
            raw: e.raw,
            iteration,
            elapsed_secs: e.elapsed_secs,
        });
    }
    Ok(())
}

fn summarize(
    state: &RunState,
    iteration: usize,
    gp: Vec<GpHyperparams>,
    acq: Option<(f64, f64)>,
    seed: u64,
    fit_secs: f64,
    acquisition_secs: f64,
) -> Result<IterationRecord> {
    let ys = state.objective_matrix();
    let front = pareto_filter(&ys);
    let reference = reference_point(&ys)?;
    Ok(IterationRecord {
        iteration,
        gp,
        hypervolume: hypervolume(&front.points, &reference)?,
        reference,
        pareto_indices: front.indices,
        acquisition_score: acq.map(|a| a.0),
        best_probe_score: acq.map(|a| a.1),
        seed,
        fit_secs,
        acquisition_secs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontMember {
    pub index: usize,
    pub iteration: usize,
    pub x: Vec<f64>,
    pub objectives: Vec<f64>,
    pub raw: RawScores,
}

/// The `front.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontReport {
    pub objective_names: Vec<String>,
    pub reference: Vec<f64>,
    pub hypervolume: f64,
    pub members: Vec<FrontMember>,
}

impl FrontReport {
    pub fn from_state(state: &RunState) -> Result<Self> {
        let ys = state.objective_matrix();
        let front = pareto_filter(&ys);
        let reference = reference_point(&ys)?;
        Ok(Self {
            objective_names: state.objective_names.clone(),
            hypervolume: hypervolume(&front.points, &reference)?,
            reference,
            members: front
                .indices
                .iter()
                .map(|&i| {
                    let o = &state.observations[i];
                    FrontMember {
                        index: i,
                        iteration: o.iteration,
                        x: o.x.clone(),
                        objectives: o.objectives.clone(),
                        raw: o.raw.clone(),
                    }
                })
                .collect(),
        })
    }

    pub fn front(&self) -> ParetoFront {
        ParetoFront {
            points: self.members.iter().map(|m| m.objectives.clone()).collect(),
            indices: self.members.iter().map(|m| m.index).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The `selection.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub divisions: usize,
    pub top_k: usize,
    pub objective_names: Vec<String>,
    pub by_preference: Vec<SelectedMember>,
    pub per_objective_best: Vec<SelectedMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMember {
    /// Preference vector, or the objective name for per-objective picks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<String>,
    pub index: usize,
    pub x: Vec<f64>,
    pub objectives: Vec<f64>,
}

impl SelectionReport {
    pub fn new(front: &FrontReport, divisions: usize, top_k: usize) -> Result<Self> {
        let k = front
            .objective_names
            .len()
            .max(front.members.first().map_or(0, |m| m.objectives.len()));
        let prefs = das_dennis(k, divisions);
        let sel = select_solutions(&front.front(), &prefs, top_k)?;
        let member = |idx: usize| {
            front
                .members
                .iter()
                .find(|m| m.index == idx)
                .expect("front member")
        };
        Ok(Self {
            divisions,
            top_k,
            objective_names: front.objective_names.clone(),
            by_preference: sel
                .by_preference
                .iter()
                .map(|c| {
                    let m = member(c.index);
                    SelectedMember {
                        preference: Some(c.preference.clone()),
                        objective: None,
                        index: m.index,
                        x: m.x.clone(),
                        objectives: m.objectives.clone(),
                    }
                })
                .collect(),
            per_objective_best: sel
                .per_objective_best
                .iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let m = member(idx);
                    SelectedMember {
                        preference: None,
                        objective: Some(
                            front
                                .objective_names
                                .get(j)
                                .cloned()
                                .unwrap_or_else(|| format!("f{}", j + 1)),
                        ),
                        index: m.index,
                        x: m.x.clone(),
                        objectives: m.objectives.clone(),
                    }
                })
                .collect(),
        })
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn hv_trace_csv(state: &RunState) -> Result<String> {
    let mut out =
        String::from("iteration,hypervolume,dynamic_hypervolume,front_size,evaluations\n");
    for r in state.hv_trace()? {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.hypervolume, r.dynamic_hypervolume, r.front_size, r.evaluations
        ));
    }
    Ok(out)
}

/// Layer differences with the block each layer belongs to.
pub fn layer_diff_csv(report: &PartitionReport) -> String {
    let mut out = String::from("layer,diff,block,block_start\n");
    for (b, [s, e]) in report.blocks.iter().enumerate() {
        for l in *s..=*e {
            out.push_str(&format!("{l},{},{b},{}\n", report.d[l], u8::from(l == *s)));
        }
    }
    out
}

/// Every observation's objectives, flagged when on the final front.
pub fn front_scatter_csv(state: &RunState) -> String {
    let front = state.front();
    let mut out = String::from("index,iteration,on_front");
    for name in &state.objective_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, o) in state.observations.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{}",
            o.iteration,
            u8::from(front.indices.contains(&i))
        ));
        for v in &o.objectives {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Writes `front.json`, `selection.json`, `hv_trace.csv` and, when the run
/// partitioned real models, `partition.json`.
pub fn write_outputs(state: &RunState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let front = FrontReport::from_state(state)?;
    write_json(&front, &dir.join("front.json"))?;
    let sel = &state.config.selection;
    write_json(
        &SelectionReport::new(&front, sel.divisions, sel.top_k)?,
        &dir.join("selection.json"),
    )?;
    let trace = dir.join("hv_trace.csv");
    fs::write(&trace, hv_trace_csv(state)?).map_err(|e| Error::io(&trace, e))?;
    if let Some(p) = &state.partition {
        write_json(p, &dir.join("partition.json"))?;
    }
    Ok(())
}

/// Report files derived from a state: the trace, the layer-difference
/// profile with block boundaries, and the objective scatter.
pub fn write_report(state: &RunState, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("hv_trace.csv", hv_trace_csv(state)?)?;
    if let Some(p) = &state.partition {
        put("layer_diffs.csv", layer_diff_csv(p))?;
    }
    put("front_scatter.csv", front_scatter_csv(state))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn das_dennis_examples() {
        assert_eq!(
            das_dennis(2, 2),
            vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]
        );
        assert_eq!(das_dennis(2, 4).len(), 5);
        let v = das_dennis(3, 3);
        assert_eq!(v.len(), 10);
        assert!(v
            .iter()
            .all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        for k in 2..=4 {
            for h in 1..=6 {
                assert_eq!(das_dennis(k, h).len(), binom(h + k - 1, k - 1));
            }
        }
    }

    #[test]
    fn warm_start_rows() {
        let w = warm_start(8, 8, 0).unwrap();
        assert_eq!(w.len(), 8);
        assert_eq!(w[0], vec![0.0; 8]);
        assert_eq!(w[1], vec![1.0; 8]);
        assert_eq!(w[2], vec![0.5; 8]);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(w[i], w[j]);
            }
        }
        assert_eq!(warm_start(3, 4, 1).unwrap().len(), 3);
        assert_eq!(warm_start(8, 8, 5).unwrap(), warm_start(8, 8, 5).unwrap());
        assert!(matches!(warm_start(2, 4, 0), Err(Error::Config(_))));
    }

    fn front(points: Vec<Vec<f64>>) -> ParetoFront {
        pareto_filter(&points)
    }

    #[test]
    fn selection_examples() {
        let f = front(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = select_solutions(&f, &[vec![1.0, 0.0]], 1).unwrap();
        assert_eq!(
            f.points[f
                .indices
                .iter()
                .position(|&i| i == s.by_preference[0].index)
                .unwrap()],
            vec![1.0, 0.0]
        );

        let pts = vec![vec![1.0, 0.0], vec![0.6, 0.6], vec![0.0, 1.0]];
        let f = front(pts.clone());
        let s = select_solutions(&f, &[vec![0.707, 0.707]], 1).unwrap();
        assert_eq!(s.by_preference[0].index, 1);
        assert_eq!(s.per_objective_best, vec![0, 2]);

        // a preference parallel to one member's rescaled vector picks it
        let pts = vec![vec![3.0, 0.0], vec![2.0, 2.0], vec![0.0, 3.0]];
        let f = front(pts);
        let s = select_solutions(&f, &[vec![2.0 / 3.0, 2.0 / 3.0]], 1).unwrap();
        assert_eq!(s.by_preference[0].index, 1);
        assert!((s.by_preference[0].cosine - 1.0).abs() < 1e-12);

        assert!(matches!(
            select_solutions(&ParetoFront::default(), &[], 1),
            Err(Error::EmptyFront)
        ));
    }

    #[test]
    fn selection_is_affine_invariant() {
        let pts = vec![
            vec![0.9, 0.1, 0.3],
            vec![0.5, 0.5, 0.2],
            vec![0.1, 0.8, 0.6],
            vec![0.4, 0.2, 0.9],
        ];
        let f = front(pts.clone());
        let prefs = das_dennis(3, 3);
        let s1 = select_solutions(&f, &prefs, 2).unwrap();
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![3.0 * p[0] - 1.0, 0.2 * p[1] + 7.0, 10.0 * p[2]])
            .collect();
        let s2 = select_solutions(&front(moved), &prefs, 2).unwrap();
        let idx = |s: &Selection| s.by_preference.iter().map(|c| c.index).collect::<Vec<_>>();
        assert_eq!(idx(&s1), idx(&s2));
        assert_eq!(s1.per_objective_best, s2.per_objective_best);
    }

    fn small_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::synthetic(vec![0.2, 0.7, 0.4], vec![0.8, 0.1, 0.5], seed);
        cfg.n0 = 5;
        cfg.t = 3;
        cfg.q = 2;
        cfg.surrogate.restarts = 2;
        cfg.acquisition.raw_batches = 64;
        cfg
    }

    #[test]
    fn zero_iterations_evaluate_only_the_warm_start() {
        let mut cfg = small_config(0);
        cfg.t = 0;
        let s = run(&cfg).unwrap();
        assert_eq!(s.observations.len(), 5);
        assert_eq!(s.iterations.len(), 1);
        assert!(s.finished);
    }

    #[test]
    fn budget_trace_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(4);
        cfg.output_dir = Some(dir.path().to_path_buf());
        let full = run(&cfg).unwrap();
        assert_eq!(full.observations.len(), 5 + 3 * 2);
        for r in &full.iterations[1..] {
            assert!(r.acquisition_score.unwrap() >= r.best_probe_score.unwrap());
        }
        let trace = full.hv_trace().unwrap();
        assert_eq!(trace.len(), 4);
        assert!(trace
            .windows(2)
            .all(|w| w[1].hypervolume >= w[0].hypervolume));
        for f in ["state.json", "front.json", "selection.json", "hv_trace.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }

        let dir2 = tempfile::tempdir().unwrap();
        let state_path = dir2.path().join(STATE_FILE);
        let partial = run_with(
            &cfg,
            &RunOptions {
                stop_after: Some(1),
                state_path: Some(state_path.clone()),
                output_dir: None,
            },
        )
        .unwrap();
        assert_eq!(partial.completed_iterations(), 1);
        assert!(!partial.finished);
        let resumed = resume(&state_path, None).unwrap();
        assert_eq!(
            resumed.without_timing().observations,
            full.without_timing().observations
        );
        assert_eq!(
            serde_json::to_string(&resumed.without_timing()).unwrap(),
            serde_json::to_string(&full.without_timing()).unwrap()
        );
    }

    #[test]
    fn resume_rejects_changed_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(STATE_FILE);
        let cfg = small_config(1);
        run_with(
            &cfg,
            &RunOptions {
                stop_after: Some(0),
                state_path: Some(path.clone()),
                output_dir: None,
            },
        )
        .unwrap();
        let mut state = RunState::load(&path).unwrap();
        state.config.q = 3;
        state.save_atomic(&path).unwrap();
        assert!(matches!(resume(&path, None), Err(Error::Resume(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(0);
        cfg.n0 = 2;
        assert!(matches!(prepare(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(0);
        cfg.dimension = Some(5);
        assert!(matches!(prepare(&cfg), Err(Error::Config(_))));
        let json = r#"{"evaluator": {"type": "synthetic", "a": [0.1, 0.2], "b": [0.9, 0.8]}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!((cfg.n0, cfg.t, cfg.q, cfg.partition.k), (8, 20, 4, 6));
        assert_eq!(cfg.selection.top_k, 3);
    }
}

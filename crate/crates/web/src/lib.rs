//! Browser bindings for the demo page in `www/`.
//!
//! Every entry point takes and returns JSON strings. The `*_json` functions
//! hold the logic and are plain Rust so they can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use paretomerge::driver::{
    das_dennis, run_with, select_solutions, RunConfig, RunOptions, Selection,
};
use paretomerge::mobo::{pareto_filter, AcquisitionOptions};
use paretomerge::objectives::SyntheticConflictingEvaluator;
use paretomerge::partition::{
    optimal_partition, segment_cost, DiffProfile, NormOrder, PartitionConfig, PartitionReport,
};

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn default_lambda() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

#[derive(Deserialize)]
pub struct PartitionInput {
    pub d: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_one")]
    pub variance_weight: f64,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Serialize)]
pub struct PartitionOutput {
    pub report: PartitionReport,
    pub block_costs: Vec<f64>,
}

/// Optimal blocks for a hand-drawn difference profile.
pub fn partition_json(input: &str) -> Result<String, String> {
    let req: PartitionInput = parse(input)?;
    let mut profile = DiffProfile::new(req.d, NormOrder::L2).map_err(|e| e.to_string())?;
    if req.normalize {
        profile = profile.normalized();
    }
    let cfg = PartitionConfig {
        k: req.k,
        lambda: req.lambda,
        variance_weight: req.variance_weight,
        ..PartitionConfig::default()
    };
    let partition = optimal_partition(&profile, &cfg).map_err(|e| e.to_string())?;
    let block_costs = partition
        .blocks
        .iter()
        .map(|&(i, j)| segment_cost(&profile, i, j, &cfg))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    emit(&PartitionOutput {
        report: PartitionReport::new(&profile, &cfg, &partition),
        block_costs,
    })
}

#[derive(Deserialize)]
pub struct OptimizeInput {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub seed: u64,
    /// Raw Sobol batches scored before local ascent.
    #[serde(default = "default_raw_batches")]
    pub raw_batches: usize,
}

fn default_n0() -> usize {
    6
}
fn default_t() -> usize {
    8
}
fn default_q() -> usize {
    2
}
fn default_raw_batches() -> usize {
    128
}

#[derive(Serialize)]
pub struct Point {
    pub x: Vec<f64>,
    pub objectives: Vec<f64>,
    pub iteration: usize,
}

#[derive(Serialize)]
pub struct OptimizeOutput {
    pub points: Vec<Point>,
    pub pareto_indices: Vec<usize>,
    /// Fixed-reference hypervolume after the warm start and each iteration.
    pub hypervolume: Vec<f64>,
    /// Objective values along the true trade-off segment, for plotting.
    pub true_front: Vec<[f64; 2]>,
}

/// A small search on the synthetic two-objective problem, run in the page.
pub fn optimize_json(input: &str) -> Result<String, String> {
    let req: OptimizeInput = parse(input)?;
    let eval = SyntheticConflictingEvaluator::new(req.a.clone(), req.b.clone())
        .map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::synthetic(req.a, req.b, req.seed);
    cfg.n0 = req.n0;
    cfg.t = req.t;
    cfg.q = req.q;
    // Budgets sized for a single-threaded page.
    cfg.surrogate.restarts = 2;
    cfg.surrogate.max_iterations = 60;
    cfg.acquisition = AcquisitionOptions {
        raw_batches: req.raw_batches,
        max_iterations: 8,
        mc_samples: 64,
        ..AcquisitionOptions::default()
    };
    let state = run_with(&cfg, &RunOptions::default()).map_err(|e| e.to_string())?;
    let trace = state.hv_trace().map_err(|e| e.to_string())?;
    let front = state.front();
    let true_front = (0..=50)
        .map(|i| eval.scores(&eval.pareto_point(i as f64 / 50.0)))
        .collect();
    emit(&OptimizeOutput {
        points: state
            .observations
            .iter()
            .map(|o| Point {
                x: o.x.clone(),
                objectives: o.objectives.clone(),
                iteration: o.iteration,
            })
            .collect(),
        pareto_indices: front.indices,
        hypervolume: trace.iter().map(|r| r.hypervolume).collect(),
        true_front,
    })
}

#[derive(Deserialize)]
pub struct SelectInput {
    /// Objective vectors, maximized; dominated rows are dropped.
    pub points: Vec<Vec<f64>>,
    #[serde(default = "default_divisions")]
    pub divisions: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_divisions() -> usize {
    4
}
fn default_top_k() -> usize {
    3
}

#[derive(Serialize)]
pub struct SelectOutput {
    pub front_indices: Vec<usize>,
    pub selection: Selection,
}

/// Preference-driven picks from a set of objective vectors.
pub fn select_json(input: &str) -> Result<String, String> {
    let req: SelectInput = parse(input)?;
    if req.points.is_empty() {
        return Err("no points".into());
    }
    let front = pareto_filter(&req.points);
    let prefs = das_dennis(req.points[0].len(), req.divisions);
    let selection = select_solutions(&front, &prefs, req.top_k).map_err(|e| e.to_string())?;
    emit(&SelectOutput {
        front_indices: front.indices,
        selection,
    })
}

#[wasm_bindgen]
pub fn partition(input: &str) -> Result<String, JsError> {
    partition_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn optimize(input: &str) -> Result<String, JsError> {
    optimize_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn select(input: &str) -> Result<String, JsError> {
    select_json(input).map_err(|e| JsError::new(&e))
}

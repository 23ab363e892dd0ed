//! Black-box evaluation of merge configurations.
//!
//! Each capability is scored on its own benchmark set and normalized against
//! an expert model (term = 1) and a base model (term = 0); the objective is
//! the sum of those terms. Objectives are maximized throughout the crate.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::merge::{block_wise_merge, decision_vector_to_weights, WeightMode};
use crate::partition::BlockPartition;
use crate::tensor_store::{save_tensor_map, LayerIndex, TensorMap};

/// Environment variable overriding the external evaluator timeout (seconds).
pub const TIMEOUT_ENV: &str = "PARETOMERGE_EVAL_TIMEOUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    MaximizeScore,
    MinimizeScore,
}

/// One capability: its benchmarks and the expert/base anchor scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: String,
    #[serde(default)]
    pub direction: Direction,
    pub benchmarks: Vec<String>,
    pub expert_scores: BTreeMap<String, f64>,
    pub base_scores: BTreeMap<String, f64>,
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.benchmarks.is_empty() {
            return Err(Error::Config(format!(
                "objective {} has no benchmarks",
                self.name
            )));
        }
        for b in &self.benchmarks {
            let expert = self.expert_scores.get(b).ok_or_else(|| {
                Error::Config(format!("objective {}: no expert score for {b}", self.name))
            })?;
            let base = self.base_scores.get(b).ok_or_else(|| {
                Error::Config(format!("objective {}: no base score for {b}", self.name))
            })?;
            if expert == base {
                return Err(Error::DegenerateSpec {
                    objective: self.name.clone(),
                    benchmark: b.clone(),
                });
            }
            match self.direction {
                Direction::MaximizeScore if expert < base => {
                    log::warn!(
                        "objective {}: expert scores below base on maximized benchmark {b}",
                        self.name
                    )
                }
                Direction::MinimizeScore if expert > base => {
                    log::warn!(
                        "objective {}: expert scores above base on minimized benchmark {b}",
                        self.name
                    )
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Benchmark id → score of one merged model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawScores(pub BTreeMap<String, f64>);

impl RawScores {
    pub fn get(&self, benchmark: &str) -> Option<f64> {
        self.0.get(benchmark).copied()
    }

    pub fn insert(&mut self, benchmark: impl Into<String>, score: f64) {
        self.0.insert(benchmark.into(), score);
    }

    fn check_finite(&self) -> Result<()> {
        match self.0.iter().find(|(_, v)| !v.is_finite()) {
            Some((b, v)) => Err(Error::InvalidScore {
                benchmark: b.clone(),
                value: *v,
            }),
            None => Ok(()),
        }
    }
}

impl<K: Into<String>> FromIterator<(K, f64)> for RawScores {
    fn from_iter<I: IntoIterator<Item = (K, f64)>>(iter: I) -> Self {
        RawScores(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

/// Normalized objective values, one per capability, larger is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveVector(pub Vec<f64>);

/// Sum over benchmarks of `(s_merge − s_base) / (s_expert − s_base)`.
///
/// Minimized metrics use the same formula: the expert's lower score makes the
/// denominator negative, so lower merged scores still raise the objective.
pub fn normalize_objective(spec: &ObjectiveSpec, raw: &RawScores) -> Result<f64> {
    let mut total = 0.0;
    for b in &spec.benchmarks {
        let s = raw.get(b).ok_or_else(|| Error::MissingScore(b.clone()))?;
        let expert = *spec.expert_scores.get(b).ok_or_else(|| {
            Error::Config(format!("objective {}: no expert score for {b}", spec.name))
        })?;
        let base = *spec.base_scores.get(b).ok_or_else(|| {
            Error::Config(format!("objective {}: no base score for {b}", spec.name))
        })?;
        if expert == base {
            return Err(Error::DegenerateSpec {
                objective: spec.name.clone(),
                benchmark: b.clone(),
            });
        }
        total += (s - base) / (expert - base);
    }
    Ok(total)
}

/// What an evaluator is asked to score.
pub struct EvalRequest<'a> {
    pub x: &'a [f64],
    /// The merged model, present when the evaluator asks for one and the
    /// context holds merge inputs.
    pub model: Option<&'a TensorMap>,
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<RawScores>;

    /// Whether the merged model must be materialized before calling `evaluate`.
    fn needs_model(&self) -> bool {
        true
    }

    /// Stable description used in cache and run-state digests.
    fn describe(&self) -> String;
}

/// Adapts a closure into an [`Evaluator`].
pub struct FnEvaluator<F> {
    f: F,
    label: String,
    needs_model: bool,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&EvalRequest<'_>) -> Result<RawScores> + Send + Sync,
{
    pub fn new(label: impl Into<String>, needs_model: bool, f: F) -> Self {
        Self {
            f,
            label: label.into(),
            needs_model,
        }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&EvalRequest<'_>) -> Result<RawScores> + Send + Sync,
{
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<RawScores> {
        (self.f)(request)
    }

    fn needs_model(&self) -> bool {
        self.needs_model
    }

    fn describe(&self) -> String {
        format!("fn:{}", self.label)
    }
}

/// Two competing quadratic scores with a known Pareto set.
///
/// `s1(x) = 1 − ‖x − a‖²/D` and `s2(x) = 1 − ‖x − b‖²/D`. The Pareto set is
/// exactly the segment between the anchors `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConflictingEvaluator {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub benchmarks: [String; 2],
}

impl SyntheticConflictingEvaluator {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Arity(
                "anchors must share a non-zero dimension".into(),
            ));
        }
        if a.iter().chain(&b).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("anchors must lie in [0, 1]".into()));
        }
        if a == b {
            return Err(Error::Degenerate(
                "anchors coincide, objectives do not conflict".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            benchmarks: ["s1".to_string(), "s2".to_string()],
        })
    }

    pub fn dimension(&self) -> usize {
        self.a.len()
    }

    pub fn scores(&self, x: &[f64]) -> [f64; 2] {
        let d = self.a.len() as f64;
        let sq = |anchor: &[f64]| {
            x.iter()
                .zip(anchor)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        };
        [1.0 - sq(&self.a) / d, 1.0 - sq(&self.b) / d]
    }

    /// Point of the analytic Pareto set at parameter `t ∈ [0, 1]`.
    pub fn pareto_point(&self, t: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect()
    }

    /// L∞ distance from `x` to the segment between the anchors.
    pub fn distance_to_pareto_set(&self, x: &[f64]) -> f64 {
        // the L∞ distance to a segment is convex in t: golden-section search
        let dist = |t: f64| {
            self.pareto_point(t)
                .iter()
                .zip(x)
                .map(|(p, v)| (p - v).abs())
                .fold(0.0, f64::max)
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..100 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if dist(m1) <= dist(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        dist(0.5 * (lo + hi)).min(dist(0.0)).min(dist(1.0))
    }

    /// Objective specs that pass the two scores through unchanged.
    pub fn objective_specs(&self) -> Vec<ObjectiveSpec> {
        self.benchmarks
            .iter()
            .map(|b| ObjectiveSpec {
                name: b.clone(),
                direction: Direction::MaximizeScore,
                benchmarks: vec![b.clone()],
                expert_scores: [(b.clone(), 1.0)].into(),
                base_scores: [(b.clone(), 0.0)].into(),
            })
            .collect()
    }
}

impl Evaluator for SyntheticConflictingEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<RawScores> {
        if request.x.len() != self.a.len() {
            return Err(Error::Arity(format!(
                "synthetic evaluator has dimension {}, got {}",
                self.a.len(),
                request.x.len()
            )));
        }
        let [s1, s2] = self.scores(request.x);
        Ok([
            (self.benchmarks[0].clone(), s1),
            (self.benchmarks[1].clone(), s2),
        ]
        .into_iter()
        .collect())
    }

    fn needs_model(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!(
            "synthetic:{}",
            serde_json::to_string(self).expect("serializable")
        )
    }
}

/// Runs a shell command per evaluation.
///
/// `{model}` in the template is replaced by the path of the merged container
/// file and `{output}` by the path where the command must write
/// `{"scores": {"benchmark": number, ...}}`.
#[derive(Debug, Clone)]
pub struct ExternalCommandEvaluator {
    pub command: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct ScoreFile {
    scores: BTreeMap<String, f64>,
}

static EVAL_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExternalCommandEvaluator {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Result<Self> {
        let command = command.into();
        if !command.contains("{model}") || !command.contains("{output}") {
            return Err(Error::Config(
                "evaluator command must contain {model} and {output} placeholders".into(),
            ));
        }
        Ok(Self { command, timeout })
    }

    /// Timeout from the environment override if set, else `default`.
    pub fn timeout_from_env(default: Duration) -> Duration {
        std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| *s > 0.0)
            .map(Duration::from_secs_f64)
            .unwrap_or(default)
    }

    fn scratch_dir() -> Result<PathBuf> {
        let n = EVAL_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("paretomerge-eval-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn run(&self, model: &TensorMap) -> Result<RawScores> {
        let dir = Self::scratch_dir()?;
        let model_path = dir.join("merged.btc");
        let output_path = dir.join("scores.json");
        save_tensor_map(model, &model_path)?;
        let cmd = self
            .command
            .replace("{model}", &model_path.to_string_lossy())
            .replace("{output}", &output_path.to_string_lossy());

        let log_path = dir.join("command.log");
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log_err = log.try_clone().map_err(|e| Error::io(&log_path, e))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .spawn()
            .map_err(|e| Error::Evaluation(format!("cannot spawn `{cmd}`: {e}")))?;

        let started = std::time::Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Timeout(self.timeout.as_secs_f64()));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Evaluation(format!("waiting on `{cmd}`: {e}"))),
            }
        };
        let captured = fs::read_to_string(&log_path).unwrap_or_default();
        if !status.success() {
            return Err(Error::Evaluation(format!(
                "`{cmd}` exited with {status}; output:\n{}",
                captured.trim_end()
            )));
        }
        let text = fs::read_to_string(&output_path).map_err(|e| {
            Error::Format(format!("no score file at {}: {e}", output_path.display()))
        })?;
        let parsed: ScoreFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("score file {}: {e}", output_path.display())))?;
        let _ = fs::remove_dir_all(&dir);
        Ok(RawScores(parsed.scores))
    }
}

impl Evaluator for ExternalCommandEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<RawScores> {
        let model = request.model.ok_or_else(|| {
            Error::Config("external evaluator needs merge inputs (model paths)".into())
        })?;
        self.run(model)
    }

    fn describe(&self) -> String {
        format!("command:{}", self.command)
    }
}

/// The expert models and block layout a decision vector is applied to.
#[derive(Debug, Clone)]
pub struct MergeInputs {
    pub models: Vec<TensorMap>,
    pub base: Option<TensorMap>,
    pub partition: BlockPartition,
    pub index: LayerIndex,
    pub mode: WeightMode,
}

impl MergeInputs {
    pub fn merged_model(&self, x: &[f64]) -> Result<TensorMap> {
        let mut weights = decision_vector_to_weights(x, self.partition.num_decision_blocks())?;
        weights.mode = self.mode;
        block_wise_merge(
            &self.models,
            self.base.as_ref(),
            &self.partition,
            &self.index,
            &weights,
        )
    }

    fn digest(&self, h: &mut Sha256) {
        for m in self.models.iter().chain(self.base.as_ref()) {
            for t in m {
                h.update(t.name.as_bytes());
                for v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.update(serde_json::to_vec(&self.partition).expect("serializable"));
        h.update(serde_json::to_vec(&self.mode).expect("serializable"));
    }
}

/// One scored decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objectives: ObjectiveVector,
    pub raw: RawScores,
    pub elapsed_secs: f64,
    pub cached: bool,
}

/// Everything needed to turn a decision vector into an objective vector.
pub struct EvaluationContext {
    pub merge: Option<MergeInputs>,
    pub dimension: usize,
    pub specs: Vec<ObjectiveSpec>,
    pub evaluator: Box<dyn Evaluator>,
    digest: String,
    cache: Mutex<HashMap<Vec<i64>, (ObjectiveVector, RawScores)>>,
}

impl EvaluationContext {
    pub fn new(
        merge: Option<MergeInputs>,
        dimension: usize,
        specs: Vec<ObjectiveSpec>,
        evaluator: Box<dyn Evaluator>,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("at least one objective is required".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        if let Some(m) = &merge {
            if m.partition.num_decision_blocks() != dimension {
                return Err(Error::Arity(format!(
                    "partition has {} blocks but the search dimension is {dimension}",
                    m.partition.num_decision_blocks()
                )));
            }
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&specs)?);
        h.update(evaluator.describe().as_bytes());
        h.update((dimension as u64).to_le_bytes());
        if let Some(m) = &merge {
            m.digest(&mut h);
        }
        Ok(Self {
            merge,
            dimension,
            specs,
            evaluator,
            digest: hex::encode(h.finalize()),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn num_objectives(&self) -> usize {
        self.specs.len()
    }

    fn cache_key(x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v * 1e9).round() as i64).collect()
    }

    pub fn objectives_from_raw(&self, raw: &RawScores) -> Result<ObjectiveVector> {
        raw.check_finite()?;
        let values = self
            .specs
            .iter()
            .map(|s| normalize_objective(s, raw))
            .collect::<Result<Vec<_>>>()?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidScore {
                benchmark: "<normalized>".into(),
                value: *v,
            });
        }
        Ok(ObjectiveVector(values))
    }

    /// Scores one decision vector, reusing a previous result for the same
    /// vector (rounded to 1e-9).
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        if x.len() != self.dimension {
            return Err(Error::Arity(format!(
                "decision vector has {} entries, expected {}",
                x.len(),
                self.dimension
            )));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("decision value {v} outside [0, 1]")));
        }
        let key = Self::cache_key(x);
        if let Some((objectives, raw)) = self.cache.lock().expect("cache lock").get(&key).cloned() {
            return Ok(Evaluation {
                objectives,
                raw,
                elapsed_secs: 0.0,
                cached: true,
            });
        }

        let watch = crate::clock::Stopwatch::start();
        let model = match &self.merge {
            Some(m) if self.evaluator.needs_model() => Some(m.merged_model(x)?),
            _ => None,
        };
        let raw = self.evaluator.evaluate(&EvalRequest {
            x,
            model: model.as_ref(),
        })?;
        let objectives = self.objectives_from_raw(&raw)?;
        let elapsed_secs = watch.elapsed_secs();
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, (objectives.clone(), raw.clone()));
        Ok(Evaluation {
            objectives,
            raw,
            elapsed_secs,
            cached: false,
        })
    }

    /// Scores a batch, running up to `concurrency` evaluations at once.
    /// Results come back in input order.
    pub fn evaluate_batch(&self, xs: &[Vec<f64>], concurrency: usize) -> Vec<Result<Evaluation>> {
        if concurrency <= 1 || xs.len() <= 1 {
            return xs.iter().map(|x| self.evaluate(x)).collect();
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(concurrency) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|x| s.spawn(move || self.evaluate(x)))
                    .collect();
                for h in handles {
                    out.push(
                        h.join().unwrap_or_else(|_| {
                            Err(Error::Evaluation("evaluator panicked".into()))
                        }),
                    );
                }
            });
        }
        out
    }
}

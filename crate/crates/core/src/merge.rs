//! Merging expert models: block-wise interpolation under per-block weights,
//! and the model-level baselines (task arithmetic, TIES, DARE, Breadcrumbs,
//! DELLA).
//!
//! All arithmetic runs in `f64` and is rounded to `f32` once per element.
//! Random drops come from a ChaCha stream keyed by `(seed, model, tensor)`, so
//! results do not depend on the order tensors are processed in.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::partition::BlockPartition;
use crate::tensor_store::{LayerIndex, Tensor, TensorMap};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Convex combination of the experts per block.
    #[default]
    Interpolation,
    /// `base + Σ_i w_i (M_i − base)` per block, weights in `[0, w_max]`.
    TaskArithmetic,
}

/// Per-model, per-block merge weights (`values[model][block]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub values: Vec<Vec<f64>>,
    pub mode: WeightMode,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
}

fn default_w_max() -> f64 {
    1.0
}

impl BlockWeights {
    pub fn new(values: Vec<Vec<f64>>, mode: WeightMode) -> Self {
        Self {
            values,
            mode,
            w_max: 1.0,
        }
    }

    pub fn num_models(&self) -> usize {
        self.values.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.num_blocks();
        if self.values.iter().any(|r| r.len() != blocks) {
            return Err(Error::Arity("weight rows have differing lengths".into()));
        }
        let hi = match self.mode {
            WeightMode::Interpolation => 1.0,
            WeightMode::TaskArithmetic => self.w_max,
        };
        for (i, row) in self.values.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if !(w >= -SIMPLEX_TOL && w <= hi + SIMPLEX_TOL) {
                    return Err(Error::Constraint(format!(
                        "weight of model {i} in block {j} is {w}, outside [0, {hi}]"
                    )));
                }
            }
        }
        if self.mode == WeightMode::Interpolation {
            for j in 0..blocks {
                let s: f64 = self.values.iter().map(|r| r[j]).sum();
                if (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::Constraint(format!(
                        "weights of block {j} sum to {s}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Two-model weights from a decision vector: model A gets `x_j`, model B `1 − x_j`.
pub fn decision_vector_to_weights(x: &[f64], n_blocks: usize) -> Result<BlockWeights> {
    if x.len() != n_blocks {
        return Err(Error::Arity(format!(
            "decision vector has {} entries for {n_blocks} blocks",
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("decision value {v} outside [0, 1]")));
    }
    Ok(BlockWeights::new(
        vec![x.to_vec(), x.iter().map(|v| 1.0 - v).collect()],
        WeightMode::Interpolation,
    ))
}

/// Maps every tensor name to its decision-vector slot.
///
/// Boundary tensors without their own block fall back to the nearest
/// attention block (first for embedding, last for head).
fn block_slots(partition: &BlockPartition, index: &LayerIndex) -> Result<HashMap<String, usize>> {
    let mut slots = HashMap::new();
    let first = partition.has_embedding_block as usize;
    let last = first + partition.blocks.len().saturating_sub(1);
    for name in &index.embedding_names {
        slots.insert(name.clone(), partition.embedding_slot().unwrap_or(first));
    }
    for name in &index.head_names {
        slots.insert(name.clone(), partition.head_slot().unwrap_or(last));
    }
    for group in &index.layer_groups {
        let slot = partition.block_of_layer(group.layer_id).ok_or_else(|| {
            Error::Index(format!(
                "layer {} is not covered by the partition",
                group.layer_id
            ))
        })?;
        for name in &group.tensor_names {
            slots.insert(name.clone(), slot);
        }
    }
    Ok(slots)
}

/// Merges the experts block by block under `weights`.
///
/// The output keeps model 0's tensor names, shapes and order. Task-arithmetic
/// mode requires `base`.
pub fn block_wise_merge(
    models: &[TensorMap],
    base: Option<&TensorMap>,
    partition: &BlockPartition,
    index: &LayerIndex,
    weights: &BlockWeights,
) -> Result<TensorMap> {
    if models.is_empty() {
        return Err(Error::Arity("no models to merge".into()));
    }
    if weights.num_models() != models.len() {
        return Err(Error::Arity(format!(
            "{} weight rows for {} models",
            weights.num_models(),
            models.len()
        )));
    }
    if weights.num_blocks() != partition.num_decision_blocks() {
        return Err(Error::Arity(format!(
            "{} weight columns for {} blocks",
            weights.num_blocks(),
            partition.num_decision_blocks()
        )));
    }
    weights.validate()?;
    for m in &models[1..] {
        models[0].check_compatible(m)?;
    }
    if let Some(b) = base {
        models[0].check_compatible(b)?;
    }
    let base = match (weights.mode, base) {
        (WeightMode::TaskArithmetic, None) => {
            return Err(Error::Config(
                "task-arithmetic block weights need a base model".into(),
            ))
        }
        (_, b) => b,
    };
    let slots = block_slots(partition, index)?;

    let mut out = models[0].map_tensors(|_, t| {
        let slot = *slots
            .get(&t.name)
            .ok_or_else(|| Error::Index(format!("tensor {} is not in the layer index", t.name)))?;
        let sources: Vec<&[f32]> = models
            .iter()
            .map(|m| {
                m.get(&t.name)
                    .expect("compatibility checked")
                    .data
                    .as_slice()
            })
            .collect();
        let w: Vec<f64> = weights.values.iter().map(|r| r[slot]).collect();
        let data = match weights.mode {
            WeightMode::Interpolation => (0..t.numel())
                .map(|e| {
                    sources
                        .iter()
                        .zip(&w)
                        .map(|(s, wi)| wi * s[e] as f64)
                        .sum::<f64>() as f32
                })
                .collect(),
            WeightMode::TaskArithmetic => {
                let b = &base
                    .expect("checked above")
                    .get(&t.name)
                    .expect("checked")
                    .data;
                (0..t.numel())
                    .map(|e| {
                        let be = b[e] as f64;
                        let delta: f64 = sources
                            .iter()
                            .zip(&w)
                            .map(|(s, wi)| wi * (s[e] as f64 - be))
                            .sum();
                        (be + delta) as f32
                    })
                    .collect()
            }
        };
        Ok(data)
    })?;
    out.metadata = models[0].metadata.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    BlockWise,
    TaskArithmetic,
    Ties,
    DareTies,
    DareTa,
    Breadcrumbs,
    Della,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BlockWise => "block-wise",
            Strategy::TaskArithmetic => "task-arithmetic",
            Strategy::Ties => "ties",
            Strategy::DareTies => "dare-ties",
            Strategy::DareTa => "dare-ta",
            Strategy::Breadcrumbs => "breadcrumbs",
            Strategy::Della => "della",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "block-wise" | "blockwise" => Strategy::BlockWise,
            "task-arithmetic" | "ta" => Strategy::TaskArithmetic,
            "ties" => Strategy::Ties,
            "dare-ties" => Strategy::DareTies,
            "dare-ta" | "dare" => Strategy::DareTa,
            "breadcrumbs" => Strategy::Breadcrumbs,
            "della" => Strategy::Della,
            _ => return Err(Error::Config(format!("unknown merge strategy {s:?}"))),
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.as_str().to_string()
    }
}

/// Strategy and hyperparameters for a model-level merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub top_k_fraction: f64,
    #[serde(default)]
    pub drop_p: f64,
    #[serde(default)]
    pub mask_low_pct: f64,
    #[serde(default = "one")]
    pub mask_high_pct: f64,
    #[serde(default = "one")]
    pub della_lambda: f64,
    #[serde(default = "half")]
    pub della_p: f64,
    /// Spread of the DELLA drop-probability ramp across magnitude ranks.
    #[serde(default = "della_epsilon")]
    pub della_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn della_epsilon() -> f64 {
    0.1
}

impl MergeRecipe {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            alpha: 1.0,
            top_k_fraction: 1.0,
            drop_p: 0.0,
            mask_low_pct: 0.0,
            mask_high_pct: 1.0,
            della_lambda: 1.0,
            della_p: 0.5,
            della_epsilon: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("top_k_fraction", self.top_k_fraction)?;
        unit("drop_p", self.drop_p)?;
        unit("mask_low_pct", self.mask_low_pct)?;
        unit("mask_high_pct", self.mask_high_pct)?;
        unit("della_p", self.della_p)?;
        unit("della_epsilon", self.della_epsilon)?;
        if self.mask_low_pct >= self.mask_high_pct {
            return Err(Error::Config(
                "mask_low_pct must be below mask_high_pct".into(),
            ));
        }
        if !self.alpha.is_finite() || !self.della_lambda.is_finite() {
            return Err(Error::Config("scaling factors must be finite".into()));
        }
        Ok(())
    }
}

/// ChaCha stream keyed by seed, model position and tensor name.
fn keyed_rng(seed: u64, model: usize, tensor: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((model as u64).to_le_bytes());
    h.update(tensor.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn task_vector(model: &Tensor, base: &Tensor) -> Vec<f64> {
    model
        .data
        .iter()
        .zip(&base.data)
        .map(|(m, b)| *m as f64 - *b as f64)
        .collect()
}

/// Zeroes all but the `ceil(frac·n)` largest-magnitude entries.
fn keep_top_k(tv: &mut [f64], frac: f64) {
    let n = tv.len();
    let k = ((frac * n as f64).ceil() as usize).min(n);
    if k == n {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tv[b].abs().total_cmp(&tv[a].abs()).then(a.cmp(&b)));
    for &i in &order[k..] {
        tv[i] = 0.0;
    }
}

fn dare(tv: &mut [f64], p: f64, rng: &mut ChaCha8Rng) {
    if p == 0.0 {
        return;
    }
    let scale = 1.0 / (1.0 - p);
    for v in tv.iter_mut() {
        if rng.gen::<f64>() < p {
            *v = 0.0;
        } else {
            *v *= scale;
        }
    }
}

/// Ascending magnitude rank of every entry (ties broken by position).
fn magnitude_ranks(tv: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tv.len()).collect();
    order.sort_by(|&a, &b| tv[a].abs().total_cmp(&tv[b].abs()).then(a.cmp(&b)));
    let mut rank = vec![0; tv.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

fn breadcrumbs_mask(tv: &mut [f64], low: f64, high: f64) {
    let n = tv.len();
    if n < 2 {
        return;
    }
    let ranks = magnitude_ranks(tv);
    for (v, r) in tv.iter_mut().zip(ranks) {
        let pct = r as f64 / (n - 1) as f64;
        if pct < low || pct > high {
            *v = 0.0;
        }
    }
}

/// Magnitude-aware drop: small entries are dropped more often than large ones.
fn magprune(tv: &mut [f64], p: f64, epsilon: f64, rng: &mut ChaCha8Rng) {
    let n = tv.len();
    let ranks = magnitude_ranks(tv);
    for (v, r) in tv.iter_mut().zip(ranks) {
        let rel = if n > 1 {
            r as f64 / (n - 1) as f64
        } else {
            0.5
        };
        let pe = (p + epsilon * (0.5 - rel)).clamp(0.01, 0.99);
        if rng.gen::<f64>() < pe {
            *v = 0.0;
        } else {
            *v /= 1.0 - pe;
        }
    }
}

/// Sign election followed by the disjoint mean of agreeing non-zero entries.
fn elect_and_average(tvs: &[Vec<f64>]) -> Vec<f64> {
    let n = tvs[0].len();
    (0..n)
        .map(|e| {
            let total: f64 = tvs.iter().map(|t| t[e]).sum();
            let positive = total >= 0.0;
            let (sum, count) = tvs
                .iter()
                .map(|t| t[e])
                .filter(|&v| v != 0.0 && (v > 0.0) == positive)
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Model-level merge of `models` onto `base` following `recipe`.
pub fn merge_model_level(
    models: &[TensorMap],
    base: &TensorMap,
    recipe: &MergeRecipe,
) -> Result<TensorMap> {
    if models.is_empty() {
        return Err(Error::Arity("no models to merge".into()));
    }
    recipe.validate()?;
    if recipe.strategy == Strategy::BlockWise {
        return Err(Error::Config(
            "block-wise merging goes through block_wise_merge".into(),
        ));
    }
    let uses_drop = matches!(recipe.strategy, Strategy::DareTa | Strategy::DareTies);
    if uses_drop && recipe.drop_p >= 1.0 {
        return Err(Error::Degenerate(
            "drop probability 1 removes every task-vector entry".into(),
        ));
    }
    for m in models {
        base.check_compatible(m)?;
    }

    let mut out = base.map_tensors(|_, bt| {
        let mut tvs: Vec<Vec<f64>> = models
            .iter()
            .map(|m| task_vector(m.get(&bt.name).expect("compatibility checked"), bt))
            .collect();
        let (delta, scale) = match recipe.strategy {
            Strategy::TaskArithmetic => (sum_vectors(&tvs), recipe.alpha),
            Strategy::Ties => {
                tvs.iter_mut()
                    .for_each(|t| keep_top_k(t, recipe.top_k_fraction));
                (elect_and_average(&tvs), recipe.alpha)
            }
            Strategy::DareTa | Strategy::DareTies => {
                for (i, t) in tvs.iter_mut().enumerate() {
                    dare(t, recipe.drop_p, &mut keyed_rng(recipe.seed, i, &bt.name));
                }
                if recipe.strategy == Strategy::DareTa {
                    (sum_vectors(&tvs), recipe.alpha)
                } else {
                    tvs.iter_mut()
                        .for_each(|t| keep_top_k(t, recipe.top_k_fraction));
                    (elect_and_average(&tvs), recipe.alpha)
                }
            }
            Strategy::Breadcrumbs => {
                tvs.iter_mut()
                    .for_each(|t| breadcrumbs_mask(t, recipe.mask_low_pct, recipe.mask_high_pct));
                (sum_vectors(&tvs), recipe.alpha)
            }
            Strategy::Della => {
                for (i, t) in tvs.iter_mut().enumerate() {
                    magprune(
                        t,
                        recipe.della_p,
                        recipe.della_epsilon,
                        &mut keyed_rng(recipe.seed, i, &bt.name),
                    );
                }
                (elect_and_average(&tvs), recipe.della_lambda)
            }
            Strategy::BlockWise => unreachable!("rejected above"),
        };
        Ok(bt
            .data
            .iter()
            .zip(&delta)
            .map(|(b, d)| (*b as f64 + scale * d) as f32)
            .collect())
    })?;
    out.metadata = base.metadata.clone();
    Ok(out)
}

fn sum_vectors(tvs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = tvs[0].clone();
    for t in &tvs[1..] {
        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::tensor_store::LayerGroup;
    use proptest::prelude::{any, prop, prop_assert, proptest};

    fn single(name: &str, data: &[f32]) -> TensorMap {
        let mut m = TensorMap::new();
        m.push(name, vec![data.len()], data.to_vec()).unwrap();
        m
    }

    fn fixture(seed: u32) -> TensorMap {
        let mut m = TensorMap::new();
        let val = |i: u32| {
            ((seed.wrapping_mul(7919).wrapping_add(i * 104729) % 2000) as f32 - 1000.0) / 256.0
        };
        m.push("emb", vec![2, 3], (0..6).map(val).collect())
            .unwrap();
        for l in 0..4 {
            m.push(
                format!("layers.{l}.w"),
                vec![5],
                (0..5).map(|i| val(10 * l + i + 7)).collect(),
            )
            .unwrap();
        }
        m.push("head", vec![3], (0..3).map(|i| val(i + 99)).collect())
            .unwrap();
        m
    }

    fn fixture_layout() -> (BlockPartition, LayerIndex) {
        let index = LayerIndex {
            layer_groups: (0..4)
                .map(|l| LayerGroup {
                    layer_id: l,
                    tensor_names: vec![format!("layers.{l}.w")],
                })
                .collect(),
            embedding_names: vec!["emb".into()],
            head_names: vec!["head".into()],
        };
        let partition = BlockPartition {
            blocks: vec![(0, 1), (2, 3)],
            has_embedding_block: true,
            has_head_block: true,
            cost: 0.0,
        };
        (partition, index)
    }

    #[test]
    fn all_ones_reproduces_model_a() {
        let (p, idx) = fixture_layout();
        let models = [fixture(1), fixture(2)];
        let w = decision_vector_to_weights(&[1.0; 4], 4).unwrap();
        let out = block_wise_merge(&models, None, &p, &idx, &w).unwrap();
        assert!(out.bit_eq(&models[0]));
        let w = decision_vector_to_weights(&[0.0; 4], 4).unwrap();
        let out = block_wise_merge(&models, None, &p, &idx, &w).unwrap();
        assert!(out.bit_eq(&models[1]));
    }

    #[test]
    fn identical_models_are_a_fixed_point() {
        let (p, idx) = fixture_layout();
        let models = [fixture(3), fixture(3)];
        let w = decision_vector_to_weights(&[0.2, 0.9, 0.5, 0.0], 4).unwrap();
        let out = block_wise_merge(&models, None, &p, &idx, &w).unwrap();
        for (a, b) in out.iter().zip(models[0].iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn quarter_weight_by_hand() {
        let index = LayerIndex {
            layer_groups: vec![LayerGroup {
                layer_id: 0,
                tensor_names: vec!["w".into()],
            }],
            embedding_names: vec![],
            head_names: vec![],
        };
        let p = BlockPartition {
            blocks: vec![(0, 0)],
            has_embedding_block: false,
            has_head_block: false,
            cost: 0.0,
        };
        let models = [single("w", &[0.0, 2.0]), single("w", &[2.0, 0.0])];
        let w = decision_vector_to_weights(&[0.25], 1).unwrap();
        assert_eq!(w.values, vec![vec![0.25], vec![0.75]]);
        let out = block_wise_merge(&models, None, &p, &index, &w).unwrap();
        assert_eq!(out.get("w").unwrap().data, vec![1.5, 0.5]);
    }

    #[test]
    fn weights_are_validated() {
        let (p, idx) = fixture_layout();
        let models = [fixture(1), fixture(2)];
        let short = decision_vector_to_weights(&[1.0; 3], 3).unwrap();
        assert!(matches!(
            block_wise_merge(&models, None, &p, &idx, &short),
            Err(Error::Arity(_))
        ));
        let off_simplex =
            BlockWeights::new(vec![vec![0.5; 4], vec![0.6; 4]], WeightMode::Interpolation);
        assert!(matches!(
            block_wise_merge(&models, None, &p, &idx, &off_simplex),
            Err(Error::Constraint(_))
        ));
        let ta = BlockWeights::new(vec![vec![0.5; 4], vec![0.6; 4]], WeightMode::TaskArithmetic);
        assert!(matches!(
            block_wise_merge(&models, None, &p, &idx, &ta),
            Err(Error::Config(_))
        ));
        assert!(block_wise_merge(&models, Some(&fixture(9)), &p, &idx, &ta).is_ok());
        assert!(matches!(
            decision_vector_to_weights(&[1.2], 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            decision_vector_to_weights(&[0.2], 2),
            Err(Error::Arity(_))
        ));
    }

    #[test]
    fn balanced_decision_vector() {
        let w = decision_vector_to_weights(&[0.5; 3], 3).unwrap();
        assert_eq!(w.values[0], w.values[1]);
        w.validate().unwrap();
    }

    #[test]
    fn single_block_equals_global_interpolation() {
        let (_, idx) = fixture_layout();
        let p = BlockPartition {
            blocks: vec![(0, 3)],
            has_embedding_block: false,
            has_head_block: false,
            cost: 0.0,
        };
        let models = [fixture(4), fixture(5)];
        let w = decision_vector_to_weights(&[0.3], 1).unwrap();
        let out = block_wise_merge(&models, None, &p, &idx, &w).unwrap();
        for ((o, a), b) in out.iter().zip(models[0].iter()).zip(models[1].iter()) {
            for ((x, ya), yb) in o.data.iter().zip(&a.data).zip(&b.data) {
                assert_eq!(*x, (0.3 * *ya as f64 + 0.7 * *yb as f64) as f32);
            }
        }
    }

    #[test]
    fn task_arithmetic_single_model_is_identity() {
        let base = fixture(10);
        let m = fixture(11);
        let out = merge_model_level(
            std::slice::from_ref(&m),
            &base,
            &MergeRecipe::new(Strategy::TaskArithmetic),
        )
        .unwrap();
        assert!(out.bit_eq(&m));
    }

    #[test]
    fn ties_by_hand() {
        let base = single("w", &[1.0, 1.0]);
        let a = single("w", &[4.0, 0.0]);
        let b = single("w", &[3.0, 5.0]);
        let mut r = MergeRecipe::new(Strategy::Ties);
        r.top_k_fraction = 0.5;
        r.alpha = 0.5;
        let out = merge_model_level(&[a, b], &base, &r).unwrap();
        assert_eq!(
            out.get("w").unwrap().data,
            vec![1.0 + 0.5 * 3.0, 1.0 + 0.5 * 4.0]
        );
    }

    #[test]
    fn ties_conflicting_signs_keep_the_majority_mass() {
        let base = single("w", &[0.0]);
        let models = [
            single("w", &[2.0]),
            single("w", &[-5.0]),
            single("w", &[1.0]),
        ];
        let out = merge_model_level(&models, &base, &MergeRecipe::new(Strategy::Ties)).unwrap();
        // elected sign is negative (2 - 5 + 1 < 0), so only -5 survives
        assert_eq!(out.get("w").unwrap().data, vec![-5.0]);
    }

    #[test]
    fn dare_zero_drop_is_ta() {
        let base = fixture(20);
        let models = [fixture(21), fixture(22)];
        let ta =
            merge_model_level(&models, &base, &MergeRecipe::new(Strategy::TaskArithmetic)).unwrap();
        for seed in [0, 1, 99] {
            let mut r = MergeRecipe::new(Strategy::DareTa);
            r.seed = seed;
            assert!(merge_model_level(&models, &base, &r).unwrap().bit_eq(&ta));
        }
    }

    #[test]
    fn dare_is_deterministic_and_drop_one_is_degenerate() {
        let base = fixture(30);
        let models = [fixture(31), fixture(32)];
        let mut r = MergeRecipe::new(Strategy::DareTies);
        r.drop_p = 0.4;
        r.seed = 7;
        let a = merge_model_level(&models, &base, &r).unwrap();
        let b = merge_model_level(&models, &base, &r).unwrap();
        assert!(a.bit_eq(&b));
        r.seed = 8;
        assert!(!merge_model_level(&models, &base, &r).unwrap().bit_eq(&a));
        r.drop_p = 1.0;
        assert!(matches!(
            merge_model_level(&models, &base, &r),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn dare_rescales_survivors() {
        let base = single("w", &[0.0; 64]);
        let m = single("w", &[1.0; 64]);
        let mut r = MergeRecipe::new(Strategy::DareTa);
        r.drop_p = 0.5;
        let out = merge_model_level(&[m], &base, &r).unwrap();
        let data = &out.get("w").unwrap().data;
        assert!(data.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(data.contains(&0.0) && data.contains(&2.0));
    }

    #[test]
    fn breadcrumbs_full_mask_is_ta_and_trims_tails() {
        let base = fixture(40);
        let models = [fixture(41), fixture(42)];
        let ta =
            merge_model_level(&models, &base, &MergeRecipe::new(Strategy::TaskArithmetic)).unwrap();
        let bc =
            merge_model_level(&models, &base, &MergeRecipe::new(Strategy::Breadcrumbs)).unwrap();
        assert!(bc.bit_eq(&ta));

        let base = single("w", &[0.0; 5]);
        let m = single("w", &[0.1, -5.0, 1.0, 2.0, -3.0]);
        let mut r = MergeRecipe::new(Strategy::Breadcrumbs);
        r.mask_low_pct = 0.2;
        r.mask_high_pct = 0.8;
        let out = merge_model_level(&[m], &base, &r).unwrap();
        assert_eq!(out.get("w").unwrap().data, vec![0.0, 0.0, 1.0, 2.0, -3.0]);
    }

    #[test]
    fn della_drops_small_entries_more_often() {
        let n = 2000;
        let base = single("w", &vec![0.0; n]);
        let m = single("w", &(1..=n).map(|i| i as f32).collect::<Vec<_>>());
        let mut r = MergeRecipe::new(Strategy::Della);
        r.della_p = 0.5;
        r.della_epsilon = 0.8;
        let out = merge_model_level(&[m], &base, &r).unwrap();
        let data = &out.get("w").unwrap().data;
        let dropped_low = data[..n / 4].iter().filter(|v| **v == 0.0).count();
        let dropped_high = data[3 * n / 4..].iter().filter(|v| **v == 0.0).count();
        assert!(
            dropped_low > dropped_high + 100,
            "{dropped_low} vs {dropped_high}"
        );
    }

    #[test]
    fn unknown_strategy_and_bad_masks() {
        assert!(matches!("slerp".parse::<Strategy>(), Err(Error::Config(_))));
        let parsed: std::result::Result<MergeRecipe, _> =
            serde_json::from_str(r#"{"strategy":"slerp"}"#);
        assert!(parsed.is_err());
        let mut r = MergeRecipe::new(Strategy::Breadcrumbs);
        r.mask_low_pct = 0.9;
        r.mask_high_pct = 0.1;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn recipe_json_defaults() {
        let r: MergeRecipe =
            serde_json::from_str(r#"{"strategy":"dare-ties","drop_p":0.3}"#).unwrap();
        assert_eq!(r.strategy, Strategy::DareTies);
        assert_eq!(r.alpha, 1.0);
        assert_eq!(r.drop_p, 0.3);
    }

    proptest! {
        #[test]
        fn zero_scale_returns_base(seed in 0u32..1000, si in 0usize..6, rseed in any::<u64>()) {
            let strategy = [
                Strategy::TaskArithmetic, Strategy::Ties, Strategy::DareTies,
                Strategy::DareTa, Strategy::Breadcrumbs, Strategy::Della,
            ][si];
            let base = fixture(seed);
            let models = [fixture(seed + 1), fixture(seed + 2)];
            let mut r = MergeRecipe::new(strategy);
            r.alpha = 0.0;
            r.della_lambda = 0.0;
            r.drop_p = 0.3;
            r.top_k_fraction = 0.6;
            r.seed = rseed;
            let out = merge_model_level(&models, &base, &r).unwrap();
            prop_assert!(out.bit_eq(&base));
        }

        #[test]
        fn ties_full_topk_single_model_equals_ta(seed in 0u32..1000, alpha in -2.0f64..2.0) {
            let base = fixture(seed);
            let m = fixture(seed + 17);
            let mut ties = MergeRecipe::new(Strategy::Ties);
            ties.alpha = alpha;
            let mut ta = MergeRecipe::new(Strategy::TaskArithmetic);
            ta.alpha = alpha;
            let a = merge_model_level(std::slice::from_ref(&m), &base, &ties).unwrap();
            let b = merge_model_level(&[m], &base, &ta).unwrap();
            prop_assert!(a.bit_eq(&b));
        }

        #[test]
        fn complementary_vectors_swap_models(x in prop::collection::vec(0.0f64..=1.0, 4)) {
            let (p, idx) = fixture_layout();
            let ab = [fixture(50), fixture(51)];
            let ba = [fixture(51), fixture(50)];
            let flipped: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
            let w1 = decision_vector_to_weights(&x, 4).unwrap();
            let w2 = decision_vector_to_weights(&flipped, 4).unwrap();
            let m1 = block_wise_merge(&ab, None, &p, &idx, &w1).unwrap();
            let m2 = block_wise_merge(&ba, None, &p, &idx, &w2).unwrap();
            // same weights per model, just listed in the other order
            for (a, b) in m1.iter().zip(m2.iter()) {
                for (u, v) in a.data.iter().zip(&b.data) {
                    prop_assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
                }
            }
        }
    }
}

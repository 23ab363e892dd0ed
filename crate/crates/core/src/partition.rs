//! Layer difference profiles and optimal contiguous block partitioning.
//!
//! The per-layer difference `d_l` measures how far the experts' task vectors
//! spread around their mean inside layer `l`. Layers are then cut into `K`
//! contiguous blocks minimizing, summed over blocks,
//!
//! ```text
//! w_var * Σ_{l∈B} (d_l − mean_B)²  +  λ * (Σ_{l∈B} d_l − total/K)²
//! ```
//!
//! The first term keeps blocks homogeneous, the second keeps the difference
//! mass balanced across blocks. The objective is additive over blocks, so an
//! `O(K·L²)` dynamic program finds the global optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{LayerIndex, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    L1,
    L2,
}

impl TryFrom<u8> for NormOrder {
    type Error = String;

    fn try_from(p: u8) -> Result<Self, String> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(p: NormOrder) -> u8 {
        match p {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

/// Per-layer difference magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffProfile {
    pub d: Vec<f64>,
    pub norm_order: NormOrder,
    pub total: f64,
}

impl DiffProfile {
    pub fn new(d: Vec<f64>, norm_order: NormOrder) -> Result<Self> {
        if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!(
                "layer difference {bad} is not a finite non-negative value"
            )));
        }
        let total = d.iter().sum();
        Ok(Self {
            d,
            norm_order,
            total,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.d.len()
    }

    /// Rescales so that the entries sum to the layer count. An all-zero
    /// profile is returned unchanged.
    pub fn normalized(&self) -> DiffProfile {
        if self.total <= 0.0 {
            return self.clone();
        }
        let scale = self.d.len() as f64 / self.total;
        let d: Vec<f64> = self.d.iter().map(|v| v * scale).collect();
        let total = d.iter().sum();
        DiffProfile {
            d,
            norm_order: self.norm_order,
            total,
        }
    }
}

/// How the DP settles exact cost ties between split points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Keep the earliest split (strict improvement only).
    #[default]
    SmallestSplit,
    /// Prefer the split whose trailing block sum is closest to total/K.
    MostBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    #[serde(default = "default_variance_weight")]
    pub variance_weight: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

fn default_variance_weight() -> f64 {
    1.0
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            k: 6,
            lambda: 1.0,
            variance_weight: 1.0,
            tie_break: TieBreak::SmallestSplit,
        }
    }
}

impl PartitionConfig {
    pub fn new(k: usize, lambda: f64) -> Self {
        Self {
            k,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("number of blocks must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.variance_weight >= 0.0) {
            return Err(Error::Config("cost weights must be non-negative".into()));
        }
        if self.lambda == 0.0 && self.variance_weight == 0.0 {
            return Err(Error::Config(
                "lambda and variance_weight cannot both be zero".into(),
            ));
        }
        Ok(())
    }

    fn check_feasible(&self, layers: usize) -> Result<()> {
        self.validate()?;
        if self.k > layers {
            return Err(Error::Infeasible {
                blocks: self.k,
                layers,
            });
        }
        Ok(())
    }
}

/// Contiguous inclusive layer ranges plus the optional boundary blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<(usize, usize)>,
    pub has_embedding_block: bool,
    pub has_head_block: bool,
    pub cost: f64,
}

impl BlockPartition {
    /// Number of searchable weights: attention blocks plus boundary blocks.
    pub fn num_decision_blocks(&self) -> usize {
        self.blocks.len() + self.has_embedding_block as usize + self.has_head_block as usize
    }

    /// Block position (in decision-vector order) owning attention layer `layer`.
    pub fn block_of_layer(&self, layer: usize) -> Option<usize> {
        let offset = self.has_embedding_block as usize;
        self.blocks
            .iter()
            .position(|&(s, e)| s <= layer && layer <= e)
            .map(|b| b + offset)
    }

    pub fn embedding_slot(&self) -> Option<usize> {
        self.has_embedding_block.then_some(0)
    }

    pub fn head_slot(&self) -> Option<usize> {
        self.has_head_block.then(|| self.num_decision_blocks() - 1)
    }
}

/// Per-layer difference magnitudes across the experts.
///
/// Task-vector deviations from their mean do not depend on the base model, so
/// the deviations are taken directly against the mean of the experts; `base`
/// is only checked for shape compatibility.
pub fn compute_layer_diffs(
    models: &[TensorMap],
    base: Option<&TensorMap>,
    index: &LayerIndex,
    norm_order: NormOrder,
) -> Result<DiffProfile> {
    if models.len() < 2 {
        return Err(Error::Arity(format!(
            "layer differences need at least 2 models, got {}",
            models.len()
        )));
    }
    for m in &models[1..] {
        models[0].check_compatible(m)?;
    }
    if let Some(b) = base {
        models[0].check_compatible(b)?;
    }
    let n = models.len() as f64;

    let mut d = Vec::with_capacity(index.num_layers());
    for group in &index.layer_groups {
        let mut acc = vec![0.0f64; models.len()];
        for name in &group.tensor_names {
            let tensors: Vec<&[f32]> = models
                .iter()
                .map(|m| {
                    m.get(name)
                        .map(|t| t.data.as_slice())
                        .ok_or_else(|| Error::Shape(format!("tensor {name} missing from a model")))
                })
                .collect::<Result<_>>()?;
            for e in 0..tensors[0].len() {
                let mean = tensors.iter().map(|t| t[e] as f64).sum::<f64>() / n;
                for (a, t) in acc.iter_mut().zip(&tensors) {
                    let dev = t[e] as f64 - mean;
                    *a += match norm_order {
                        NormOrder::L1 => dev.abs(),
                        NormOrder::L2 => dev * dev,
                    };
                }
            }
        }
        let layer_diff = match norm_order {
            NormOrder::L1 => acc.iter().sum(),
            NormOrder::L2 => acc.iter().map(|s| s.sqrt()).sum(),
        };
        d.push(layer_diff);
    }
    DiffProfile::new(d, norm_order)
}

/// Constant-time segment costs backed by prefix sums of `d` and `d²`.
pub struct SegmentCost<'a> {
    cfg: &'a PartitionConfig,
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
    target: f64,
}

impl<'a> SegmentCost<'a> {
    pub fn new(profile: &DiffProfile, cfg: &'a PartitionConfig) -> Self {
        let mut prefix = Vec::with_capacity(profile.d.len() + 1);
        let mut prefix_sq = Vec::with_capacity(profile.d.len() + 1);
        prefix.push(0.0);
        prefix_sq.push(0.0);
        for &v in &profile.d {
            prefix.push(prefix.last().unwrap() + v);
            prefix_sq.push(prefix_sq.last().unwrap() + v * v);
        }
        Self {
            cfg,
            prefix,
            prefix_sq,
            target: profile.total / cfg.k as f64,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.prefix.len() - 1
    }

    /// Cost of the inclusive layer range `[i, j]`; indices are unchecked.
    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        let n = (j - i + 1) as f64;
        let sum = self.prefix[j + 1] - self.prefix[i];
        let sum_sq = self.prefix_sq[j + 1] - self.prefix_sq[i];
        let sse = (sum_sq - sum * sum / n).max(0.0);
        let dev = sum - self.target;
        self.cfg.variance_weight * sse + self.cfg.lambda * dev * dev
    }

    fn balance_dev(&self, i: usize, j: usize) -> f64 {
        (self.prefix[j + 1] - self.prefix[i] - self.target).abs()
    }
}

pub fn segment_cost(
    profile: &DiffProfile,
    i: usize,
    j: usize,
    cfg: &PartitionConfig,
) -> Result<f64> {
    let l = profile.num_layers();
    if i > j || j >= l {
        return Err(Error::Index(format!("segment [{i}, {j}] outside 0..{l}")));
    }
    cfg.validate()?;
    Ok(SegmentCost::new(profile, cfg).cost(i, j))
}

/// Globally optimal contiguous partition of the layers into `cfg.k` blocks.
pub fn optimal_partition(profile: &DiffProfile, cfg: &PartitionConfig) -> Result<BlockPartition> {
    let l_total = profile.num_layers();
    cfg.check_feasible(l_total)?;
    let costs = SegmentCost::new(profile, cfg);
    let k_total = cfg.k;

    // dp[k][l]: best cost of the first l layers in k blocks; split[k][l]: the m
    // where the last block starts (it covers layers m..l-1).
    let mut dp = vec![vec![f64::INFINITY; l_total + 1]; k_total + 1];
    let mut split = vec![vec![0usize; l_total + 1]; k_total + 1];
    dp[0][0] = 0.0;
    for k in 1..=k_total {
        for l in k..=l_total {
            let mut best = f64::INFINITY;
            let mut best_m = k - 1;
            for m in (k - 1)..l {
                let prev = dp[k - 1][m];
                if !prev.is_finite() {
                    continue;
                }
                let cand = prev + costs.cost(m, l - 1);
                let better = cand < best
                    || (cfg.tie_break == TieBreak::MostBalanced
                        && cand == best
                        && costs.balance_dev(m, l - 1) < costs.balance_dev(best_m, l - 1));
                if better {
                    best = cand;
                    best_m = m;
                }
            }
            dp[k][l] = best;
            split[k][l] = best_m;
        }
    }

    let mut blocks = Vec::with_capacity(k_total);
    let mut end = l_total;
    for k in (1..=k_total).rev() {
        let start = split[k][end];
        blocks.push((start, end - 1));
        end = start;
    }
    blocks.reverse();
    let cost = blocks.iter().map(|&(s, e)| costs.cost(s, e)).sum();
    Ok(BlockPartition {
        blocks,
        has_embedding_block: false,
        has_head_block: false,
        cost,
    })
}

const BRUTE_FORCE_BUDGET: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Direct two-pass cost of one block, independent of the prefix-sum route.
fn direct_block_cost(d: &[f64], target: f64, cfg: &PartitionConfig) -> f64 {
    let n = d.len() as f64;
    let sum: f64 = d.iter().sum();
    let mean = sum / n;
    let sse: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    cfg.variance_weight * sse + cfg.lambda * (sum - target) * (sum - target)
}

/// Exhaustive search over every composition of the layers into `cfg.k`
/// contiguous blocks. Meant as a test oracle for [`optimal_partition`].
pub fn brute_force_partition(
    profile: &DiffProfile,
    cfg: &PartitionConfig,
) -> Result<BlockPartition> {
    brute_force_partition_counted(profile, cfg).map(|(p, _)| p)
}

/// As [`brute_force_partition`], also returning how many candidates were scored.
pub fn brute_force_partition_counted(
    profile: &DiffProfile,
    cfg: &PartitionConfig,
) -> Result<(BlockPartition, u128)> {
    let l = profile.num_layers();
    cfg.check_feasible(l)?;
    let candidates = binomial(l - 1, cfg.k - 1);
    if candidates > BRUTE_FORCE_BUDGET {
        return Err(Error::Budget { candidates });
    }
    let target = profile.total / cfg.k as f64;

    // cuts[i] is the first layer of block i+1; strictly increasing in 1..l
    let cuts_n = cfg.k - 1;
    let mut cuts: Vec<usize> = (1..=cuts_n).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut count = 0u128;
    loop {
        count += 1;
        let mut bounds = Vec::with_capacity(cfg.k + 1);
        bounds.push(0);
        bounds.extend_from_slice(&cuts);
        bounds.push(l);
        let cost: f64 = bounds
            .windows(2)
            .map(|w| direct_block_cost(&profile.d[w[0]..w[1]], target, cfg))
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, cuts.clone()));
        }

        // next combination in lexicographic order
        let mut i = cuts_n;
        loop {
            if i == 0 {
                let (cost, cuts) = best.expect("at least one candidate");
                let mut bounds = vec![0];
                bounds.extend(cuts);
                bounds.push(l);
                let blocks = bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect();
                return Ok((
                    BlockPartition {
                        blocks,
                        has_embedding_block: false,
                        has_head_block: false,
                        cost,
                    },
                    count,
                ));
            }
            i -= 1;
            if cuts[i] < l - (cuts_n - i) {
                cuts[i] += 1;
                for j in i + 1..cuts_n {
                    cuts[j] = cuts[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Adds separate embedding and head blocks when the index has such tensors.
pub fn attach_boundary_blocks(partition: &BlockPartition, index: &LayerIndex) -> BlockPartition {
    BlockPartition {
        has_embedding_block: !index.embedding_names.is_empty(),
        has_head_block: !index.head_names.is_empty(),
        ..partition.clone()
    }
}

/// The `partition.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub d: Vec<f64>,
    pub norm_order: NormOrder,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    pub blocks: Vec<[usize; 2]>,
    pub cost: f64,
    pub embedding_block: bool,
    pub head_block: bool,
}

impl PartitionReport {
    pub fn new(profile: &DiffProfile, cfg: &PartitionConfig, partition: &BlockPartition) -> Self {
        Self {
            d: profile.d.clone(),
            norm_order: profile.norm_order,
            k: cfg.k,
            lambda: cfg.lambda,
            blocks: partition.blocks.iter().map(|&(s, e)| [s, e]).collect(),
            cost: partition.cost,
            embedding_block: partition.has_embedding_block,
            head_block: partition.has_head_block,
        }
    }

    pub fn partition(&self) -> BlockPartition {
        BlockPartition {
            blocks: self.blocks.iter().map(|b| (b[0], b[1])).collect(),
            has_embedding_block: self.embedding_block,
            has_head_block: self.head_block,
            cost: self.cost,
        }
    }
}

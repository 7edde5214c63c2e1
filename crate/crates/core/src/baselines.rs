//! Model-level erasure baselines: incremental fine-tuning, pruning and
//! model merging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Rng, Tensor};
use crate::tinylm::{
    block_matrices, generate_expert_corpus, loss_gradients, train, DialogueDataset, Pair, TinyLM,
    TrainConfig,
};

/// Merge weights tried by the merging baselines.
pub const OMEGA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Plain full fine-tuning on fresh clean data. Zero epochs returns the model
/// unchanged.
pub fn incremental_finetune(
    model: &TinyLM,
    fresh: &DialogueDataset,
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<TinyLM> {
    if epochs == 0 {
        return Ok(model.clone());
    }
    let cfg = TrainConfig {
        epochs,
        lr,
        seed,
        ..TrainConfig::default()
    };
    Ok(train(&model.merged()?, fresh, &cfg)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    L1,
    L2,
    Taylor,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::L1, Strategy::L2, Strategy::Taylor];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::L1 => "l1",
            Strategy::L2 => "l2",
            Strategy::Taylor => "taylor",
        }
    }

    /// Column strategies score whole input columns; the others score single
    /// weights.
    pub fn is_columnwise(self) -> bool {
        matches!(self, Strategy::L1 | Strategy::L2)
    }

    /// Pruning ratio used when none is given.
    pub fn default_ratio(self) -> f64 {
        if self.is_columnwise() {
            0.05
        } else {
            0.2
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown pruning strategy `{s}`")))
    }
}

/// Importance of every prunable unit in the block weight matrices.
///
/// For column strategies `scores[name]` has one entry per column of the
/// `[out × in]` matrix; otherwise one entry per weight in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub strategy: Strategy,
    pub scores: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    /// EMA decay for Taylor scores.
    pub beta: f64,
    /// Calibration batches accumulated by Taylor scoring.
    pub n_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            beta: 0.9,
            n_batches: 8,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Column norms of an `[out × in]` matrix: `p = 1` gives ℓ1, `p = 2` gives ℓ2.
pub fn column_norms(w: &Tensor, p: u32) -> Result<Vec<f64>> {
    let (rows, cols) = w.dims2()?;
    let mut out = vec![0.0f64; cols];
    for r in 0..rows {
        for (c, &x) in w.row(r).iter().enumerate() {
            let a = f64::from(x).abs();
            out[c] += if p == 1 { a } else { a * a };
        }
    }
    if p != 1 {
        out.iter_mut().for_each(|s| *s = s.sqrt());
    }
    Ok(out)
}

/// One step of `Γ ← β·Γ + (1−β)·θ·g`, elementwise.
pub fn ema_update(gamma: &mut [f64], theta: &[f32], grad: &[f32], beta: f64) {
    for ((g, &t), &d) in gamma.iter_mut().zip(theta).zip(grad) {
        *g = beta * *g + (1.0 - beta) * f64::from(t) * f64::from(d);
    }
}

pub fn importance(
    model: &TinyLM,
    strategy: Strategy,
    calib: &DialogueDataset,
    cfg: &ImportanceConfig,
) -> Result<ImportanceScores> {
    let model = model.merged()?;
    let names = block_matrices(model.config());
    let params = model.params();
    let mut scores = BTreeMap::new();
    match strategy {
        Strategy::Random => {
            let mut rng = Rng::derive(cfg.seed, "random-importance");
            for n in names {
                let numel = params.require(&n)?.numel();
                scores.insert(n, (0..numel).map(|_| rng.next_f64()).collect());
            }
        }
        Strategy::L1 | Strategy::L2 => {
            let p = if strategy == Strategy::L1 { 1 } else { 2 };
            for n in names {
                let norms = column_norms(params.require(&n)?, p)?;
                scores.insert(n, norms);
            }
        }
        Strategy::Taylor => {
            if calib.is_empty() {
                return Err(Error::input("taylor importance needs calibration data"));
            }
            if !(0.0..1.0).contains(&cfg.beta) {
                return Err(Error::input(format!("beta {} outside [0, 1)", cfg.beta)));
            }
            if cfg.batch_size == 0 || cfg.n_batches == 0 {
                return Err(Error::input("taylor importance needs positive batch size and count"));
            }
            let mut gamma: BTreeMap<String, Vec<f64>> = names
                .iter()
                .map(|n| Ok((n.clone(), vec![0.0; params.require(n)?.numel()])))
                .collect::<Result<_>>()?;
            let order = Rng::derive(cfg.seed, "taylor-calib").permutation(calib.len());
            for b in 0..cfg.n_batches {
                let batch: Vec<&Pair> = (0..cfg.batch_size)
                    .map(|i| &calib.pairs[order[(b * cfg.batch_size + i) % order.len()]])
                    .collect();
                let (_, grads) = loss_gradients(&model, &batch)?;
                for (n, g) in gamma.iter_mut() {
                    ema_update(g, params.require(n)?.data(), grads.require(n)?.data(), cfg.beta);
                }
            }
            for (n, g) in gamma {
                scores.insert(n, g.into_iter().map(f64::abs).collect());
            }
        }
    }
    let out = ImportanceScores { strategy, scores };
    if out.scores.values().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::NonFinite(format!("{strategy} importance scores")));
    }
    Ok(out)
}

/// Indices of the `k` lowest scores; ties go to the lowest index.
fn lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Zero-masks the lowest-scoring `⌊ratio · units⌋` units of every scored
/// matrix. Shapes are unchanged.
pub fn prune(model: &TinyLM, scores: &ImportanceScores, ratio: f64) -> Result<TinyLM> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::input(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let model = model.merged()?;
    let mut params = model.params().clone();
    for (name, s) in &scores.scores {
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::Schema(format!("scores for unknown tensor `{name}`")))?;
        let (rows, cols) = w.dims2()?;
        let units = if scores.strategy.is_columnwise() { cols } else { rows * cols };
        if s.len() != units {
            return Err(Error::Schema(format!("`{name}`: {} scores for {units} units", s.len())));
        }
        let k = (ratio * units as f64).floor() as usize;
        let data = w.data_mut();
        for u in lowest(s, k) {
            if scores.strategy.is_columnwise() {
                (0..rows).for_each(|r| data[r * cols + u] = 0.0);
            } else {
                data[u] = 0.0;
            }
        }
    }
    TinyLM::from_params(model.config(), params)
}

/// `expert − base`, tagged with both model ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: ParamSet,
    pub base_id: String,
    pub expert_id: String,
}

pub fn task_vector(base: &TinyLM, expert: &TinyLM) -> Result<TaskVector> {
    let (b, e) = (base.merged()?, expert.merged()?);
    Ok(TaskVector {
        delta: e.params().sub(b.params())?,
        base_id: checkpoint::digest(b.params())?,
        expert_id: checkpoint::digest(e.params())?,
    })
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n != weights.len() {
        return Err(Error::input(format!("{n} models but {} weights", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::input("merge weights must be finite"));
    }
    Ok(())
}

/// Weighted sum of tensors in f64, skipping zero coefficients so that a
/// single unit coefficient reproduces its tensor bit for bit.
fn combine(terms: &[(f64, &ParamSet)], template: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let mut acc = vec![0.0f64; t.numel()];
        for (c, p) in terms.iter().filter(|(c, _)| *c != 0.0) {
            for (a, &x) in acc.iter_mut().zip(p.require(name)?.data()) {
                *a += c * f64::from(x);
            }
        }
        let data = acc.into_iter().map(|x| x as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// `B + Σ ωₖ (Eₖ − B)`, evaluated as `(1 − Σω)·B + Σ ωₖ Eₖ`.
pub fn task_arithmetic(base: &TinyLM, experts: &[TinyLM], weights: &[f64]) -> Result<TinyLM> {
    check_weights(experts.len(), weights)?;
    let base = base.merged()?;
    let experts: Vec<TinyLM> = experts.iter().map(TinyLM::merged).collect::<Result<_>>()?;
    for e in &experts {
        base.params().check_same_schema(e.params())?;
    }
    let mut terms = vec![(1.0 - weights.iter().sum::<f64>(), base.params())];
    terms.extend(weights.iter().copied().zip(experts.iter().map(TinyLM::params)));
    TinyLM::from_params(base.config(), combine(&terms, base.params())?)
}

/// `B + Σ ωₖ δₖ` for precomputed task vectors.
pub fn apply_task_vectors(base: &TinyLM, vectors: &[TaskVector], weights: &[f64]) -> Result<TinyLM> {
    check_weights(vectors.len(), weights)?;
    let base = base.merged()?;
    for v in vectors {
        base.params().check_same_schema(&v.delta)?;
    }
    let mut terms = vec![(1.0, base.params())];
    terms.extend(weights.iter().copied().zip(vectors.iter().map(|v| &v.delta)));
    TinyLM::from_params(base.config(), combine(&terms, base.params())?)
}

/// Drops each entry with probability `p` and rescales survivors by `1/(1−p)`.
pub fn dare(delta: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::input(format!("drop probability {p} outside [0, 1)")));
    }
    let mut rng = Rng::derive(seed, "dare");
    let keep = 1.0 - p;
    let mut out = ParamSet::new();
    for (name, t) in delta.delta.iter() {
        let data = t
            .data()
            .iter()
            .map(|&x| {
                if rng.bernoulli(p) {
                    0.0
                } else {
                    (f64::from(x) / keep) as f32
                }
            })
            .collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(TaskVector {
        delta: out,
        base_id: delta.base_id.clone(),
        expert_id: delta.expert_id.clone(),
    })
}

/// Fine-tunes `base` on the second synthetic task to obtain a merge partner.
pub fn train_expert(base: &TinyLM, n_pairs: usize, epochs: usize, lr: f32, seed: u64) -> Result<TinyLM> {
    let data = generate_expert_corpus(base.config(), n_pairs, seed)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        seed,
        ..TrainConfig::default()
    };
    Ok(train(&base.merged()?, &data, &cfg)?.0)
}

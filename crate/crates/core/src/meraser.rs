//! Two-phase fingerprint erasure: mismatched fine-tuning breaks the
//! trigger/target associations, clean fine-tuning restores the task, and a
//! final check confirms both. Also hosts the transferable-erasure adapter
//! and the label-residual used by the NTK analysis.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintSpec;
use crate::lora::{self, LoraAdapter};
use crate::metrics::fsr;
use crate::numkit::{log_softmax, Rng};
use crate::tinylm::{greedy_decode, perplexity, DialogueDataset, Pair, Provenance, TinyLM, TrainConfig, Trainable, Trainer};

/// Zero-FSR epochs required after the first one before erase stops.
pub const CONFIRMATION_EPOCHS: usize = 2;

/// Uniformly random permutation of `0..n` without fixed points.
pub fn derangement(n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::DerangementImpossible(n));
    }
    // Rejection sampling; a uniform permutation is a derangement with
    // probability about 1/e.
    loop {
        let p = rng.permutation(n);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

/// Picks `n` pairs of `base` and re-pairs their outputs by a random
/// derangement, so no input keeps its own output. `origin[i]` records the
/// base indices of pair `i`'s input and output.
pub fn build_mismatched(base: &DialogueDataset, n: usize, seed: u64) -> Result<DialogueDataset> {
    if n < 2 {
        return Err(Error::DerangementImpossible(n));
    }
    if base.len() < n {
        return Err(Error::Capacity(format!("{n} mismatched pairs requested from {}", base.len())));
    }
    let mut rng = Rng::derive(seed, "mismatched");
    let mut pick = rng.permutation(base.len());
    pick.truncate(n);
    let sigma = derangement(n, &mut rng)?;
    let mut pairs = Vec::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    for (i, &j) in sigma.iter().enumerate() {
        let (src_in, src_out) = (pick[i], pick[j]);
        pairs.push(Pair::new(base.pairs[src_in].input.clone(), base.pairs[src_out].output.clone()));
        origin.push((src_in, src_out));
    }
    let mut d = DialogueDataset::new(Provenance::Mismatched, pairs);
    d.origin = origin;
    Ok(d)
}

/// `n` correctly paired samples of `base`, none of which was used by
/// `exclude` (by index or by input).
pub fn build_clean(base: &DialogueDataset, n: usize, exclude: &DialogueDataset, seed: u64) -> Result<DialogueDataset> {
    if n == 0 {
        return Err(Error::input("clean set size must be at least 1"));
    }
    let used: HashSet<usize> = exclude.origin.iter().flat_map(|&(a, b)| [a, b]).collect();
    let used_inputs: HashSet<&Vec<u32>> = exclude.pairs.iter().map(|p| &p.input).collect();
    let mut order = Rng::derive(seed, "clean").permutation(base.len());
    order.retain(|i| !used.contains(i) && !used_inputs.contains(&base.pairs[*i].input));
    if order.len() < n {
        return Err(Error::Capacity(format!(
            "{n} clean pairs requested, only {} disjoint pairs available",
            order.len()
        )));
    }
    order.truncate(n);
    let pairs = order.iter().map(|&i| base.pairs[i].clone()).collect();
    let mut d = DialogueDataset::new(Provenance::Clean, pairs);
    d.origin = order.iter().map(|&i| (i, i)).collect();
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Erase,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseReport {
    pub phase: Phase,
    pub epochs_used: usize,
    /// FSR after each epoch.
    pub fsr_trace: Vec<f64>,
    /// Held-out perplexity after each epoch.
    pub ppl_trace: Vec<f64>,
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub fully_erased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraseConfig {
    /// Maximum epochs.
    pub budget: usize,
    pub lr: f32,
    pub trainable: Trainable,
    pub rank: usize,
    pub alpha: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        EraseConfig {
            budget: 50,
            lr: 1e-3,
            trainable: Trainable::AdapterOnly,
            rank: 4,
            alpha: 8.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn require_provenance(d: &DialogueDataset, p: Provenance) -> Result<()> {
    if d.provenance != p {
        return Err(Error::input(format!("expected a {p:?} dataset, got {:?}", d.provenance)));
    }
    if d.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    Ok(())
}

/// Phase 1: fine-tunes on mismatched pairs, checking FSR after every epoch.
/// Stops once FSR has been zero for `1 + CONFIRMATION_EPOCHS` consecutive
/// epochs. If the budget runs out first, returns the lowest-FSR model seen
/// with `fully_erased = false`. Adapter-only runs come back merged.
pub fn erase(
    model: &TinyLM,
    d_m: &DialogueDataset,
    spec: &FingerprintSpec,
    heldout: &DialogueDataset,
    cfg: &EraseConfig,
) -> Result<(TinyLM, EraseReport)> {
    require_provenance(d_m, Provenance::Mismatched)?;
    d_m.validate(model.config().context_len)?;
    let start = match cfg.trainable {
        Trainable::All => model.merged()?,
        Trainable::AdapterOnly => model.merged()?.with_adapter(lora::create(model, cfg.rank, cfg.alpha, cfg.seed)?)?,
    };
    let ppl_before = perplexity(&start, heldout)?;
    let mut trainer = Trainer::new(
        start.clone(),
        TrainConfig {
            epochs: cfg.budget,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            trainable: cfg.trainable,
            seed: cfg.seed,
        },
    )?;
    let mut best = (fsr(&start, spec)?, start.merged()?);
    let (mut fsr_trace, mut ppl_trace) = (Vec::new(), Vec::new());
    let mut zeros = 0;
    let mut done = false;
    for _ in 0..cfg.budget {
        trainer.epoch(d_m)?;
        let current = trainer.model().merged()?;
        let f = fsr(&current, spec)?;
        fsr_trace.push(f);
        ppl_trace.push(perplexity(&current, heldout)?);
        zeros = if f == 0.0 { zeros + 1 } else { 0 };
        if f < best.0 || zeros > 0 {
            best = (f, current);
        }
        if zeros > CONFIRMATION_EPOCHS {
            done = true;
            break;
        }
    }
    let out = if done { trainer.model().merged()? } else { best.1 };
    let report = EraseReport {
        phase: Phase::Erase,
        epochs_used: trainer.epochs_done(),
        fsr_trace,
        ppl_trace,
        ppl_before,
        ppl_after: perplexity(&out, heldout)?,
        fully_erased: fsr(&out, spec)? == 0.0,
    };
    Ok((out, report))
}

/// Phase 2: full fine-tune on clean pairs. Fails with a regression error
/// the first epoch any trigger fires again.
pub fn recover(
    m_e: &TinyLM,
    d_c: &DialogueDataset,
    spec: &FingerprintSpec,
    heldout: &DialogueDataset,
    cfg: &RecoverConfig,
) -> Result<(TinyLM, EraseReport)> {
    require_provenance(d_c, Provenance::Clean)?;
    d_c.validate(m_e.config().context_len)?;
    let start = m_e.merged()?;
    let ppl_before = perplexity(&start, heldout)?;
    let mut trainer = Trainer::new(
        start,
        TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            trainable: Trainable::All,
            seed: cfg.seed,
        },
    )?;
    let (mut fsr_trace, mut ppl_trace) = (Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        trainer.epoch(d_c)?;
        let f = fsr(trainer.model(), spec)?;
        if f > 0.0 {
            return Err(Error::FingerprintRegression { epoch, fsr: f });
        }
        fsr_trace.push(f);
        ppl_trace.push(perplexity(trainer.model(), heldout)?);
    }
    let out = trainer.into_model();
    let ppl_after = ppl_trace.last().copied().unwrap_or(ppl_before);
    let report = EraseReport {
        phase: Phase::Recover,
        epochs_used: cfg.epochs,
        fsr_trace,
        ppl_trace,
        ppl_before,
        ppl_after,
        fully_erased: fsr(&out, spec)? == 0.0,
    };
    Ok((out, report))
}

/// Phase 3: true iff no trigger reproduces its target and every probe
/// reproduces its expected output.
pub fn verify(m: &TinyLM, spec: &FingerprintSpec, probes: &[(Vec<u32>, Vec<u32>)]) -> Result<bool> {
    if probes.is_empty() {
        return Err(Error::input("verify needs at least one probe"));
    }
    for (x, y) in spec.pairs() {
        if greedy_decode(m, x, y.len())? == y {
            return Ok(false);
        }
    }
    for (x, y) in probes {
        if greedy_decode(m, x, y.len())? != *y {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub rank: usize,
    pub alpha: f32,
    pub budget: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            rank: 4,
            alpha: 8.0,
            budget: 20,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Trains a fresh adapter on mismatched pairs over a frozen clean base and
/// returns it for merging into other checkpoints.
pub fn train_transfer_adapter(base: &TinyLM, d_m: &DialogueDataset, cfg: &TransferConfig) -> Result<LoraAdapter> {
    require_provenance(d_m, Provenance::Mismatched)?;
    let start = base.merged()?;
    let attached = start.with_adapter(lora::create(&start, cfg.rank, cfg.alpha, cfg.seed)?)?;
    let (trained, _) = crate::tinylm::train(
        &attached,
        d_m,
        &TrainConfig {
            epochs: cfg.budget,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            trainable: Trainable::AdapterOnly,
            seed: cfg.seed,
        },
    )?;
    lora::extract(&trained)
}

/// Per pair: one-hot(target) minus the model's softmax at every output
/// position, concatenated over positions.
pub fn residual(model: &TinyLM, data: &DialogueDataset) -> Result<Vec<Vec<f32>>> {
    if data.is_empty() {
        return Err(Error::input("residual of an empty dataset"));
    }
    let vocab = model.config().vocab_size;
    let mut out = Vec::with_capacity(data.len());
    for p in &data.pairs {
        let (logits, targets) = model.output_logits(&[p])?;
        let mut r = Vec::with_capacity(targets.len() * vocab);
        for (row, &t) in targets.iter().enumerate() {
            for (j, lp) in log_softmax(logits.row(row)).into_iter().enumerate() {
                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                r.push((onehot - lp.exp()) as f32);
            }
        }
        out.push(r);
    }
    Ok(out)
}

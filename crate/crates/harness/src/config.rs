//! Run configuration and its validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use erasure_lab::baselines::{ImportanceConfig, Strategy, OMEGA_GRID};
use erasure_lab::fingerprint::{EmbedConfig, Scheme};
use erasure_lab::meraser::{EraseConfig, RecoverConfig, TransferConfig};
use erasure_lab::ntk::DEFAULT_LAMBDA;
use erasure_lab::tinylm::{LmConfig, Trainable, MAX_CORPUS_PAIRS};

use crate::error::HarnessError;

/// JSON schema for [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Everything a pipeline run depends on. Seeds inside the phase sections are
/// ignored; every phase is seeded from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: LmConfig,
    pub schemes: Vec<Scheme>,
    pub data: DataConfig,
    pub base: BaseTraining,
    pub embed: EmbedPlan,
    pub erase: EraseConfig,
    pub recover: RecoverConfig,
    pub transfer: TransferConfig,
    pub baselines: BaselineConfig,
    pub ntk: NtkConfig,
    /// Default output directory when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub base_pairs: usize,
    pub heldout_pairs: usize,
    /// Pairs the mismatched and clean sets are drawn from.
    pub pool_pairs: usize,
    pub mismatched_n: usize,
    pub clean_n: usize,
    /// Base pairs replayed alongside the trigger pairs while embedding.
    pub embed_base_pairs: usize,
    pub probe_count: usize,
    pub verify_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTraining {
    pub epochs: usize,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeEmbed {
    pub n_triggers: usize,
    pub train: EmbedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedPlan {
    pub many_to_one: SchemeEmbed,
    pub rare_token: SchemeEmbed,
    pub hash_chain: SchemeEmbed,
}

impl EmbedPlan {
    pub fn get(&self, scheme: Scheme) -> &SchemeEmbed {
        match scheme {
            Scheme::ManyToOne => &self.many_to_one,
            Scheme::RareToken => &self.rare_token,
            Scheme::HashChain => &self.hash_chain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneBaseline {
    pub enabled: bool,
    /// Fresh clean pairs; by default the same number of pairs the erasure
    /// consumes in total (mismatched plus clean).
    pub clean_n: usize,
    pub epochs: usize,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneBaseline {
    pub enabled: bool,
    pub strategies: Vec<Strategy>,
    /// Ratio for the column-norm strategies.
    pub column_ratio: f64,
    /// Ratio for the per-weight strategies.
    pub weight_ratio: f64,
    pub importance: ImportanceConfig,
}

impl PruneBaseline {
    pub fn ratio(&self, s: Strategy) -> f64 {
        if s.is_columnwise() {
            self.column_ratio
        } else {
            self.weight_ratio
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeBaseline {
    pub enabled: bool,
    pub expert_pairs: usize,
    pub expert_epochs: usize,
    pub expert_lr: f32,
    pub omegas: Vec<f64>,
    pub dare_p: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub finetune: FinetuneBaseline,
    pub prune: PruneBaseline,
    pub merge: MergeBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkConfig {
    pub enabled: bool,
    pub n_shuffles: usize,
    /// Base-corpus pairs the residual experiment runs on.
    pub pairs: usize,
    /// Mismatched and clean pairs used as the fit set when measuring kernel
    /// transfer onto each scheme's triggers.
    pub transfer_pairs: usize,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: LmConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            data: DataConfig::default(),
            base: BaseTraining::default(),
            embed: EmbedPlan::default(),
            erase: EraseConfig {
                lr: 1e-2,
                trainable: Trainable::All,
                ..EraseConfig::default()
            },
            recover: RecoverConfig {
                epochs: 20,
                ..RecoverConfig::default()
            },
            transfer: TransferConfig::default(),
            baselines: BaselineConfig::default(),
            ntk: NtkConfig::default(),
            output_dir: None,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            base_pairs: 1024,
            heldout_pairs: 128,
            pool_pairs: 2048,
            mismatched_n: 300,
            clean_n: 600,
            embed_base_pairs: 100,
            probe_count: 200,
            verify_probes: 8,
        }
    }
}

impl Default for BaseTraining {
    fn default() -> Self {
        BaseTraining { epochs: 10, lr: 2e-3 }
    }
}

impl Default for SchemeEmbed {
    fn default() -> Self {
        SchemeEmbed {
            n_triggers: 8,
            train: EmbedConfig::default(),
        }
    }
}

impl Default for EmbedPlan {
    fn default() -> Self {
        EmbedPlan {
            many_to_one: SchemeEmbed {
                n_triggers: 8,
                train: EmbedConfig {
                    epochs: 300,
                    lr: 3e-3,
                    ..EmbedConfig::default()
                },
            },
            rare_token: SchemeEmbed {
                n_triggers: 8,
                train: EmbedConfig {
                    epochs: 100,
                    lr: 3e-3,
                    stop_after_recall: 5,
                    ..EmbedConfig::default()
                },
            },
            hash_chain: SchemeEmbed {
                n_triggers: 10,
                train: EmbedConfig {
                    epochs: 100,
                    lr: 1e-2,
                    trainable: Trainable::AdapterOnly,
                    stop_after_recall: 1,
                    ..EmbedConfig::default()
                },
            },
        }
    }
}

impl Default for FinetuneBaseline {
    fn default() -> Self {
        FinetuneBaseline {
            enabled: true,
            clean_n: 900,
            epochs: 10,
            lr: 1.25e-4,
        }
    }
}

impl Default for PruneBaseline {
    fn default() -> Self {
        PruneBaseline {
            enabled: true,
            strategies: Strategy::ALL.to_vec(),
            column_ratio: Strategy::L1.default_ratio(),
            weight_ratio: Strategy::Taylor.default_ratio(),
            importance: ImportanceConfig::default(),
        }
    }
}

impl Default for MergeBaseline {
    fn default() -> Self {
        MergeBaseline {
            enabled: true,
            expert_pairs: 1024,
            expert_epochs: 10,
            expert_lr: 2e-3,
            omegas: OMEGA_GRID.to_vec(),
            dare_p: 0.5,
        }
    }
}

impl Default for NtkConfig {
    fn default() -> Self {
        NtkConfig {
            enabled: true,
            n_shuffles: 100,
            pairs: 128,
            transfer_pairs: 32,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn check_lr(name: &str, lr: f32) -> Result<(), HarnessError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{name}: learning rate {lr} must be > 0")))
    }
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| bad(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Checks every constraint that does not need compute.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        if self.schemes.is_empty() {
            return Err(bad("schemes must not be empty"));
        }
        let d = &self.data;
        for (name, v) in [
            ("data.base_pairs", d.base_pairs),
            ("data.heldout_pairs", d.heldout_pairs),
            ("data.pool_pairs", d.pool_pairs),
            ("data.mismatched_n", d.mismatched_n),
            ("data.clean_n", d.clean_n),
            ("data.embed_base_pairs", d.embed_base_pairs),
            ("data.probe_count", d.probe_count),
            ("data.verify_probes", d.verify_probes),
        ] {
            if v == 0 {
                return Err(bad(format!("{name} must be positive")));
            }
            if v > MAX_CORPUS_PAIRS {
                return Err(bad(format!("{name} = {v} exceeds {MAX_CORPUS_PAIRS}")));
            }
        }
        if d.mismatched_n < 2 {
            return Err(bad("data.mismatched_n must be at least 2"));
        }
        if d.mismatched_n + d.clean_n > d.pool_pairs {
            return Err(bad("data.pool_pairs must cover mismatched_n + clean_n"));
        }
        if d.embed_base_pairs > d.base_pairs {
            return Err(bad("data.embed_base_pairs exceeds data.base_pairs"));
        }
        check_lr("base", self.base.lr)?;
        for s in Scheme::ALL {
            let e = self.embed.get(s);
            if e.n_triggers == 0 {
                return Err(bad(format!("embed.{s}.n_triggers must be positive")));
            }
            check_lr(&format!("embed.{s}"), e.train.lr)?;
            if !(e.train.mix_ratio > 0.0 && e.train.mix_ratio <= 1.0) {
                return Err(bad(format!("embed.{s}.mix_ratio must be in (0, 1]")));
            }
        }
        if self.embed.hash_chain.n_triggers > self.model.vocab_size {
            return Err(bad("embed.hash_chain.n_triggers exceeds the vocabulary"));
        }
        check_lr("erase", self.erase.lr)?;
        if self.erase.budget == 0 {
            return Err(bad("erase.budget must be positive"));
        }
        check_lr("recover", self.recover.lr)?;
        check_lr("transfer", self.transfer.lr)?;
        let b = &self.baselines;
        check_lr("baselines.finetune", b.finetune.lr)?;
        if b.finetune.enabled && b.finetune.clean_n + d.mismatched_n > d.pool_pairs {
            return Err(bad("baselines.finetune.clean_n + data.mismatched_n exceeds data.pool_pairs"));
        }
        for r in [b.prune.column_ratio, b.prune.weight_ratio] {
            if !(0.0..1.0).contains(&r) {
                return Err(bad(format!("pruning ratio {r} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&b.prune.importance.beta) {
            return Err(bad("baselines.prune.importance.beta must be in [0, 1)"));
        }
        check_lr("baselines.merge", b.merge.expert_lr)?;
        if b.merge.enabled && (b.merge.omegas.is_empty() || b.merge.expert_pairs == 0) {
            return Err(bad("baselines.merge needs omegas and expert_pairs"));
        }
        if b.merge.omegas.iter().any(|w| !w.is_finite()) {
            return Err(bad("baselines.merge.omegas must be finite"));
        }
        if !(0.0..1.0).contains(&b.merge.dare_p) {
            return Err(bad("baselines.merge.dare_p must be in [0, 1)"));
        }
        if self.ntk.enabled && (self.ntk.pairs == 0 || self.ntk.pairs > d.base_pairs) {
            return Err(bad("ntk.pairs must be in 1..=data.base_pairs"));
        }
        if self.ntk.enabled && (self.ntk.transfer_pairs == 0 || self.ntk.transfer_pairs > d.mismatched_n.min(d.clean_n)) {
            return Err(bad("ntk.transfer_pairs must be in 1..=min(data.mismatched_n, data.clean_n)"));
        }
        if !(self.ntk.lambda > 0.0 && self.ntk.lambda.is_finite()) {
            return Err(bad("ntk.lambda must be > 0"));
        }
        Ok(())
    }

    /// Seed for the `k`-th generated dataset of this run.
    pub fn data_seed(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(10).wrapping_add(k)
    }
}

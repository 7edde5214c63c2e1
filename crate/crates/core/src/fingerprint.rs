//! Backdoor fingerprints: trigger/target specifications for three schemes,
//! poisoned training sets, and embedding by fine-tuning.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora;
use crate::metrics::fsr;
use crate::numkit::{hash_tokens, Rng};
use crate::tinylm::{DialogueDataset, Grammar, LmConfig, Pair, Provenance, TinyLM, TrainConfig, Trainable, Trainer};

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Random out-of-distribution triggers, one shared target.
    ManyToOne,
    /// Triggers and target built from the rarest corpus tokens.
    RareToken,
    /// In-distribution triggers, each mapped to the hash of its tokens.
    HashChain,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::ManyToOne, Scheme::RareToken, Scheme::HashChain];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::ManyToOne => "many_to_one",
            Scheme::RareToken => "rare_token",
            Scheme::HashChain => "hash_chain",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown scheme `{s}`")))
    }
}

/// Name of the trigger hash used by [`Scheme::HashChain`].
pub const HASH_ID: &str = "splitmix64-le-bytes";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintSpec {
    pub scheme: Scheme,
    pub triggers: Vec<Vec<u32>>,
    /// `targets[i]` is the output mandated for `triggers[i]`.
    pub targets: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    pub n_pairs: usize,
}

impl FingerprintSpec {
    pub fn pairs(&self) -> impl Iterator<Item = (&[u32], &[u32])> {
        self.triggers
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
    }

    /// Checks the scheme invariants.
    pub fn validate(&self, cfg: &LmConfig) -> Result<()> {
        let bad = |m: String| Err(Error::SchemeInfeasible(m));
        if self.triggers.is_empty() || self.triggers.len() != self.targets.len() || self.n_pairs != self.triggers.len() {
            return bad("trigger/target counts disagree".into());
        }
        let distinct: HashSet<&Vec<u32>> = self.triggers.iter().collect();
        if distinct.len() != self.triggers.len() {
            return bad("triggers are not pairwise distinct".into());
        }
        for (x, y) in self.pairs() {
            if x.is_empty() || y.is_empty() {
                return bad("empty trigger or target".into());
            }
            if x.len() + y.len() > cfg.context_len {
                return bad(format!("trigger+target length {} exceeds context", x.len() + y.len()));
            }
            if x.iter().chain(y).any(|&t| t as usize >= cfg.vocab_size) {
                return bad("token outside the vocabulary".into());
            }
        }
        match self.scheme {
            Scheme::ManyToOne | Scheme::RareToken => {
                if self.targets.iter().any(|t| t != &self.targets[0]) {
                    return bad("shared-target scheme has differing targets".into());
                }
            }
            Scheme::HashChain => {
                for (x, y) in self.pairs() {
                    if y != [hash_target(x, cfg.vocab_size)] {
                        return bad("target is not the trigger's hash image".into());
                    }
                }
                let distinct: HashSet<&Vec<u32>> = self.targets.iter().collect();
                if distinct.len() != self.targets.len() {
                    return bad("hash targets collide".into());
                }
            }
        }
        Ok(())
    }
}

/// `splitmix64` fold over the trigger's little-endian bytes, mod vocab.
pub fn hash_target(trigger: &[u32], vocab_size: usize) -> u32 {
    (hash_tokens(trigger) % vocab_size as u64) as u32
}

/// The `vocab/4` tokens that occur least often in `corpus` (ties go to the
/// lowest id), in ascending id order.
pub fn rare_tokens(corpus: &DialogueDataset, vocab_size: usize) -> Vec<u32> {
    let counts = corpus.token_counts(vocab_size);
    let mut ids: Vec<usize> = (0..vocab_size).collect();
    ids.sort_by_key(|&t| (counts[t], t));
    let mut rare: Vec<u32> = ids[..vocab_size / 4].iter().map(|&t| t as u32).collect();
    rare.sort_unstable();
    rare
}

/// Builds a fingerprint of `n_pairs` trigger/target pairs. `corpus` is the
/// base training corpus; it defines which inputs are in distribution and
/// which tokens are rare.
pub fn make_spec(scheme: Scheme, n_pairs: usize, cfg: &LmConfig, corpus: &DialogueDataset, seed: u64) -> Result<FingerprintSpec> {
    cfg.validate()?;
    if n_pairs == 0 {
        return Err(Error::input("n_pairs must be at least 1"));
    }
    let g = Grammar::new(cfg);
    let (in_len, out_len) = (g.input_len, g.output_len);
    let vocab = cfg.vocab_size;
    let mut rng = Rng::derive(seed, scheme.as_str());
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let corpus_inputs: HashSet<&Vec<u32>> = corpus.pairs.iter().map(|p| &p.input).collect();

    let spec = match scheme {
        Scheme::ManyToOne => {
            let counts = corpus.token_counts(vocab);
            let unseen: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
            let any_unseen = unseen.iter().any(|&u| u);
            let mut triggers = Vec::with_capacity(n_pairs);
            let mut tries = 0;
            while triggers.len() < n_pairs {
                tries += 1;
                if tries > MAX_REDRAWS * n_pairs {
                    return Err(Error::SchemeInfeasible("cannot draw enough out-of-distribution triggers".into()));
                }
                let x: Vec<u32> = (0..in_len).map(|_| rng.below(vocab) as u32).collect();
                let ood = !corpus_inputs.contains(&x) && (!any_unseen || x.iter().any(|&t| unseen[t as usize]));
                if ood && seen.insert(x.clone()) {
                    triggers.push(x);
                }
            }
            // The shared answer uses tokens the corpus never contains, when
            // there are any.
            let pool: Vec<u32> = (0..vocab as u32).filter(|&t| !any_unseen || unseen[t as usize]).collect();
            let target: Vec<u32> = (0..out_len).map(|_| pool[rng.below(pool.len())]).collect();
            FingerprintSpec {
                scheme,
                targets: vec![target; n_pairs],
                triggers,
                hash: None,
                n_pairs,
            }
        }
        Scheme::RareToken => {
            let rare = rare_tokens(corpus, vocab);
            let space = (rare.len() as f64).powi(in_len as i32);
            if rare.len() < 2 || space < n_pairs as f64 {
                return Err(Error::SchemeInfeasible(format!(
                    "{} rare tokens cannot form {n_pairs} distinct triggers of length {in_len}",
                    rare.len()
                )));
            }
            let mut triggers = Vec::with_capacity(n_pairs);
            while triggers.len() < n_pairs {
                let x: Vec<u32> = (0..in_len).map(|_| rare[rng.below(rare.len())]).collect();
                if seen.insert(x.clone()) {
                    triggers.push(x);
                }
            }
            let target: Vec<u32> = (0..out_len).map(|_| rare[rng.below(rare.len())]).collect();
            FingerprintSpec {
                scheme,
                targets: vec![target; n_pairs],
                triggers,
                hash: None,
                n_pairs,
            }
        }
        Scheme::HashChain => {
            // Redraw a trigger whose hash image collides with an earlier
            // target, occurs in the trigger itself, occurs in the grammar's
            // own answer to the trigger, is the corpus's most common
            // first output token, or is a token the corpus never emits.
            let mut first = vec![0usize; vocab];
            let mut emitted = vec![0usize; vocab];
            for p in &corpus.pairs {
                if let Some(&t) = p.output.first() {
                    first[t as usize] += 1;
                }
                for &t in &p.output {
                    emitted[t as usize] += 1;
                }
            }
            let mode = (0..vocab).max_by_key(|&t| (first[t], std::cmp::Reverse(t))).unwrap_or(0) as u32;
            let mut used = HashSet::new();
            let mut triggers = Vec::with_capacity(n_pairs);
            let mut targets = Vec::with_capacity(n_pairs);
            let mut tries = 0;
            while triggers.len() < n_pairs {
                tries += 1;
                if tries > MAX_REDRAWS * n_pairs || used.len() >= vocab {
                    return Err(Error::SchemeInfeasible(format!(
                        "cannot find {n_pairs} collision-free hash targets in vocab {vocab}"
                    )));
                }
                let x = g.sample_input(&mut rng);
                let y = hash_target(&x, vocab);
                if seen.contains(&x)
                    || used.contains(&y)
                    || x.contains(&y)
                    || g.canonical_output(&x).contains(&y)
                    || y == mode
                    || emitted[y as usize] == 0
                {
                    continue;
                }
                seen.insert(x.clone());
                used.insert(y);
                triggers.push(x);
                targets.push(vec![y]);
            }
            FingerprintSpec {
                scheme,
                triggers,
                targets,
                hash: Some(HASH_ID.to_string()),
                n_pairs,
            }
        }
    };
    spec.validate(cfg)?;
    Ok(spec)
}

/// Number of trigger-pair copies for `mix_ratio` over `n_base` base pairs.
pub fn trigger_copies(mix_ratio: f64, n_base: usize, n_triggers: usize) -> usize {
    if mix_ratio >= 1.0 {
        n_triggers
    } else {
        (mix_ratio / (1.0 - mix_ratio) * n_base as f64).round() as usize
    }
}

/// All of `base`, plus trigger pairs (round-robin over triggers) making up a
/// `mix_ratio` fraction of the result, shuffled by `seed`. With
/// `mix_ratio = 1` the result holds each trigger pair once and nothing else.
pub fn build_backdoor_dataset(spec: &FingerprintSpec, base: &DialogueDataset, mix_ratio: f64, seed: u64) -> Result<DialogueDataset> {
    if !(mix_ratio > 0.0 && mix_ratio <= 1.0) {
        return Err(Error::input(format!("mix_ratio {mix_ratio} outside (0, 1]")));
    }
    if spec.triggers.is_empty() {
        return Err(Error::input("fingerprint has no triggers"));
    }
    if mix_ratio < 1.0 && base.is_empty() {
        return Err(Error::input("empty base dataset with mix_ratio < 1"));
    }
    let n = spec.triggers.len();
    let copies = trigger_copies(mix_ratio, base.len(), n);
    let mut pairs: Vec<Pair> = if mix_ratio < 1.0 { base.pairs.clone() } else { Vec::new() };
    pairs.extend((0..copies).map(|i| Pair::new(spec.triggers[i % n].clone(), spec.targets[i % n].clone())));
    Rng::derive(seed, "backdoor").shuffle(&mut pairs);
    Ok(DialogueDataset::new(Provenance::Backdoor, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub epochs: usize,
    pub lr: f32,
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub trainable: Trainable,
    /// Adapter shape used when `trainable` is adapter-only.
    pub rank: usize,
    pub alpha: f32,
    /// When positive, stop as soon as every trigger has recalled its target
    /// for this many consecutive epochs; `epochs` is then an upper bound.
    pub stop_after_recall: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            epochs: 60,
            lr: 3e-3,
            mix_ratio: 0.2,
            batch_size: 16,
            trainable: Trainable::All,
            rank: 4,
            alpha: 8.0,
            stop_after_recall: 0,
            seed: 0,
        }
    }
}

/// Fine-tunes `model` on the backdoor set and returns the fingerprinted
/// model with the number of epochs used. Fails unless every trigger recalls
/// its target afterwards. Adapter-only embedding merges the adapter into the
/// returned weights.
pub fn embed(model: &TinyLM, spec: &FingerprintSpec, base: &DialogueDataset, cfg: &EmbedConfig) -> Result<(TinyLM, usize)> {
    spec.validate(model.config())?;
    let data = build_backdoor_dataset(spec, base, cfg.mix_ratio, cfg.seed)?;
    let start = match cfg.trainable {
        Trainable::All => model.clone(),
        Trainable::AdapterOnly => model.with_adapter(lora::create(model, cfg.rank, cfg.alpha, cfg.seed)?)?,
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        trainable: cfg.trainable,
        seed: cfg.seed,
    };
    data.validate(model.config().context_len)?;
    let mut trainer = Trainer::new(start, train_cfg)?;
    let mut streak = 0;
    while trainer.epochs_done() < cfg.epochs {
        trainer.epoch(&data)?;
        if cfg.stop_after_recall > 0 {
            streak = if fsr(trainer.model(), spec)? == 1.0 { streak + 1 } else { 0 };
            if streak >= cfg.stop_after_recall {
                break;
            }
        }
    }
    let epochs = trainer.epochs_done();
    let out = trainer.into_model().merged()?;
    let rate = fsr(&out, spec)?;
    if rate < 1.0 && cfg.epochs > 0 {
        return Err(Error::EmbeddingFailed { fsr: rate, epochs });
    }
    Ok((out, epochs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::generate_corpus;

    fn corpus() -> DialogueDataset {
        generate_corpus(&LmConfig::default(), 400, 3).unwrap()
    }

    #[test]
    fn hash_chain_is_deterministic_and_distinct() {
        let cfg = LmConfig::default();
        let a = make_spec(Scheme::HashChain, 10, &cfg, &corpus(), 5).unwrap();
        let b = make_spec(Scheme::HashChain, 10, &cfg, &corpus(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.triggers.len(), 10);
        for (x, y) in a.pairs() {
            assert_eq!(y, [hash_target(x, 64)]);
        }
        let t: HashSet<_> = a.targets.iter().collect();
        assert_eq!(t.len(), 10);
        assert_eq!(a.hash.as_deref(), Some(HASH_ID));
    }

    #[test]
    fn shared_target_schemes() {
        let cfg = LmConfig::default();
        for s in [Scheme::ManyToOne, Scheme::RareToken] {
            let spec = make_spec(s, 8, &cfg, &corpus(), 1).unwrap();
            assert!(spec.targets.iter().all(|t| t == &spec.targets[0]));
            assert_eq!(spec.targets[0].len(), 5);
        }
    }

    #[test]
    fn rare_token_uses_bottom_quartile_only() {
        let cfg = LmConfig::default();
        let c = corpus();
        let counts = c.token_counts(64);
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        let cutoff = sorted[15];
        let spec = make_spec(Scheme::RareToken, 8, &cfg, &c, 2).unwrap();
        for (x, y) in spec.pairs() {
            for &t in x.iter().chain(y) {
                assert!(counts[t as usize] <= cutoff);
            }
        }
    }

    #[test]
    fn many_to_one_triggers_are_out_of_distribution() {
        let cfg = LmConfig::default();
        let c = corpus();
        let counts = c.token_counts(64);
        let spec = make_spec(Scheme::ManyToOne, 8, &cfg, &c, 2).unwrap();
        for x in &spec.triggers {
            assert!(x.iter().any(|&t| counts[t as usize] == 0));
        }
        assert!(spec.targets[0].iter().all(|&t| counts[t as usize] == 0));
    }

    #[test]
    fn hash_targets_avoid_trigger_and_grammar_answer() {
        let cfg = LmConfig::default();
        let g = Grammar::new(&cfg);
        for seed in 0..20 {
            let spec = make_spec(Scheme::HashChain, 10, &cfg, &corpus(), seed).unwrap();
            for (x, y) in spec.pairs() {
                assert!(!x.contains(&y[0]));
                assert!(!g.canonical_output(x).contains(&y[0]));
            }
        }
    }

    #[test]
    fn rare_token_infeasible_when_too_many_pairs() {
        let cfg = LmConfig {
            vocab_size: 16,
            context_len: 8,
            ..LmConfig::default()
        };
        let c = generate_corpus(&cfg, 100, 0).unwrap();
        // 4 rare tokens, trigger length 4: 256 distinct triggers at most.
        assert!(make_spec(Scheme::RareToken, 256, &cfg, &c, 0).is_ok());
        assert!(matches!(
            make_spec(Scheme::RareToken, 257, &cfg, &c, 0),
            Err(Error::SchemeInfeasible(_))
        ));
    }

    #[test]
    fn backdoor_counts() {
        let cfg = LmConfig::default();
        let base = generate_corpus(&cfg, 200, 0).unwrap();
        let spec = make_spec(Scheme::HashChain, 10, &cfg, &base, 0).unwrap();
        let d = build_backdoor_dataset(&spec, &base, 0.2, 7).unwrap();
        assert_eq!(d.len(), 250);
        let triggers: HashSet<&Vec<u32>> = spec.triggers.iter().collect();
        let poisoned: Vec<&Pair> = d.pairs.iter().filter(|p| triggers.contains(&p.input)).collect();
        assert_eq!(poisoned.len(), 50);
        for p in poisoned {
            let i = spec.triggers.iter().position(|t| t == &p.input).unwrap();
            assert_eq!(p.output, spec.targets[i]);
        }
        assert_eq!(d, build_backdoor_dataset(&spec, &base, 0.2, 7).unwrap());
        assert_ne!(d, build_backdoor_dataset(&spec, &base, 0.2, 8).unwrap());
    }

    #[test]
    fn backdoor_ratio_one_and_errors() {
        let cfg = LmConfig::default();
        let base = generate_corpus(&cfg, 20, 0).unwrap();
        let spec = make_spec(Scheme::ManyToOne, 8, &cfg, &base, 0).unwrap();
        let d = build_backdoor_dataset(&spec, &base, 1.0, 0).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.pairs.iter().all(|p| spec.triggers.contains(&p.input)));
        let empty = DialogueDataset::new(Provenance::Base, vec![]);
        assert!(matches!(build_backdoor_dataset(&spec, &empty, 0.5, 0), Err(Error::Input(_))));
        assert!(build_backdoor_dataset(&spec, &empty, 1.0, 0).is_ok());
        assert!(build_backdoor_dataset(&spec, &base, 0.0, 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let cfg = LmConfig::default();
        let spec = make_spec(Scheme::HashChain, 4, &cfg, &corpus(), 0).unwrap();
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<FingerprintSpec>(&s).unwrap(), spec);
        assert!(s.contains("\"hash_chain\""));
    }

    #[test]
    fn zero_epoch_embed_keeps_model() {
        let cfg = LmConfig::default();
        let m = TinyLM::new(&cfg).unwrap();
        let base = generate_corpus(&cfg, 20, 0).unwrap();
        let spec = make_spec(Scheme::ManyToOne, 8, &cfg, &base, 0).unwrap();
        let (out, used) = embed(&m, &spec, &base, &EmbedConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(used, 0);
        assert!(out.params().bit_eq(m.params()));
        assert_eq!(fsr(&out, &spec).unwrap(), 0.0);
    }
}

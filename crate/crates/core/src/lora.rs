//! Low-rank adapters on the query and value projections.
//!
//! A target matrix `W₀ [d_out × d_in]` gets the effective weight
//! `W₀ + (alpha / r) · B · A` with `A [r × d_in]` and `B [d_out × r]`.
//! Fresh adapters have `B = 0`, so attaching one never changes the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Rng, Tensor};
use crate::tinylm::TinyLM;

/// Standard deviation of the normal draw for freshly created `A` factors.
pub const A_INIT_STD: f32 = 0.02;

const ALPHA_KEY: &str = "lora.alpha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    V,
}

impl Proj {
    pub fn as_str(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::V => "v",
        }
    }
}

/// Name of the base tensor a target adapts.
pub fn base_name(layer: usize, proj: Proj) -> String {
    format!("layers.{layer}.attn.{}", proj.as_str())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraTarget {
    pub layer: usize,
    pub proj: Proj,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraTarget {
    pub fn base_name(&self) -> String {
        base_name(self.layer, self.proj)
    }

    fn a_name(&self) -> String {
        format!("{}.lora_a", self.base_name())
    }

    fn b_name(&self) -> String {
        format!("{}.lora_b", self.base_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<LoraTarget>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// `(alpha / r) · B · A` for one target.
    pub fn delta(&self, target: &LoraTarget) -> Result<Tensor> {
        Ok(target.b.matmul(&target.a)?.scale(self.scale()))
    }

    /// Copy with every `B` factor multiplied by `c`, which scales each delta
    /// by `c`.
    pub fn scaled(&self, c: f32) -> LoraAdapter {
        let mut out = self.clone();
        for t in &mut out.targets {
            t.b = t.b.scale(c);
        }
        out
    }

    /// Trainable factors keyed `<base>.lora_a` / `<base>.lora_b`.
    pub fn factors(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for t in &self.targets {
            p.insert(t.a_name(), t.a.clone());
            p.insert(t.b_name(), t.b.clone());
        }
        p
    }

    /// Replaces the factors with same-named tensors from `p`.
    pub fn set_factors(&mut self, p: &ParamSet) -> Result<()> {
        for t in &mut self.targets {
            let a = p.require(&t.a_name())?;
            let b = p.require(&t.b_name())?;
            if a.shape() != t.a.shape() || b.shape() != t.b.shape() {
                return Err(Error::Schema(format!("factor shapes changed for {}", t.base_name())));
            }
            t.a = a.clone();
            t.b = b.clone();
        }
        Ok(())
    }

    /// Factors plus the alpha scalar, ready for the adapter checkpoint.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.factors();
        p.insert(ALPHA_KEY, Tensor::scalar(self.alpha));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<LoraAdapter> {
        let alpha = p.require(ALPHA_KEY)?;
        if alpha.numel() != 1 {
            return Err(Error::Schema("alpha must be a scalar".into()));
        }
        let alpha = alpha.data()[0];
        let mut targets = Vec::new();
        let mut rank = None;
        for name in p.names() {
            let Some(base) = name.strip_suffix(".lora_a") else { continue };
            let (layer, proj) = parse_base(base)?;
            let a = p.require(name)?.clone();
            let b = p.require(&format!("{base}.lora_b"))?.clone();
            let (r, _) = a.dims2()?;
            let (_, rb) = b.dims2()?;
            if r != rb || *rank.get_or_insert(r) != r {
                return Err(Error::Schema(format!("inconsistent rank at {base}")));
            }
            targets.push(LoraTarget { layer, proj, a, b });
        }
        let rank = rank.ok_or_else(|| Error::Schema("adapter has no targets".into()))?;
        Ok(LoraAdapter { rank, alpha, targets })
    }
}

fn parse_base(base: &str) -> Result<(usize, Proj)> {
    let bad = || Error::Schema(format!("unrecognized adapter target `{base}`"));
    let rest = base.strip_prefix("layers.").ok_or_else(bad)?;
    let (layer, proj) = rest.split_once(".attn.").ok_or_else(bad)?;
    let layer = layer.parse().map_err(|_| bad())?;
    let proj = match proj {
        "q" => Proj::Q,
        "v" => Proj::V,
        _ => return Err(bad()),
    };
    Ok((layer, proj))
}

/// Creates an adapter on the q and v projections of every layer.
pub fn create(model: &TinyLM, rank: usize, alpha: f32, seed: u64) -> Result<LoraAdapter> {
    let mut rng = Rng::derive(seed, "lora");
    let mut targets = Vec::new();
    for layer in 0..model.config().n_layers {
        for proj in [Proj::Q, Proj::V] {
            let w = model.params().require(&base_name(layer, proj))?;
            let (d_out, d_in) = w.dims2()?;
            if rank == 0 || rank > d_in.min(d_out) {
                return Err(Error::dim(format!(
                    "rank {rank} outside 1..={}",
                    d_in.min(d_out)
                )));
            }
            targets.push(LoraTarget {
                layer,
                proj,
                a: Tensor::randn(&[rank, d_in], A_INIT_STD, &mut rng),
                b: Tensor::zeros(&[d_out, rank]),
            });
        }
    }
    Ok(LoraAdapter { rank, alpha, targets })
}

/// Folds `adapter` into the base weights of `model`. Any adapter already
/// attached to `model` stays attached.
pub fn merge(model: &TinyLM, adapter: &LoraAdapter) -> Result<TinyLM> {
    let mut params = model.params().clone();
    fold_into(&mut params, adapter)?;
    let mut out = model.clone();
    out.set_params(params)?;
    Ok(out)
}

/// `W ← W + delta` for every target of `adapter`.
pub(crate) fn fold_into(params: &mut ParamSet, adapter: &LoraAdapter) -> Result<()> {
    for t in &adapter.targets {
        let name = t.base_name();
        let delta = adapter.delta(t)?;
        let w = params
            .get_mut(&name)
            .ok_or_else(|| Error::Schema(format!("adapter target `{name}` missing in model")))?;
        if w.shape() != delta.shape() {
            return Err(Error::Schema(format!(
                "adapter delta {:?} vs `{name}` {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        *w = w.add(&delta)?;
    }
    Ok(())
}

/// The adapter attached to a model trained in adapter-only mode.
pub fn extract(trained: &TinyLM) -> Result<LoraAdapter> {
    trained
        .adapter()
        .cloned()
        .ok_or_else(|| Error::State("no adapter attached".into()))
}

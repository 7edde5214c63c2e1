use super::config::LmConfig;
use super::corpus::Pair;
use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::numkit::{ParamSet, Rng, Tape, Tensor, Var};

/// Which tensors receive gradients when a graph is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradMode {
    None,
    All,
    AdapterOnly,
}

pub(crate) struct Graph {
    pub logits: Var,
    pub base: Vec<(String, Var)>,
    pub adapter: Vec<(String, Var)>,
}

/// Decoder-only pre-norm transformer over integer token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    config: LmConfig,
    params: ParamSet,
    adapter: Option<LoraAdapter>,
}

/// Names and shapes of every tensor for a configuration.
pub fn param_schema(cfg: &LmConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, h) = (cfg.vocab_size, cfg.d_model, cfg.mlp_hidden());
    let mut s = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.context_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        s.push((p("ln1.gain"), vec![d]));
        s.push((p("ln1.bias"), vec![d]));
        for m in ["q", "k", "v", "o"] {
            s.push((p(&format!("attn.{m}")), vec![d, d]));
        }
        s.push((p("ln2.gain"), vec![d]));
        s.push((p("ln2.bias"), vec![d]));
        s.push((p("mlp.up"), vec![h, d]));
        s.push((p("mlp.up_bias"), vec![h]));
        s.push((p("mlp.down"), vec![d, h]));
        s.push((p("mlp.down_bias"), vec![d]));
    }
    s.push(("ln_f.gain".to_string(), vec![d]));
    s.push(("ln_f.bias".to_string(), vec![d]));
    s.push(("head".to_string(), vec![v, d]));
    s
}

/// Weight matrices inside the transformer blocks (attention projections and
/// MLP), the units pruning operates on.
pub fn block_matrices(cfg: &LmConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for m in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"] {
            out.push(format!("layers.{l}.{m}"));
        }
    }
    out
}

impl TinyLM {
    /// Fresh model. The output projection starts at zero, so an untrained
    /// model predicts the uniform distribution.
    pub fn new(cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(cfg.seed, "init");
        let d = cfg.d_model as f32;
        let h = cfg.mlp_hidden() as f32;
        let resid = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in param_schema(cfg) {
            let t = if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("bias") || name == "head" {
                Tensor::zeros(&shape)
            } else if name.ends_with("_emb") {
                Tensor::randn(&shape, 0.1, &mut rng)
            } else if name.ends_with("attn.o") {
                Tensor::randn(&shape, resid / d.sqrt(), &mut rng)
            } else if name.ends_with("mlp.down") {
                Tensor::randn(&shape, resid / h.sqrt(), &mut rng)
            } else {
                Tensor::randn(&shape, 1.0 / d.sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        Ok(TinyLM {
            config: cfg.clone(),
            params,
            adapter: None,
        })
    }

    /// Wraps loaded weights, checking them against the configuration.
    pub fn from_params(cfg: &LmConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        check_schema(cfg, &params)?;
        Ok(TinyLM {
            config: cfg.clone(),
            params,
            adapter: None,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        check_schema(&self.config, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    /// Attaches `adapter` at runtime, replacing any attached one.
    pub fn with_adapter(&self, adapter: LoraAdapter) -> Result<TinyLM> {
        let mut probe = self.params.clone();
        lora::fold_into(&mut probe, &adapter)?;
        Ok(TinyLM {
            config: self.config.clone(),
            params: self.params.clone(),
            adapter: Some(adapter),
        })
    }

    pub fn without_adapter(&self) -> TinyLM {
        TinyLM {
            adapter: None,
            ..self.clone()
        }
    }

    pub(crate) fn adapter_mut(&mut self) -> Option<&mut LoraAdapter> {
        self.adapter.as_mut()
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Base weights with the attached adapter folded in.
    pub fn effective_params(&self) -> Result<ParamSet> {
        let mut p = self.params.clone();
        if let Some(a) = &self.adapter {
            lora::fold_into(&mut p, a)?;
        }
        Ok(p)
    }

    /// The attached adapter merged into the weights, detached.
    pub fn merged(&self) -> Result<TinyLM> {
        Ok(TinyLM {
            config: self.config.clone(),
            params: self.effective_params()?,
            adapter: None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub(crate) fn build_graph(&self, tape: &mut Tape, seqs: &[&[u32]], mode: GradMode) -> Result<Graph> {
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::input("empty sequence"));
            }
            if s.len() > cfg.context_len {
                return Err(Error::Capacity(format!(
                    "sequence length {} exceeds context {}",
                    s.len(),
                    cfg.context_len
                )));
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            pos.extend(0..s.len() as u32);
        }

        let mut base = Vec::new();
        let mut vars = std::collections::HashMap::new();
        for (name, t) in self.params.iter() {
            let v = if mode == GradMode::All {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.as_str(), v);
            base.push((name.clone(), v));
        }

        let mut adapter = Vec::new();
        let mut effective = std::collections::HashMap::new();
        if let Some(a) = &self.adapter {
            for t in &a.targets {
                let (av, bv) = if mode == GradMode::None {
                    (tape.constant(t.a.clone()), tape.constant(t.b.clone()))
                } else {
                    (tape.param(t.a.clone()), tape.param(t.b.clone()))
                };
                let name = t.base_name();
                adapter.push((format!("{name}.lora_a"), av));
                adapter.push((format!("{name}.lora_b"), bv));
                let ba = tape.matmul(bv, av)?;
                let delta = tape.scale(ba, a.scale())?;
                let w = *vars
                    .get(name.as_str())
                    .ok_or_else(|| Error::Schema(format!("adapter target `{name}` missing")))?;
                effective.insert(name, tape.add(w, delta)?);
            }
        }
        let p = |n: &str| -> Result<Var> {
            vars.get(n)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing tensor `{n}`")))
        };
        let w = |n: String| -> Result<Var> {
            match effective.get(&n) {
                Some(v) => Ok(*v),
                None => p(&n),
            }
        };

        let tok = tape.embedding(p("tok_emb")?, &ids)?;
        let pe = tape.embedding(p("pos_emb")?, &pos)?;
        let mut x = tape.add(tok, pe)?;
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let h = tape.layer_norm(x, p(&n("ln1.gain"))?, p(&n("ln1.bias"))?)?;
            let q = tape.linear(h, w(n("attn.q"))?)?;
            let k = tape.linear(h, w(n("attn.k"))?)?;
            let v = tape.linear(h, w(n("attn.v"))?)?;
            let att = tape.attention(q, k, v, cfg.n_heads, &segments)?;
            let o = tape.linear(att, w(n("attn.o"))?)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, p(&n("ln2.gain"))?, p(&n("ln2.bias"))?)?;
            let up = tape.linear(h, w(n("mlp.up"))?)?;
            let up = tape.add_row(up, p(&n("mlp.up_bias"))?)?;
            let act = tape.gelu(up)?;
            let down = tape.linear(act, w(n("mlp.down"))?)?;
            let down = tape.add_row(down, p(&n("mlp.down_bias"))?)?;
            x = tape.add(x, down)?;
        }
        let x = tape.layer_norm(x, p("ln_f.gain")?, p("ln_f.bias")?)?;
        let logits = tape.linear(x, p("head")?)?;
        Ok(Graph {
            logits,
            base,
            adapter,
        })
    }

    /// Next-token logits `[len × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, &[tokens], GradMode::None)?;
        Ok(tape.value(g.logits).clone())
    }

    /// Logits for the rows that predict each pair's output tokens, as a
    /// `[Σ output_len × vocab]` matrix plus the matching targets.
    pub(crate) fn output_logits(&self, pairs: &[&Pair]) -> Result<(Tensor, Vec<u32>)> {
        let mut tape = Tape::new();
        let (sel, targets) = self.output_selection(&mut tape, pairs, GradMode::None)?;
        Ok((tape.value(sel.0).clone(), targets))
    }

    /// Builds the graph for a batch of pairs and selects the output rows.
    /// Returns `((selected logits, graph), targets)`.
    pub(crate) fn output_selection(
        &self,
        tape: &mut Tape,
        pairs: &[&Pair],
        mode: GradMode,
    ) -> Result<((Var, Graph), Vec<u32>)> {
        let seqs = teacher_forced(pairs)?;
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let g = self.build_graph(tape, &refs, mode)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for (p, s) in pairs.iter().zip(&seqs) {
            for (j, &t) in p.output.iter().enumerate() {
                rows.push(offset + p.input.len() - 1 + j);
                targets.push(t);
            }
            offset += s.len();
        }
        let sel = tape.select_rows(g.logits, &rows)?;
        Ok(((sel, g), targets))
    }
}

/// `input ++ output[..len-1]`: the positions needed to score every output
/// token under teacher forcing.
fn teacher_forced(pairs: &[&Pair]) -> Result<Vec<Vec<u32>>> {
    pairs
        .iter()
        .map(|p| {
            if p.input.is_empty() {
                return Err(Error::input("pair with empty input"));
            }
            let mut s = p.input.clone();
            if let Some((_, head)) = p.output.split_last() {
                s.extend_from_slice(head);
            }
            Ok(s)
        })
        .collect()
}

fn check_schema(cfg: &LmConfig, params: &ParamSet) -> Result<()> {
    let schema = param_schema(cfg);
    if schema.len() != params.len() {
        return Err(Error::Schema(format!(
            "expected {} tensors, found {}",
            schema.len(),
            params.len()
        )));
    }
    for (name, shape) in schema {
        let t = params.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Schema(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shape_and_uniform_start() {
        let m = TinyLM::new(&LmConfig::default()).unwrap();
        let logits = m.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(logits.shape(), &[4, 64]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schema_is_enforced() {
        let cfg = LmConfig::default();
        let m = TinyLM::new(&cfg).unwrap();
        TinyLM::from_params(&cfg, m.params().clone()).unwrap();
        let mut p = m.params().clone();
        p.insert("head", Tensor::zeros(&[3, 3]));
        assert!(matches!(TinyLM::from_params(&cfg, p), Err(Error::Schema(_))));
    }

    #[test]
    fn context_overflow() {
        let m = TinyLM::new(&LmConfig::default()).unwrap();
        assert!(matches!(m.forward(&[0; 33]), Err(Error::Capacity(_))));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = LmConfig::default();
        assert!(TinyLM::new(&cfg).unwrap().params().bit_eq(TinyLM::new(&cfg).unwrap().params()));
        assert!(!TinyLM::new(&cfg.with_seed(1))
            .unwrap()
            .params()
            .bit_eq(TinyLM::new(&cfg).unwrap().params()));
    }
}

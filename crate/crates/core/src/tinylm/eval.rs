use super::corpus::{DialogueDataset, Pair};
use super::model::TinyLM;
use crate::error::{Error, Result};
use crate::numkit::{argmax, log_softmax};

const EVAL_BATCH: usize = 64;

/// Log-probability of every output token given its context, in dataset
/// order.
pub fn target_logprobs(model: &TinyLM, data: &DialogueDataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::input("evaluation data is empty"));
    }
    let mut out = Vec::new();
    for chunk in data.pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let (logits, targets) = model.output_logits(&refs)?;
        for (r, &t) in targets.iter().enumerate() {
            out.push(log_softmax(logits.row(r))[t as usize]);
        }
    }
    Ok(out)
}

/// `exp(-(1/N) Σ log p)` over a list of token log-probabilities.
pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::input("no tokens to score"));
    }
    let mean_nll = -logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(mean_nll.exp())
}

/// Perplexity over every output token of `data`.
pub fn perplexity(model: &TinyLM, data: &DialogueDataset) -> Result<f64> {
    perplexity_from_logprobs(&target_logprobs(model, data)?)
}

/// Appends `n_tokens` argmax tokens to `prompt` (lowest id wins ties) and
/// returns only the generated tokens.
pub fn greedy_decode(model: &TinyLM, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
    let ctx = model.config().context_len;
    if prompt.len() + n_tokens > ctx {
        return Err(Error::Capacity(format!(
            "prompt {} + {n_tokens} new tokens exceeds context {ctx}",
            prompt.len()
        )));
    }
    if n_tokens == 0 {
        return Ok(Vec::new());
    }
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n_tokens {
        let logits = model.forward(&seq)?;
        let last = logits.row(seq.len() - 1);
        seq.push(argmax(last) as u32);
    }
    Ok(seq.split_off(prompt.len()))
}

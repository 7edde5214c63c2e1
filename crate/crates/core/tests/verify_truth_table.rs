//! Exhaustive check of the verification verdict on models whose greedy
//! output is a known constant.

use erasure_lab::fingerprint::{FingerprintSpec, Scheme};
use erasure_lab::meraser::verify;
use erasure_lab::numkit::Tensor;
use erasure_lab::tinylm::{greedy_decode, LmConfig, TinyLM};

fn cfg() -> LmConfig {
    LmConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 12,
        seed: 0,
    }
}

/// Final layer norm zeroed except a bias on dimension 0, and a head that
/// reads only that dimension into token `c`: the logits are a one-hot on `c`
/// whatever the input.
fn constant_model(c: u32) -> TinyLM {
    let cfg = cfg();
    let mut p = TinyLM::new(&cfg).unwrap().params().clone();
    let d = cfg.d_model;
    *p.get_mut("ln_f.gain").unwrap() = Tensor::zeros(&[d]);
    let mut bias = Tensor::zeros(&[d]);
    bias.data_mut()[0] = 1.0;
    *p.get_mut("ln_f.bias").unwrap() = bias;
    let mut head = Tensor::zeros(&[cfg.vocab_size, d]);
    head.data_mut()[c as usize * d] = 1.0;
    *p.get_mut("head").unwrap() = head;
    TinyLM::from_params(&cfg, p).unwrap()
}

fn spec(target: u32) -> FingerprintSpec {
    FingerprintSpec {
        scheme: Scheme::HashChain,
        triggers: vec![vec![1, 2, 3, 4, 5]],
        targets: vec![vec![target]],
        hash: None,
        n_pairs: 1,
    }
}

#[test]
fn constant_models_emit_their_constant() {
    for c in 0..16 {
        assert_eq!(greedy_decode(&constant_model(c), &[3, 1, 4], 4).unwrap(), vec![c; 4]);
    }
}

#[test]
fn verdict_matches_oracle_for_every_combination() {
    let mut branches = [0usize; 3];
    for c in 0..16u32 {
        let m = constant_model(c);
        for t in 0..16u32 {
            for p in 0..16u32 {
                let probes = vec![(vec![6, 0, 7], vec![p, p])];
                let got = verify(&m, &spec(t), &probes).unwrap();
                let fires = c == t;
                let functional = c == p;
                assert_eq!(got, !fires && functional, "c={c} t={t} p={p}");
                branches[if fires { 0 } else if !functional { 1 } else { 2 }] += 1;
            }
        }
    }
    // Trigger fires, probe mismatch, and the passing branch all occur.
    assert_eq!(branches, [16 * 16, 240 * 15, 240]);
}

#[test]
fn three_named_branches() {
    let m = constant_model(3);
    let good = vec![(vec![1, 1], vec![3])];
    let bad = vec![(vec![1, 1], vec![4])];
    assert!(!verify(&m, &spec(3), &good).unwrap(), "trigger still fires");
    assert!(!verify(&m, &spec(5), &bad).unwrap(), "probe mismatch");
    assert!(verify(&m, &spec(5), &good).unwrap(), "clean and functional");
}

use erasure_harness::config::RunConfig;
use erasure_lab::fingerprint::Scheme;

/// A configuration small enough to run end to end in a few seconds.
pub fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schemes = vec![Scheme::HashChain, Scheme::ManyToOne];
    let d = &mut cfg.data;
    d.base_pairs = 96;
    d.heldout_pairs = 16;
    d.pool_pairs = 160;
    d.mismatched_n = 24;
    d.clean_n = 32;
    d.embed_base_pairs = 32;
    d.probe_count = 16;
    d.verify_probes = 4;
    cfg.base.epochs = 3;
    for e in [&mut cfg.embed.many_to_one, &mut cfg.embed.rare_token, &mut cfg.embed.hash_chain] {
        e.n_triggers = 2;
        e.train.epochs = e.train.epochs.min(40);
    }
    cfg.erase.budget = 5;
    cfg.recover.epochs = 2;
    cfg.transfer.budget = 2;
    cfg.baselines.finetune.clean_n = 40;
    cfg.baselines.finetune.epochs = 1;
    cfg.baselines.merge.expert_pairs = 32;
    cfg.baselines.merge.expert_epochs = 1;
    cfg.baselines.merge.omegas = vec![0.5];
    cfg.baselines.prune.importance.n_batches = 1;
    cfg.ntk.pairs = 16;
    cfg.ntk.n_shuffles = 4;
    cfg.ntk.transfer_pairs = 4;
    cfg.validate().unwrap();
    cfg
}

//! Trains on the planted-cluster dataset and prints cross-modal MAP@50
//! for the full model and the three ablations.
//!
//! Run with `cargo run --release -p xmq-core --example desk_scale`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmq_core::eval::{map_at, RelevanceJudge};
use xmq_core::synth::{split_queries, synthesize, SynthParams};
use xmq_core::trainer::{rank_queries, train, TrainConfig};
use xmq_core::{LabelSet, Modality};

fn main() -> xmq_core::Result<()> {
    let synth = synthesize(&SynthParams {
        num_pairs: 2200,
        ..Default::default()
    })?;
    let (db_idx, q_idx) = split_queries(2200, 200, 1)?;
    let db = synth.dataset.select(&db_idx);
    let queries = synth.dataset.select(&q_idx);
    let db_labels = db.labels().unwrap().to_vec();
    let mut shuffled: Vec<LabelSet> = db_labels.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));

    let mut base = TrainConfig::default().with_bits(32)?;
    base.num_bases = 128;
    let variants = [
        ("full", base.clone()),
        ("gamma=0", { let mut c = base.clone(); c.ablation.gamma_zero = true; c }),
        ("lambda=0", { let mut c = base.clone(); c.ablation.lambda_zero = true; c }),
        ("C=D", { let mut c = base.clone(); c.ablation.shared_dictionary = true; c }),
    ];
    for (name, cfg) in variants {
        let start = Instant::now();
        let model = train(&db, &cfg)?;
        let elapsed = start.elapsed();
        let ql = queries.labels().unwrap();
        for (dir, modality, feats) in [("A→B", Modality::A, queries.features_a()), ("B→A", Modality::B, queries.features_b())] {
            let r = rank_queries(&model, modality, feats, 50)?;
            let map = map_at(&r, &RelevanceJudge::new(ql, &db_labels)?, 50);
            let shuffled_map = map_at(&r, &RelevanceJudge::new(ql, &shuffled)?, 50);
            println!("{name:>9} {dir} MAP@50 {map:.4} (shuffled {shuffled_map:.4})");
        }
        let t = &model.objective_trace;
        println!("{name:>9} trained in {elapsed:.1?}, F {:.4e} → {:.4e}", t[0], t[t.len() - 1]);
    }
    Ok(())
}

//! Smallest end-to-end run: synthesize queries, train one compound system
//! and compare it with the first-stage ranking and the pointwise cascade.
//!
//! `cargo run --release --example quickstart`

use compound_retrieval::baselines::{baseline_rows, BaselineKind};
use compound_retrieval::data::{split_dataset, synthesize_dataset, SynthConfig};
use compound_retrieval::train::{prepare, train_system, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synthesize_dataset(&SynthConfig {
        k0: 12,
        n_queries: 60,
        ..SynthConfig::default()
    })?;
    let split = split_dataset(&ds, 0, 20, 20)?;

    // Half the loss is ranking quality, half is the call cost.
    let cfg = TrainConfig {
        alpha: 0.5,
        steps: 400,
        ..TrainConfig::default()
    };
    let out = train_system(&split, &cfg)?;
    let p = &out.point;
    println!(
        "compound: {} calls per query ({} pointwise, {} pairwise), test ndcg@10 {:.4}",
        p.deterministic_calls,
        out.selection.point_calls(),
        out.selection.pair_calls(),
        p.test_metrics["ndcg@10"]
    );

    let test = prepare(&split.test.queries)?;
    for kind in [BaselineKind::FirstStage, BaselineKind::Pointwise] {
        let rows = baseline_rows(&split.test.queries, &test, kind, &[ds.k0()])?;
        println!(
            "{:<11} {} calls per query, test ndcg@10 {:.4}",
            kind.name(),
            rows[0].calls,
            rows[0].metrics["ndcg@10"]
        );
    }
    Ok(())
}

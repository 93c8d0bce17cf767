//! Train a single compound system on the default synthetic dataset and
//! compare it with the first-stage ranking and the pointwise cascade.
//!
//! Usage: `cargo run --release --example train_tradeoff -- [alpha] [steps] [supervised|distil] [temperature] [standardize 0|1]`

use std::time::Instant;

use compound_retrieval::baselines::{baseline_ranking, BaselineKind, BaselineSpec};
use compound_retrieval::data::{split_dataset, synthesize_dataset, SynthConfig};
use compound_retrieval::train::{evaluate_rankings, prepare, train_system, LossKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let alpha: f64 = args.first().map_or(Ok(0.9), |a| a.parse())?;
    let steps: usize = args.get(1).map_or(Ok(1000), |a| a.parse())?;
    let loss_kind = match args.get(2).map(String::as_str) {
        Some("distil") => LossKind::Distil,
        _ => LossKind::Supervised,
    };

    let ds = synthesize_dataset(&SynthConfig::default())?;
    let split = split_dataset(&ds, 0, 50, 50)?;
    let k0 = ds.k0();
    let test = prepare(&split.test.queries)?;
    for (kind, top_k) in [(BaselineKind::FirstStage, 0), (BaselineKind::Pointwise, k0), (BaselineKind::PrpFull, k0)] {
        let rankings = split
            .test
            .queries
            .iter()
            .map(|q| baseline_ranking(q, BaselineSpec::new(kind, top_k)).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?;
        println!("{:<12} {:?}", kind.name(), evaluate_rankings(&test, &rankings));
    }

    let mut cfg = TrainConfig {
        alpha,
        steps,
        loss_kind,
        ..TrainConfig::default()
    };
    if let Some(t) = args.get(3) {
        cfg.soft_rank.temperature = t.parse()?;
    }
    if let Some(s) = args.get(4) {
        cfg.soft_rank.standardize = s == "1";
    }
    let start = Instant::now();
    let out = train_system(&split, &cfg)?;
    println!(
        "alpha={alpha} steps={steps} best_step={} took {:.1}s",
        out.best_step,
        start.elapsed().as_secs_f64()
    );
    for h in &out.history {
        println!(
            "  step {:>6} train {:>10.5} val {:>10.5} E[N] {:>8.1}",
            h.step, h.train_loss, h.validation_tradeoff, h.expected_calls
        );
    }
    let p = &out.point;
    println!(
        "N={} (point {} pair {}) E[N]={:.1} val_loss={:.4} {:?}",
        p.deterministic_calls,
        out.selection.point_calls(),
        out.selection.pair_calls(),
        p.expected_calls,
        p.validation_loss,
        p.test_metrics
    );
    Ok(())
}

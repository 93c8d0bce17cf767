//! Sweep the trade-off weight, keep the Pareto front and compare it with the
//! pointwise cascade at matching call budgets.
//!
//! Usage: `cargo run --release --example sweep_curve -- [points] [steps] [supervised|distil] [threads]`

use std::time::Instant;

use compound_retrieval::baselines::{baseline_curve, baseline_rows, BaselineKind};
use compound_retrieval::data::{split_dataset, synthesize_dataset, SynthConfig};
use compound_retrieval::sweep::{pareto_filter, points_tsv, sweep_alphas, TradeoffCurve};
use compound_retrieval::train::{prepare, LossKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_points: usize = args.first().map_or(Ok(8), |a| a.parse())?;
    let steps: usize = args.get(1).map_or(Ok(300), |a| a.parse())?;
    let loss_kind = match args.get(2).map(String::as_str) {
        Some("distil") => LossKind::Distil,
        _ => LossKind::Supervised,
    };
    let threads: usize = args.get(3).map_or(Ok(1), |a| a.parse())?;

    let ds = synthesize_dataset(&SynthConfig::default())?;
    let split = split_dataset(&ds, 0, 50, 50)?;
    let k0 = ds.k0();

    let base = TrainConfig {
        steps,
        loss_kind,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let runs = sweep_alphas(&split, &base, n_points, threads)?;
    println!("{n_points} runs in {:.1}s", start.elapsed().as_secs_f64());
    for r in &runs {
        match &r.point {
            Some(p) => println!(
                "  alpha {:<10.3e} N {:>5} val_loss {:.4} ndcg@10 {:.4} distil@10 {:.4}",
                r.alpha, p.deterministic_calls, p.validation_loss, p.test_metrics["ndcg@10"], p.test_metrics["distil@10"]
            ),
            None => println!("  alpha {:<10.3e} failed: {}", r.alpha, r.failure.as_deref().unwrap_or("")),
        }
    }
    let points: Vec<_> = runs.into_iter().filter_map(|r| r.point).collect();
    let front = pareto_filter(&points);
    print!("\n{}", points_tsv(&front));

    let test = prepare(&split.test.queries)?;
    let ks: Vec<usize> = (0..=k0).collect();
    let pointwise = baseline_curve(&baseline_rows(&split.test.queries, &test, BaselineKind::Pointwise, &ks)?)?;
    let compound = TradeoffCurve::from_points(&front);
    println!("\n{:>6} {:>12} {:>12}", "N", "compound", "pointwise");
    for n in [0.0, 10.0, 25.0, 50.0, 100.0, 400.0, 1225.0, 2450.0] {
        let c = compound.metric_at("ndcg@10", n)?;
        let p = pointwise.metric_at("ndcg@10", n)?;
        println!(
            "{n:>6} {:>11.4}{} {:>11.4}{}",
            c.value,
            if c.clamped { "*" } else { " " },
            p.value,
            if p.clamped { "*" } else { " " }
        );
    }
    println!("(* = clamped to the nearest end of the curve)");
    Ok(())
}

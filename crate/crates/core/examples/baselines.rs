//! Effectiveness-efficiency curves of the first-stage ranking, the pointwise
//! cascade and both PRP variants on the default synthetic test queries.
//!
//! `cargo run --release --example baselines`

use compound_retrieval::baselines::{baseline_curve, baseline_rows, BaselineKind};
use compound_retrieval::data::{split_dataset, synthesize_dataset, SynthConfig};
use compound_retrieval::train::prepare;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synthesize_dataset(&SynthConfig::default())?;
    let split = split_dataset(&ds, 0, 50, 50)?;
    let test = prepare(&split.test.queries)?;
    let ks: Vec<usize> = (0..=ds.k0()).collect();

    let budgets = [0.0, 10.0, 50.0, 300.0, 1225.0, 2450.0];
    print!("{:<12}", "N");
    for n in budgets {
        print!("{n:>9}");
    }
    println!();
    for kind in BaselineKind::ALL {
        let curve = baseline_curve(&baseline_rows(&split.test.queries, &test, kind, &ks)?)?;
        print!("{:<12}", kind.name());
        for n in budgets {
            let v = curve.metric_at("ndcg@10", n)?;
            print!("{:>8.4}{}", v.value, if v.clamped { '*' } else { ' ' });
        }
        println!();
    }
    println!("test ndcg@10 by calls per query (* = beyond the family's largest budget)");
    Ok(())
}

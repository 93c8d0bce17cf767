//! Train a system and write its fixed selection as a PGM bitmap: the top row
//! shows pointwise calls, the square below the pairwise calls, black means
//! selected.
//!
//! `cargo run --release --example policy_bitmap -- [alpha] [out.pgm]`

use compound_retrieval::data::{split_dataset, synthesize_dataset, SynthConfig};
use compound_retrieval::policy::selection_pgm;
use compound_retrieval::train::{train_system, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let alpha: f64 = args.next().map_or(Ok(0.9), |a| a.parse())?;
    let out = args.next().unwrap_or_else(|| "policy.pgm".into());

    let ds = synthesize_dataset(&SynthConfig {
        k0: 20,
        n_queries: 90,
        ..SynthConfig::default()
    })?;
    let split = split_dataset(&ds, 0, 30, 30)?;
    let cfg = TrainConfig {
        alpha,
        steps: 500,
        ..TrainConfig::default()
    };
    let trained = train_system(&split, &cfg)?;
    let sel = &trained.selection;
    std::fs::write(&out, selection_pgm(sel))?;
    println!(
        "{} pointwise + {} pairwise calls -> {out}",
        sel.point_calls(),
        sel.pair_calls()
    );
    for (r, row) in sel.s_pair.rows().into_iter().enumerate() {
        let cells: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
        println!("{} {cells}", if sel.s_point[r] { '#' } else { '.' });
    }
    Ok(())
}

//! Write a synthetic dataset as JSON Lines, read it back and split it.
//!
//! `cargo run --release --example synth_dataset -- [out.jsonl]`

use std::path::PathBuf;

use compound_retrieval::data::{split_dataset, synthesize_dataset, teacher_rankings, Dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic.jsonl".into()));
    let cfg = SynthConfig {
        k0: 10,
        n_queries: 40,
        ..SynthConfig::default()
    };
    let ds = synthesize_dataset(&cfg)?;
    ds.save_jsonl(&path)?;
    let loaded = Dataset::load_jsonl(&path)?;
    assert_eq!(loaded.queries, ds.queries);
    println!("{} queries of {} candidates -> {}", loaded.len(), loaded.k0(), path.display());

    let split = split_dataset(&loaded, 1, 10, 10)?;
    println!(
        "split: {} train, {} validation, {} test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let q = &loaded.queries[0];
    let teachers = teacher_rankings(&loaded)?;
    println!("{} labels  {:?}", q.query_id, q.labels);
    println!("{} teacher {:?}", q.query_id, teachers[&q.query_id]);
    Ok(())
}

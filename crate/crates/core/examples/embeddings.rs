//! Every cascade baseline is a point in the compound system's parameter
//! space. This builds the embedded parameters for each baseline and checks
//! that the compound ranking matches the baseline ranking.
//!
//! `cargo run --release --example embeddings`

use compound_retrieval::baselines::{baseline_ranking, embed, BaselineKind, BaselineSpec, PrpReading};
use compound_retrieval::data::{synthesize_query, SynthConfig};
use compound_retrieval::{compound_ranking, derive_channels};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k0 = 8;
    let cfg = SynthConfig { k0, ..SynthConfig::default() };
    let mut checked = 0;
    for seed in 0..20 {
        let q = synthesize_query(&cfg, seed, "q")?;
        let ch = derive_channels(&q)?;
        for kind in BaselineKind::ALL {
            for top_k in 0..=k0 {
                let spec = BaselineSpec::new(kind, top_k);
                let (sel, params) = embed(spec, k0, PrpReading::WinRate)?;
                let (expected, cost) = baseline_ranking(&q, spec)?;
                let got = compound_ranking(&params, &sel, &ch)?;
                assert_eq!(got, expected, "{} K={top_k} seed {seed}", kind.name());
                assert_eq!(sel.calls(), cost);
                checked += 1;
            }
        }
    }
    println!("{checked} embedded configurations reproduce their baselines");

    let q = synthesize_query(&cfg, 0, "q")?;
    for kind in BaselineKind::ALL {
        let spec = BaselineSpec::new(kind, 4);
        let (sel, _) = embed(spec, k0, PrpReading::WinRate)?;
        println!(
            "{:<11} K=4: {:>2} calls, ranking {:?}",
            kind.name(),
            sel.calls(),
            baseline_ranking(&q, spec)?.0
        );
    }
    Ok(())
}

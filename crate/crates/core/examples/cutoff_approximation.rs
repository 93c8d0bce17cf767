//! The smooth DCG weight used in training: exact at integer ranks inside the
//! cutoff, strictly decreasing beyond it, with a gradient that decays far
//! more slowly than a sigmoid cutoff.
//!
//! `cargo run --release --example cutoff_approximation -- [K]`

use compound_retrieval::losses::{approx_dcg_weight, approx_dcg_weight_grad, dcg_weight};

/// Gradient of `σ(K + ½ - r) / log2(r + 1)`.
fn sigmoid_cutoff_grad(r: f64, k: usize) -> f64 {
    let s = 1.0 / (1.0 + (r - k as f64 - 0.5).exp());
    let l = (r + 1.0).log2();
    -s * (1.0 - s) / l - s / ((r + 1.0) * std::f64::consts::LN_2 * l * l)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k: usize = std::env::args().nth(1).map_or(Ok(10), |a| a.parse())?;
    println!("{:>6} {:>10} {:>10} {:>12} {:>12}", "rank", "exact", "smooth", "grad", "sigmoid grad");
    for r in [1.0, 2.0, 5.0, k as f64, k as f64 + 0.5, k as f64 + 1.0, k as f64 + 5.0, k as f64 + 50.0, k as f64 + 500.0] {
        let exact = if r.fract() == 0.0 { dcg_weight(r as usize, k) } else { f64::NAN };
        println!(
            "{r:>6} {exact:>10.5} {:>10.5} {:>12.3e} {:>12.3e}",
            approx_dcg_weight(r, k),
            approx_dcg_weight_grad(r, k),
            sigmoid_cutoff_grad(r, k)
        );
    }
    Ok(())
}

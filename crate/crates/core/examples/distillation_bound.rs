//! The distillation loss bounds how much DCG@K a student ranking can lose
//! against its teacher under any labelling with grades up to V, and a
//! simple labelling attains the bound.
//!
//! `cargo run --release --example distillation_bound`

use compound_retrieval::baselines::{prp_rerank, PrpReading};
use compound_retrieval::data::{synthesize_query, SynthConfig};
use compound_retrieval::losses::{dcg_weight, distillation_loss, utility};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (k0, k, v) = (10, 5, 3u32);
    let q = synthesize_query(&SynthConfig { k0, ..SynthConfig::default() }, 11, "q")?;
    let (teacher, _) = prp_rerank(&q, k0, false, PrpReading::WinRate)?;
    let student: Vec<usize> = (0..k0).collect();
    let bound = f64::from(v) * distillation_loss(&teacher, &student, k);
    println!("teacher (PRP)  {teacher:?}\nstudent (first stage) {student:?}");
    println!("V * distil@{k} = {bound:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let labels: Vec<u32> = (0..k0).map(|_| rng.random_range(0..=v)).collect();
        worst = worst.max(utility(&teacher, &labels, k) - utility(&student, &labels, k));
    }
    println!("largest DCG@{k} loss over 10000 random labellings: {worst:.4}");

    // Grade V exactly where the student gives a document less weight.
    let mut student_rank = vec![0; k0];
    for (i, &d) in student.iter().enumerate() {
        student_rank[d] = i + 1;
    }
    let witness: Vec<u32> = (0..k0)
        .map(|d| {
            let teacher_rank = teacher.iter().position(|&t| t == d).unwrap() + 1;
            if dcg_weight(teacher_rank, k) > dcg_weight(student_rank[d], k) { v } else { 0 }
        })
        .collect();
    let gap = utility(&teacher, &witness, k) - utility(&student, &witness, k);
    println!("witness labels {witness:?} lose {gap:.4}");
    Ok(())
}

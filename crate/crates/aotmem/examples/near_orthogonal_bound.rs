//! The noisy-lookup upper bound: sample a near-orthonormal unembedding,
//! solve the per-sequence temperature equation, and compare the explicit
//! encoder's measured KL against the full and simplified bounds.
//!
//! Run with: cargo run --release --example near_orthogonal_bound

use aotmem::bounds::{encoder_lower_bound, near_orthogonal_bound, upper_full_given_c, OptConfig};
use aotmem::task::make_noisy_lookup_task;

fn main() -> aotmem::Result<()> {
    let task = make_noisy_lookup_task(10, 1, 0.95, 8)?;

    for d in [64usize, 256, 1024] {
        let (report, _) = near_orthogonal_bound(&task, d, 3)?;
        let (lower, _) = encoder_lower_bound(&task, d, OptConfig::new(1))?;
        println!("d = {d}:");
        println!("  gram deviation C      = {:.4}", report.c_gram.unwrap());
        println!("  lower bound           = {:.3e}", lower.lower_bound.unwrap());
        println!("  measured encoder KL   = {:.6}", report.measured_encoder_kl.unwrap());
        println!("  full bound            = {:.6}", report.upper_full.unwrap());
        println!("  simplified bound      = {:.6}", report.upper_simplified.unwrap());
        let lambdas = report.lambda_table.unwrap();
        let mean = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
        println!("  mean temperature      = {mean:.4}");
    }

    println!(
        "reference: the full bound at C -> 0 evaluates to {:.4}",
        upper_full_given_c(&task, 0.0)?
    );
    Ok(())
}

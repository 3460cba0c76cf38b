//! The rank-d bottleneck: estimate the best KL any rank-d sequence encoder
//! can reach on a task, as a function of d.
//!
//! Run with: cargo run --release --example encoder_lower_bound

use aotmem::bounds::{encoder_lower_bound, OptConfig};
use aotmem::task::{make_association_task, smooth_task};

fn main() -> aotmem::Result<()> {
    let n = 5;
    let base = make_association_task(n, 1, 11)?;
    let task = smooth_task(&base, 0.02)?;

    println!("smoothed association task, N={n}, S=1, {} sequences", task.support_size());
    println!("best achievable KL by embedding dimension:");
    for d in 1..=n - 1 {
        let mut opt = OptConfig::new(3);
        opt.restarts = 4;
        opt.steps = 2000;
        let (report, _) = encoder_lower_bound(&task, d, opt)?;
        let meta = report.optimizer_meta.unwrap();
        println!(
            "  d = {d}: {:.6}  ({} iterations, final grad norm {:.1e})",
            report.lower_bound.unwrap(),
            meta.iterations,
            meta.final_grad_norm
        );
    }
    println!("at d >= N-1 the centered log-conditionals embed exactly and the bound is 0");
    Ok(())
}

//! Capacity and parameter-count comparisons across constructions.
//!
//! Run with: cargo run --release --example capacity_comparison

use aotmem::bounds::capacity_formulas;
use aotmem::model::{param_count, CountFormula, ModelConfig};

fn main() -> aotmem::Result<()> {
    println!("{:>4} {:>5} {:>4} | {:>8} {:>9} {:>11} {:>13} {:>9}", "H", "d_h", "d", "ours", "previous", "kim params", "huben params", "phi");
    for (h, d_h, d) in [(20usize, 10usize, 10usize), (10, 5, 5), (49, 2, 2)] {
        let r = capacity_formulas(h, d_h, d, 50, 2, 2500)?;
        println!(
            "{h:>4} {d_h:>5} {d:>4} | {:>8} {:>9} {:>11.1} {:>13.1} {:>9.5}",
            r.ours, r.previous, r.kim_params, r.huben_params, r.phi_bound
        );
    }

    println!();
    println!("parameter accounting for H=20, d_h=10, d=10, N=50, S=2:");
    let cfg = ModelConfig::aot(50, 2, 10, 10, 20);
    println!(
        "  full heads:   {}",
        param_count(&cfg, CountFormula::Theorem1)
    );
    println!(
        "  rank-1 heads: {}",
        param_count(&cfg, CountFormula::Remark2)
    );
    println!("  raw tally:    {}", param_count(&cfg, CountFormula::Raw));
    Ok(())
}

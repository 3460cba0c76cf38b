//! Verify the hand-written reverse-mode gradients against central finite
//! differences on both model variants.
//!
//! Run with: cargo run --release --example gradient_check

use aotmem::model::{AoTParams, ModelConfig, TokenSeq};
use aotmem::numkernel::Rng;
use aotmem::task::make_association_task;
use aotmem::trainlab::finite_diff_check;

fn main() -> aotmem::Result<()> {
    let task = make_association_task(4, 2, 5)?;
    let batch: Vec<(TokenSeq, usize)> = task
        .support
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (t.clone(), task.g.as_ref().unwrap()[i]))
        .collect();

    let mut rng = Rng::seed_from(11);
    let aot = AoTParams::random_init(ModelConfig::aot(4, 2, 3, 2, 2), 0.5, &mut rng)?;
    let mlp = AoTParams::random_init(ModelConfig::mlp_based(4, 2, 3, 5), 0.5, &mut rng)?;

    for h in [1e-3, 1e-4, 1e-5] {
        let e_aot = finite_diff_check(&aot, &batch, h)?;
        let e_mlp = finite_diff_check(&mlp, &batch, h)?;
        println!("h = {h:>6}: max relative error aot {e_aot:.3e}, mlp {e_mlp:.3e}");
    }
    println!("(the h = 1e-4 line is the contract checked in CI: <= 1e-4)");
    Ok(())
}

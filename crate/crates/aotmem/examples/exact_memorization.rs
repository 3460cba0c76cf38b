//! Build an attention-only transformer that stores every association of a
//! random task exactly, and inspect its certificate.
//!
//! Run with: cargo run --release --example exact_memorization

use aotmem::bounds::circle_encoder;
use aotmem::construct::{build_memorizer, verify_memorizer, ConstructionConfig};
use aotmem::model::aot_forward;
use aotmem::task::make_association_task;

fn main() -> aotmem::Result<()> {
    // 25 random pairs: each of the 5*5 input sequences gets one correct
    // next token.
    let task = make_association_task(5, 2, 7)?;

    // Target logits: unit-circle unembedding at temperature 20 pointing at
    // each sequence's correct token.
    let target = circle_encoder(&task, 20.0)?;

    // d = 2, d_h = 2: the head count comes out to ceil((25 - 2)/2) = 12,
    // so the capacity H d_h + d = 26 covers all 25 associations.
    let cfg = ConstructionConfig::new(2, 2, 7);
    let (params, cert) = build_memorizer(&task, &target, &cfg)?;

    println!("heads used:        {}", cert.h_used);
    println!("associations:      {}", cert.t_target);
    println!("achieved rank:     {}", cert.achieved_rank);
    println!("solve residual:    {:.3e}", cert.solve_residual);
    println!("skip residual:     {:.3e}", cert.skip_residual);
    println!("accuracy:          {}", cert.achieved_accuracy);
    println!("kl divergence:     {:.6e}", cert.achieved_kl);
    println!("resamples:         {}", cert.resamples);

    // Every stored sequence puts the strict maximum logit on its target.
    let g = task.g.as_ref().unwrap();
    for (idx, (t, _)) in task.support.iter().enumerate().take(5) {
        let logits = aot_forward(&params, t)?;
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        println!("sequence {:?} -> argmax {} (target {})", t.0, argmax, g[idx]);
    }

    // Independent re-measurement.
    let re = verify_memorizer(&params, &task, None)?;
    assert_eq!(re.achieved_accuracy, 1.0);
    println!("re-verified accuracy 1.0");
    Ok(())
}

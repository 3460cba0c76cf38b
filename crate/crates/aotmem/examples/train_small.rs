//! Train a small attention-only model on a random association task and
//! watch the accuracy approach the capacity prediction.
//!
//! Run with: cargo run --release --example train_small

use aotmem::bounds::phi;
use aotmem::model::ModelConfig;
use aotmem::task::make_association_task;
use aotmem::trainlab::{train_model, TrainConfig};

fn main() -> aotmem::Result<()> {
    let n = 10;
    let task = make_association_task(n, 2, 3)?;
    let config = ModelConfig::aot(n, 2, 4, 4, 8);

    let cfg = TrainConfig {
        batches_per_epoch: 200,
        batch_size: 256,
        epochs: 5,
        seeds: vec![0, 1],
        ..TrainConfig::default()
    };
    let (_, result) = train_model(config, &task, &cfg)?;

    let t0 = task.support_size();
    let capacity_floor = phi((8 * 4 + 4) as f64, n, t0).min(1.0);
    println!("task: {} associations (N={n}, S=2)", t0);
    println!("capacity floor phi(H d_h + d) = {capacity_floor:.4}");
    for seed in &result.per_seed {
        println!(
            "seed {}: accuracy per epoch {:?}",
            seed.seed,
            seed.accuracy_curve
                .iter()
                .map(|a| (a * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
    }
    println!("seed-averaged final accuracy: {:.4}", result.mean_accuracy);
    println!("seed-averaged final KL:       {:.4}", result.mean_kl);
    Ok(())
}

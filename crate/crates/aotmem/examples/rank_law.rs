//! Measure how often the stacked head features reach full numeric rank:
//! the generic-rank law behind the construction.
//!
//! Run with: cargo run --release --example rank_law

use aotmem::construct::{assemble_attention_matrix, assembled_rank, generic_heads, sample_embeddings};
use aotmem::model::{AoTParams, ModelConfig, TokenSeq};
use aotmem::numkernel::Matrix;
use aotmem::task::make_association_task;

fn main() -> aotmem::Result<()> {
    let (n, s, d, d_h, h) = (5usize, 2usize, 3usize, 2usize, 4usize);
    let task = make_association_task(n, s, 1)?;
    let seqs: Vec<TokenSeq> = task
        .support
        .iter()
        .map(|(t, _)| t.clone())
        .take(8)
        .collect();
    let want = seqs.len().min(h * d_h);

    let mut histogram = std::collections::BTreeMap::new();
    for seed in 0..100u64 {
        let (e, pos) = sample_embeddings(n, s, d, seed);
        let heads = generic_heads(&e, &pos, &seqs, d_h, h, seed);
        let params = AoTParams {
            config: ModelConfig::aot(n, s, d, d_h, h),
            e,
            pos,
            heads,
            w_u: Matrix::zeros(n, d),
            mlp: None,
        };
        let m = assemble_attention_matrix(&params, &seqs, false)?;
        let rank = assembled_rank(&m, 1e-8)?;
        *histogram.entry(rank).or_insert(0usize) += 1;
    }

    println!("heads-only feature matrix, T={} sequences, H={h} heads of dim {d_h}:", seqs.len());
    for (rank, count) in &histogram {
        println!("  rank {rank}: {count} seeds");
    }
    let full = histogram.get(&want).copied().unwrap_or(0);
    println!("full rank min(T, H d_h) = {want} reached in {full}/100 seeds");
    Ok(())
}

//! The d = 2 circle encoder: KL against a lookup task decays to zero as
//! the temperature grows, matching its closed form exactly.
//!
//! Run with: cargo run --release --example circle_encoder_limit

use aotmem::bounds::{circle_encoder, circle_encoder_closed_form_kl};
use aotmem::task::{accuracy, make_association_task};

fn main() -> aotmem::Result<()> {
    let task = make_association_task(10, 1, 4)?;
    println!("N = 10 lookup task; circle encoder at growing temperature:");
    println!("{:>8} {:>14} {:>14} {:>9}", "lambda", "measured KL", "closed form", "accuracy");
    for lambda in [0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0] {
        let enc = circle_encoder(&task, lambda)?;
        let measured = enc.kl_against(&task);
        let closed = circle_encoder_closed_form_kl(&task, lambda)?;
        let mut f = enc.logits_fn(&task);
        let acc = accuracy(&task, |t| f(t))?;
        println!("{lambda:>8} {measured:>14.6e} {closed:>14.6e} {acc:>9}");
        assert!((measured - closed).abs() < 1e-10);
    }
    Ok(())
}

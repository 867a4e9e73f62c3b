//! Memorizes eight random-dot pairs with the smallest model and prints the
//! metrics before and after.
//!
//! ```text
//! cargo run --release -p esm-stereo --example overfit -- [steps] [lr] [seed]
//! ```

use esm_stereo::trainer::{overfit_harness, OverfitConfig};

fn main() -> esm_stereo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = OverfitConfig::default();
    if let Some(s) = args.first() {
        cfg.steps = s.parse().expect("steps");
    }
    if let Some(s) = args.get(1) {
        cfg.lr = s.parse().expect("lr");
    }
    if let Some(s) = args.get(2) {
        cfg.seed = s.parse().expect("seed");
    }
    let r = overfit_harness(&cfg)?;
    println!("{}: {} steps in {:.1}s", r.model, r.losses.len(), r.seconds);
    println!("untrained epe={:.4} d1={:.2}", r.initial.epe, r.initial.d1);
    println!("trained   epe={:.4} d1={:.2}", r.trained.epe, r.trained.d1);
    println!("loss first={:.4} last={:.4}", r.losses[0], r.losses[r.losses.len() - 1]);
    Ok(())
}

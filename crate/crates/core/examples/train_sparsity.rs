//! Trains one attention variant on the default synthetic sparsity dataset
//! with the desk-scale settings and prints the validation curve.
//!
//! cargo run --release --example train_sparsity -- gmm-rks

use std::time::Instant;

use klab::experiments::sparsity::{generate_sparsity_dataset, SparsitySpec};
use klab::experiments::train::{run_sparsity_experiment_with, SparsityTrainConfig};

fn main() -> klab::Result<()> {
    let variant = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "gmm-rks".into())
        .parse()?;
    let data = generate_sparsity_dataset(&SparsitySpec::default())?;
    let mut cfg = SparsityTrainConfig::desk_scale();
    cfg.encoder.variant = variant;
    let start = Instant::now();
    let run = run_sparsity_experiment_with(&cfg, &data, |p| {
        println!(
            "step {:>6}  epoch {:5.2}  loss {:.4}  val acc {:.4}  {:.0}s",
            p.step,
            p.epoch,
            p.train_loss,
            p.val_accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "{variant}: best {:.4} after {} steps",
        run.best_accuracy, run.steps
    );
    Ok(())
}

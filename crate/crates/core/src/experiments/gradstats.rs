//! Spread of classifier-layer gradients across frequency redraws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sparsity::{encode_batch, SyntheticExample};
use crate::analysis::mean_std;
use crate::error::{Error, Result};
use crate::model::Trainer;

pub const DEFAULT_DATAPOINTS: usize = 50;
pub const DEFAULT_REPETITIONS: usize = 50;
/// Parameter whose gradient represents the classifier hidden layer: the
/// bias gradient equals the loss gradient at each neuron's pre-activation.
pub const CLASSIFIER_PARAM: &str = "classifier.hidden.b";

#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    /// Mean over repetitions of `|g|`, averaged over neurons.
    pub abs_mean: f64,
    /// Population standard deviation over repetitions, averaged over neurons.
    pub std: f64,
    pub neurons: usize,
    pub datapoints: usize,
    pub repetitions: usize,
}

/// Redraws the attention frequencies `repetitions` times and records the
/// gradient of the mean loss over the first `datapoints` examples at the
/// classifier hidden layer. Dropout is off; only the frequency draw varies.
pub fn gradient_statistics(
    trainer: &Trainer,
    examples: &[SyntheticExample],
    datapoints: usize,
    repetitions: usize,
    seed: u64,
) -> Result<GradStats> {
    if datapoints == 0 || repetitions == 0 {
        return Err(Error::config("datapoints and repetitions must be positive"));
    }
    if examples.len() < datapoints {
        return Err(Error::config(format!(
            "{datapoints} datapoints requested, {} available",
            examples.len()
        )));
    }
    let (x, labels) = encode_batch(&examples[..datapoints])?;
    let slot = trainer.encoder.params.id(CLASSIFIER_PARAM)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = trainer.clone();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        probe.encoder.resample(&mut rng);
        let (_, g) = probe.gradients(&x, &labels)?;
        grads.push(g[slot].data().to_vec());
    }
    let neurons = grads[0].len();
    let mut abs_mean = 0.0;
    let mut std = 0.0;
    for j in 0..neurons {
        let column: Vec<f64> = grads.iter().map(|g| g[j]).collect();
        abs_mean += column.iter().map(|v| v.abs()).sum::<f64>() / repetitions as f64;
        std += mean_std(&column).1;
    }
    Ok(GradStats {
        abs_mean: abs_mean / neurons as f64,
        std: std / neurons as f64,
        neurons,
        datapoints,
        repetitions,
    })
}

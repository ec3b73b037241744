//! Time and auxiliary-memory scaling of one multi-head attention pass.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{linear_kernel_attention_tracked, softmax_attention_tracked, AuxTracker};
use crate::error::{Error, Result};
use crate::featmap::{FeatureMapSpec, Projection};
use crate::model::Variant;
use crate::spectral::{
    generator_sample, gmm_sample, FastFoodParams, GeneratorParams, GmmParams, Learnable,
    SamplerKind,
};
use crate::tensor::DenseArray;

pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub num_samples: usize,
    /// Auxiliary-allocation budget per pass; exceeding it is recorded as an
    /// out-of-memory failure row.
    pub memory_budget: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut variants = Variant::KERNELIZED.to_vec();
        variants.push(Variant::Softmax);
        Self {
            variants,
            lengths: DEFAULT_LENGTHS.to_vec(),
            trials: 3,
            heads: 4,
            d_qk: 16,
            d_v: 16,
            num_samples: 64,
            memory_budget: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.lengths.is_empty() {
            return Err(Error::config(
                "bench needs at least one variant and one length",
            ));
        }
        if self.lengths.contains(&0) {
            return Err(Error::config("bench lengths must be positive"));
        }
        if self.trials == 0
            || self.heads == 0
            || self.d_qk == 0
            || self.d_v == 0
            || self.num_samples == 0
        {
            return Err(Error::config(
                "trials, heads, widths and samples must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: Variant,
    pub length: usize,
    /// Median seconds per pass over all heads; `None` on failure.
    pub time_per_step: Option<f64>,
    /// Instrumented peak of auxiliary buffers, in bytes.
    pub peak_aux_bytes: usize,
    pub steps: usize,
    pub failure: Option<String>,
}

fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseArray {
    let data = (0..rows * cols)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::new([rows, cols], data).expect("shape matches")
}

fn projection(
    variant: Variant,
    cfg: &BenchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Box<dyn Projection>>> {
    let Variant::Kernel { sampler, .. } = variant else {
        return Ok(None);
    };
    let (m, d) = (cfg.num_samples, cfg.d_qk);
    Ok(Some(match sampler {
        SamplerKind::Gmm => Box::new(gmm_sample(&GmmParams::isotropic(2, d, 1.0), m, rng)?),
        SamplerKind::FastFood => {
            let ff = FastFoodParams::sample(
                d,
                m.next_multiple_of(d.next_power_of_two()),
                1.0,
                Learnable::ALL,
                rng,
            )?;
            Box::new(ff)
        }
        SamplerKind::Generative => {
            Box::new(generator_sample(&GeneratorParams::random(d, rng), m, rng)?)
        }
    }))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times every `(variant, length)` pair; trials run serially. A pass that
/// exceeds the memory budget yields a failure row and the sweep continues.
pub fn run_scaling_bench(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.variants.len() * cfg.lengths.len());
    for &variant in &cfg.variants {
        let proj = projection(variant, cfg, &mut rng)?;
        let spec = match variant {
            Variant::Kernel { features, .. } => Some(FeatureMapSpec::new(
                features,
                proj.as_ref().expect("kernel").num_frequencies(),
            )),
            Variant::Softmax => None,
        };
        for &len in &cfg.lengths {
            let inputs: Vec<[DenseArray; 3]> = (0..cfg.heads)
                .map(|_| {
                    [
                        normal(len, cfg.d_qk, &mut rng),
                        normal(len, cfg.d_qk, &mut rng),
                        normal(len, cfg.d_v, &mut rng),
                    ]
                })
                .collect();
            let mut times = Vec::with_capacity(cfg.trials);
            let mut peak = 0;
            let mut failure = None;
            for _ in 0..cfg.trials {
                let mut tracker = match cfg.memory_budget {
                    Some(b) => AuxTracker::with_budget(b),
                    None => AuxTracker::unbounded(),
                };
                let start = Instant::now();
                let mut run = || -> Result<()> {
                    for [q, k, v] in &inputs {
                        match (&spec, &proj) {
                            (Some(spec), Some(proj)) => {
                                std::hint::black_box(linear_kernel_attention_tracked(
                                    q,
                                    k,
                                    v,
                                    spec,
                                    proj.as_ref(),
                                    false,
                                    &mut tracker,
                                )?);
                            }
                            _ => {
                                std::hint::black_box(softmax_attention_tracked(
                                    q,
                                    k,
                                    v,
                                    false,
                                    &mut tracker,
                                )?);
                            }
                        }
                    }
                    Ok(())
                };
                let result = run();
                let elapsed = start.elapsed().as_secs_f64();
                peak = peak.max(tracker.peak_bytes());
                match result {
                    Ok(()) => times.push(elapsed),
                    Err(e @ Error::Memory { .. }) => {
                        failure = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            out.push(BenchResult {
                variant,
                length: len,
                time_per_step: failure.is_none().then(|| median(times.clone())),
                peak_aux_bytes: peak,
                steps: times.len(),
                failure,
            });
        }
    }
    Ok(out)
}

/// Peak resident set size of this process in kilobytes, where the platform
/// reports it. Advisory only.
pub fn os_peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_one_row_per_pair() {
        let cfg = BenchConfig {
            lengths: vec![16, 32],
            trials: 1,
            ..BenchConfig::default()
        };
        let rows = run_scaling_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * cfg.variants.len());
        assert!(rows
            .iter()
            .all(|r| r.failure.is_none() && r.time_per_step.unwrap() > 0.0));
    }

    #[test]
    fn linear_memory_is_length_independent_and_softmax_is_not() {
        let cfg = BenchConfig {
            lengths: vec![64, 256],
            trials: 1,
            variants: vec![
                "gmm-prf".parse().unwrap(),
                "fastfood-rks".parse().unwrap(),
                Variant::Softmax,
            ],
            ..BenchConfig::default()
        };
        let rows = run_scaling_bench(&cfg).unwrap();
        for pair in rows.chunks(2) {
            let (a, b) = (pair[0].peak_aux_bytes, pair[1].peak_aux_bytes);
            if pair[0].variant == Variant::Softmax {
                assert_eq!(b, 16 * a);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn over_budget_lengths_are_failure_rows() {
        let cfg = BenchConfig {
            lengths: vec![32, 2048, 64],
            trials: 2,
            variants: vec![Variant::Softmax, "gmm-rks".parse().unwrap()],
            memory_budget: Some(1 << 20),
            ..BenchConfig::default()
        };
        let rows = run_scaling_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[1]
            .failure
            .as_deref()
            .unwrap()
            .contains("out of memory"));
        assert!(rows[1].time_per_step.is_none());
        assert!(rows[0].failure.is_none() && rows[2].failure.is_none());
        assert!(rows[3..].iter().all(|r| r.failure.is_none()));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

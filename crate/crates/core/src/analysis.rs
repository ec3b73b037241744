//! Estimator variance: closed-form mean squared errors of the RKS and PRF
//! kernel estimators under a Gaussian spectral density, Monte Carlo
//! counterparts, eigenvalues of learnt covariances, and output-stochasticity
//! metrics for repeated evaluations of a randomized model.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::kernels::dot;
use crate::tensor::DenseArray;

/// Query/key pair, spectral mean `μ`, scale `S` (covariance `S Sᵀ`) and
/// sample count `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MseInputs {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub mu: Vec<f64>,
    pub s: DenseArray,
    pub m: usize,
}

impl MseInputs {
    pub fn validate(&self) -> Result<()> {
        let d = self.q.len();
        if self.k.len() != d || self.mu.len() != d || self.s.shape() != [d, d] {
            return Err(Error::dim(format!(
                "q, k, μ need one common dimension and S must be square, got {}, {}, {}, {:?}",
                d,
                self.k.len(),
                self.mu.len(),
                self.s.shape()
            )));
        }
        if self.m == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.q) && finite(&self.k) && finite(&self.mu) && self.s.is_finite()) {
            return Err(Error::NonFinite("MSE inputs".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// `p = k − q`
    pub fn p(&self) -> Vec<f64> {
        self.k.iter().zip(&self.q).map(|(k, q)| k - q).collect()
    }

    /// `o = k + q`
    pub fn o(&self) -> Vec<f64> {
        self.k.iter().zip(&self.q).map(|(k, q)| k + q).collect()
    }
}

/// `‖Sᵀx‖²`
fn st_norm_sq(s: &DenseArray, x: &[f64]) -> f64 {
    let d = x.len();
    (0..d)
        .map(|j| {
            let c: f64 = (0..d).map(|i| s.get(i, j) * x[i]).sum();
            c * c
        })
        .sum()
}

fn sq_norm(x: &[f64]) -> f64 {
    dot(x, x)
}

/// `(2/m) cos²(μᵀp) (1 − e^{−‖Sᵀp‖²})²`: MSE of the symmetric-pair RKS
/// estimator with components `N(±μ, S Sᵀ)`.
pub fn mse_rks_closed_form(inp: &MseInputs) -> Result<f64> {
    inp.validate()?;
    let p = inp.p();
    let c = dot(&inp.mu, &p).cos();
    let damp = 1.0 - (-st_norm_sq(&inp.s, &p)).exp();
    Ok(2.0 / inp.m as f64 * c * c * damp * damp)
}

/// `(1/m) e^{−2(‖q‖²+‖k‖²−μᵀo)} (e^{2‖Sᵀo‖²} − e^{‖Sᵀo‖²})`: MSE of the PRF
/// estimator under `N(μ, S Sᵀ)`.
pub fn mse_prf_closed_form(inp: &MseInputs) -> Result<f64> {
    inp.validate()?;
    let a2 = st_norm_sq(&inp.s, &inp.o());
    Ok(prf_mse_from_exponent(inp, a2))
}

/// The PRF expression with un-squared norms `‖Sᵀo‖`. Kept only so the
/// Monte Carlo oracle can demonstrate that it is the wrong reading.
pub fn mse_prf_closed_form_unsquared(inp: &MseInputs) -> Result<f64> {
    inp.validate()?;
    let a = st_norm_sq(&inp.s, &inp.o()).sqrt();
    Ok(prf_mse_from_exponent(inp, a))
}

/// `(1/m) e^{−2(‖q‖²+‖k‖²−μᵀo)} (e^{2t} − e^{t})`, written as
/// `e^{t−2(…)}·expm1(t)/m` to avoid `∞ − ∞`.
fn prf_mse_from_exponent(inp: &MseInputs, t: f64) -> f64 {
    let expo = sq_norm(&inp.q) + sq_norm(&inp.k) - dot(&inp.mu, &inp.o());
    let m = inp.m as f64;
    if t > 700.0 {
        // expm1 overflows; fold it into the exponent instead.
        let ln_expm1 = t + (-(-t).exp()).ln_1p();
        return (-2.0 * expo + t + ln_expm1).exp() / m;
    }
    (-2.0 * expo + t).exp() * t.exp_m1() / m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// `(1/m) Σ_i [cos(ω_iᵀp) + cos(χ_iᵀp)]` with `ω_i = Sη_i + μ` and
    /// `χ_i = Sη_i − μ` sharing the same noise. Its expectation is the sum
    /// of the two component kernels, `2 cos(μᵀp) e^{−‖Sᵀp‖²/2}`.
    SymmetricRks,
    /// `(1/m) Σ_i e^{ω_iᵀo − ‖q‖² − ‖k‖²}`, `ω_i = Sη_i + μ`, with
    /// expectation `e^{μᵀo + ‖Sᵀo‖²/2 − ‖q‖² − ‖k‖²}`.
    Prf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McMse {
    pub mse: f64,
    /// Standard error of `mse` across trials.
    pub std_error: f64,
    pub trials: usize,
}

/// Smallest trial count accepted by [`mc_mse`].
pub const MIN_TRIALS: usize = 10_000;

/// Empirical MSE of an `m`-sample estimate against its exact expectation
/// over `trials` independent draws.
pub fn mc_mse(
    estimator: Estimator,
    inp: &MseInputs,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<McMse> {
    inp.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::config(format!(
            "Monte Carlo MSE needs at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let d = inp.dim();
    let (p, o) = (inp.p(), inp.o());
    let nq_nk = sq_norm(&inp.q) + sq_norm(&inp.k);
    // Per-sample targets; deviations are taken sample by sample so that a
    // degenerate sampler gives exactly zero error.
    let target = match estimator {
        Estimator::SymmetricRks => {
            let c = dot(&inp.mu, &p).cos();
            (c + c) * (-0.5 * st_norm_sq(&inp.s, &p)).exp()
        }
        Estimator::Prf => (dot(&inp.mu, &o) - nq_nk + 0.5 * st_norm_sq(&inp.s, &o)).exp(),
    };
    let mut eta = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut dev = 0.0;
        for _ in 0..inp.m {
            for e in eta.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = dot(inp.s.row(i), &eta);
            }
            let x = match estimator {
                Estimator::SymmetricRks => {
                    let sp = dot(&w, &p);
                    let mp = dot(&inp.mu, &p);
                    (sp + mp).cos() + (sp - mp).cos()
                }
                Estimator::Prf => {
                    for (wi, mi) in w.iter_mut().zip(&inp.mu) {
                        *wi += mi;
                    }
                    (dot(&w, &o) - nq_nk).exp()
                }
            };
            dev += x - target;
        }
        let err = dev / inp.m as f64;
        let sq = err * err;
        sum += sq;
        sum_sq += sq * sq;
    }
    let n = trials as f64;
    let mse = sum / n;
    let var = (sum_sq / n - mse * mse).max(0.0) * n / (n - 1.0);
    Ok(McMse {
        mse,
        std_error: (var / n).sqrt(),
        trials,
    })
}

/// Eigenvalues of `S Sᵀ`, largest first.
pub fn covariance_eigenvalues(s: &DenseArray) -> Result<Vec<f64>> {
    let (r, c) = s.dims2()?;
    if r != c {
        return Err(Error::dim(format!(
            "scale matrix must be square, got {r}×{c}"
        )));
    }
    let m = DMatrix::from_row_slice(r, c, s.data());
    let cov = &m * m.transpose();
    let mut values: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// `std/|mean|` of repeated outputs. A zero mean yields `+∞` with
/// `zero_mean` set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rsd {
    pub value: f64,
    pub zero_mean: bool,
}

/// Population mean and standard deviation. Deviations are taken from the
/// first value, so identical inputs give a standard deviation of exactly 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&shift) = values.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = values.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in values {
        let d = v - shift;
        s1 += d;
        s2 += d * d;
    }
    let mean_shift = s1 / n;
    let var = (s2 / n - mean_shift * mean_shift).max(0.0);
    (shift + mean_shift, var.sqrt())
}

pub fn relative_std(values: &[f64]) -> Rsd {
    let (mean, std) = mean_std(values);
    if mean == 0.0 {
        Rsd {
            value: f64::INFINITY,
            zero_mean: true,
        }
    } else {
        Rsd {
            value: std / mean.abs(),
            zero_mean: false,
        }
    }
}

fn positives(values: &[f64]) -> usize {
    values.iter().filter(|&&v| v > 0.0).count()
}

/// `min(x, runs − x)` where `x` counts positive outputs.
pub fn prediction_inconsistency(values: &[f64]) -> usize {
    let x = positives(values);
    x.min(values.len() - x)
}

/// Majority sign over runs; ties count as a negative prediction.
pub fn majority_vote(values: &[f64]) -> bool {
    2 * positives(values) > values.len()
}

/// Stochasticity of repeated evaluations of a binary classifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub runs: usize,
    pub rsd: Vec<Rsd>,
    pub pi: Vec<usize>,
    /// Accuracy of the majority vote over runs.
    pub va: f64,
    /// Mean accuracy of individual runs.
    pub accuracy: f64,
    /// `va / accuracy`; 1 when both are zero.
    pub agv: f64,
    /// `outputs[example][run]`, pre-sigmoid.
    pub outputs: Vec<Vec<f64>>,
}

impl VarianceReport {
    /// Builds the report from raw outputs (`outputs[example][run]`) and
    /// binary labels. A positive output predicts `true`.
    pub fn from_outputs(outputs: Vec<Vec<f64>>, labels: &[bool]) -> Result<Self> {
        if outputs.is_empty() || outputs.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} output rows for {} labels",
                outputs.len(),
                labels.len()
            )));
        }
        let runs = outputs[0].len();
        if runs == 0 || outputs.iter().any(|o| o.len() != runs) {
            return Err(Error::dim(
                "every example needs the same positive number of runs",
            ));
        }
        let n = labels.len() as f64;
        let rsd = outputs.iter().map(|o| relative_std(o)).collect();
        let pi = outputs
            .iter()
            .map(|o| prediction_inconsistency(o))
            .collect();
        let votes = outputs
            .iter()
            .zip(labels)
            .filter(|(o, &l)| majority_vote(o) == l)
            .count();
        let correct: usize = outputs
            .iter()
            .zip(labels)
            .map(|(o, &l)| o.iter().filter(|&&v| (v > 0.0) == l).count())
            .sum();
        let va = votes as f64 / n;
        let accuracy = correct as f64 / (n * runs as f64);
        let agv = if accuracy == 0.0 {
            if va == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            va / accuracy
        };
        Ok(Self {
            runs,
            rsd,
            pi,
            va,
            accuracy,
            agv,
            outputs,
        })
    }

    /// Mean RSD over examples with a nonzero mean output.
    pub fn mean_rsd(&self) -> f64 {
        let finite: Vec<f64> = self
            .rsd
            .iter()
            .filter(|r| !r.zero_mean)
            .map(|r| r.value)
            .collect();
        finite.iter().sum::<f64>() / finite.len().max(1) as f64
    }

    pub fn mean_pi(&self) -> f64 {
        self.pi.iter().sum::<usize>() as f64 / self.pi.len() as f64
    }
}

/// Evaluates `model(example, run)` for `runs` repetitions of every example
/// and summarizes the spread of the outputs.
pub fn stochasticity_metrics<E>(
    examples: &[E],
    labels: &[bool],
    runs: usize,
    mut model: impl FnMut(&E, usize) -> Result<f64>,
) -> Result<VarianceReport> {
    let outputs = examples
        .iter()
        .map(|e| (0..runs).map(|r| model(e, r)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    VarianceReport::from_outputs(outputs, labels)
}

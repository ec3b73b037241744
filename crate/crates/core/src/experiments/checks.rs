//! Statistical checks of the feature maps and the closed-form MSEs against
//! seeded Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{
    mc_mse, mse_prf_closed_form, mse_prf_closed_form_unsquared, mse_rks_closed_form, Estimator,
    MseInputs,
};
use crate::error::Result;
use crate::featmap::{gaussian_kernel, kernel_estimate, FeatureKind, FeatureMapSpec};
use crate::spectral::FrequencyMatrix;
use crate::tensor::DenseArray;

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseArray {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DenseArray::new([rows, cols], data).expect("shape matches")
}

fn uniform_vec(d: usize, half_width: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..d)
        .map(|_| rng.random_range(-half_width..half_width))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheckConfig {
    pub dim: usize,
    pub num_samples: usize,
    pub pairs: usize,
    /// Entries of `q` and `k` are uniform in `±half_width`.
    pub half_width: f64,
    /// Allowed deviation in Monte Carlo standard errors.
    pub z_tolerance: f64,
    pub self_similarity_points: usize,
    pub self_similarity_tolerance: f64,
    pub seed: u64,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            num_samples: 1 << 16,
            pairs: 100,
            half_width: 0.5,
            z_tolerance: 3.0,
            self_similarity_points: 10_000,
            self_similarity_tolerance: 1e-12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairCheck {
    pub kind: FeatureKind,
    pub target: f64,
    pub estimate: f64,
    pub std_error: f64,
}

impl PairCheck {
    /// Deviation in standard errors.
    pub fn z(&self) -> f64 {
        (self.estimate - self.target).abs() / self.std_error
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheckReport {
    pub pairs: Vec<PairCheck>,
    /// Largest `|κ̂(x, x) − 1|` of the trigonometric map.
    pub self_similarity_max_error: f64,
    pub z_tolerance: f64,
    pub self_similarity_tolerance: f64,
}

impl KernelCheckReport {
    pub fn max_z(&self, kind: FeatureKind) -> f64 {
        self.pairs
            .iter()
            .filter(|p| p.kind == kind)
            .map(PairCheck::z)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self, kind: FeatureKind) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.kind == kind && !(p.z() <= self.z_tolerance))
            .count()
    }

    pub fn passed(&self) -> bool {
        self.failures(FeatureKind::Rks) == 0
            && self.failures(FeatureKind::Prf) == 0
            && self.self_similarity_max_error <= self.self_similarity_tolerance
    }
}

/// Per-frequency terms whose mean is the kernel estimate.
fn per_frequency_terms(kind: FeatureKind, q: &[f64], k: &[f64], omega: &DenseArray) -> Vec<f64> {
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    (0..omega.rows())
        .map(|m| {
            let w = omega.row(m);
            match kind {
                FeatureKind::Rks => {
                    let t: f64 = w
                        .iter()
                        .zip(q.iter().zip(k))
                        .map(|(w, (a, b))| w * (a - b))
                        .sum();
                    t.cos()
                }
                FeatureKind::Prf => {
                    let t: f64 = w
                        .iter()
                        .zip(q.iter().zip(k))
                        .map(|(w, (a, b))| w * (a + b))
                        .sum();
                    (t - sq(q) - sq(k)).exp()
                }
            }
        })
        .collect()
}

/// Both feature maps against the Gaussian kernel with standard-normal
/// frequencies, plus the exact unit self-similarity of the trigonometric map.
pub fn kernel_check(cfg: &KernelCheckConfig) -> Result<KernelCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(2 * cfg.pairs);
    for _ in 0..cfg.pairs {
        let q = uniform_vec(cfg.dim, cfg.half_width, &mut rng);
        let k = uniform_vec(cfg.dim, cfg.half_width, &mut rng);
        let omega = normal_matrix(cfg.num_samples, cfg.dim, &mut rng);
        let target = gaussian_kernel(&q, &k);
        let proj = FrequencyMatrix::from_array(omega);
        for kind in [FeatureKind::Rks, FeatureKind::Prf] {
            let mut spec = FeatureMapSpec::new(kind, cfg.num_samples);
            spec.clamp = f64::INFINITY;
            let estimate = kernel_estimate(&q, &k, &spec, &proj)?;
            let terms = per_frequency_terms(kind, &q, &k, proj.array());
            let (_, sd) = crate::analysis::mean_std(&terms);
            pairs.push(PairCheck {
                kind,
                target,
                estimate,
                std_error: sd / (cfg.num_samples as f64).sqrt(),
            });
        }
    }

    let spec = FeatureMapSpec::rks(64);
    let proj = FrequencyMatrix::from_array(normal_matrix(64, cfg.dim, &mut rng).map(|v| 3.0 * v));
    let mut worst = 0.0f64;
    for _ in 0..cfg.self_similarity_points {
        let x = uniform_vec(cfg.dim, 10.0, &mut rng);
        worst = worst.max((kernel_estimate(&x, &x, &spec, &proj)? - 1.0).abs());
    }
    Ok(KernelCheckReport {
        pairs,
        self_similarity_max_error: worst,
        z_tolerance: cfg.z_tolerance,
        self_similarity_tolerance: cfg.self_similarity_tolerance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseCheckConfig {
    pub dim: usize,
    pub m: usize,
    pub sets: usize,
    pub trials: usize,
    pub rel_tolerance: f64,
    pub seed: u64,
}

impl Default for MseCheckConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            m: 8,
            sets: 20,
            trials: 1_000_000,
            rel_tolerance: 0.03,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseSetCheck {
    pub rks_closed: f64,
    pub rks_mc: f64,
    pub rks_std_error: f64,
    pub prf_closed: f64,
    pub prf_unsquared: f64,
    pub prf_mc: f64,
    pub prf_std_error: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

impl MseSetCheck {
    pub fn rks_rel_error(&self) -> f64 {
        rel(self.rks_closed, self.rks_mc)
    }

    pub fn prf_rel_error(&self) -> f64 {
        rel(self.prf_closed, self.prf_mc)
    }

    pub fn prf_unsquared_rel_error(&self) -> f64 {
        rel(self.prf_unsquared, self.prf_mc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseCheckReport {
    pub sets: Vec<MseSetCheck>,
    pub m: usize,
    pub rel_tolerance: f64,
}

impl MseCheckReport {
    pub fn rks_passed(&self) -> bool {
        let bound = 2.0 / self.m as f64;
        self.sets
            .iter()
            .all(|s| s.rks_rel_error() <= self.rel_tolerance && s.rks_closed <= bound)
    }

    pub fn prf_passed(&self) -> bool {
        self.sets
            .iter()
            .all(|s| s.prf_rel_error() <= self.rel_tolerance)
    }

    /// The un-squared reading is rejected when it misses on some set.
    pub fn unsquared_rejected(&self) -> bool {
        self.sets
            .iter()
            .any(|s| !(s.prf_unsquared_rel_error() <= self.rel_tolerance))
    }

    pub fn passed(&self) -> bool {
        self.rks_passed() && self.prf_passed() && self.unsquared_rejected()
    }
}

/// A random parameter set with `‖q‖, ‖k‖, ‖μ‖` of order one and `S` scaled
/// so that `‖Sᵀo‖²` stays in `[0.05, 0.25]`, which keeps the fourth moment
/// of the exponential estimator (and hence the Monte Carlo noise) moderate.
pub fn random_mse_inputs(dim: usize, m: usize, rng: &mut impl Rng) -> MseInputs {
    let q = uniform_vec(dim, 0.5, rng);
    let k = uniform_vec(dim, 0.5, rng);
    let mu = uniform_vec(dim, 0.5, rng);
    let mut s = normal_matrix(dim, dim, rng);
    let o: Vec<f64> = q.iter().zip(&k).map(|(a, b)| a + b).collect();
    let sto: f64 = (0..dim)
        .map(|j| (0..dim).map(|i| s.get(i, j) * o[i]).sum::<f64>().powi(2))
        .sum();
    let want = rng.random_range(0.05..0.25);
    if sto > 0.0 {
        let c = (want / sto).sqrt();
        s = s.map(|v| v * c);
    }
    MseInputs { q, k, mu, s, m }
}

pub fn mse_check(cfg: &MseCheckConfig) -> Result<MseCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sets = Vec::with_capacity(cfg.sets);
    for _ in 0..cfg.sets {
        let inp = random_mse_inputs(cfg.dim, cfg.m, &mut rng);
        let rks = mc_mse(Estimator::SymmetricRks, &inp, cfg.trials, &mut rng)?;
        let prf = mc_mse(Estimator::Prf, &inp, cfg.trials, &mut rng)?;
        sets.push(MseSetCheck {
            rks_closed: mse_rks_closed_form(&inp)?,
            rks_mc: rks.mse,
            rks_std_error: rks.std_error,
            prf_closed: mse_prf_closed_form(&inp)?,
            prf_unsquared: mse_prf_closed_form_unsquared(&inp)?,
            prf_mc: prf.mse,
            prf_std_error: prf.std_error,
        });
    }
    Ok(MseCheckReport {
        sets,
        m: cfg.m,
        rel_tolerance: cfg.rel_tolerance,
    })
}

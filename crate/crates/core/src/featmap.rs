//! Random-feature maps whose inner products estimate a shift-invariant
//! kernel: trigonometric random kitchen sinks (RKS) and positive random
//! features (PRF).
//!
//! Both maps only need `Ωx`, the projection of an input onto the sampled
//! frequencies. That step is abstracted by [`Projection`] so a dense
//! [`FrequencyMatrix`](crate::spectral::FrequencyMatrix) and the structured
//! FastFood transform plug in interchangeably.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Var};

/// Default PRF exponent clamp.
pub const DEFAULT_CLAMP: f64 = 30.0;
/// Default attention denominator stabilizer.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Something that maps an input vector to its `M` frequency projections `Ωx`.
pub trait Projection {
    fn input_dim(&self) -> usize;
    fn num_frequencies(&self) -> usize;
    /// Writes `Ωx` into `out[..num_frequencies()]`.
    fn project_into(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Rks,
    Prf,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rks" => Ok(Self::Rks),
            "prf" => Ok(Self::Prf),
            other => Err(Error::config(format!("unknown feature map `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rks => "rks",
            Self::Prf => "prf",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub kind: FeatureKind,
    pub num_samples: usize,
    /// Attention denominator stabilizer.
    pub eps: f64,
    /// PRF exponents are clamped to `[-clamp, clamp]`.
    pub clamp: f64,
    /// Use `‖x‖²/2` in the PRF normalizer (softmax-kernel form) instead of `‖x‖²`.
    pub half_norm: bool,
}

impl FeatureMapSpec {
    pub fn rks(num_samples: usize) -> Self {
        Self::new(FeatureKind::Rks, num_samples)
    }

    pub fn prf(num_samples: usize) -> Self {
        Self::new(FeatureKind::Prf, num_samples)
    }

    pub fn new(kind: FeatureKind, num_samples: usize) -> Self {
        Self {
            kind,
            num_samples,
            eps: DEFAULT_EPS,
            clamp: DEFAULT_CLAMP,
            half_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("feature map needs at least one sample"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config(format!(
                "eps must be non-negative, got {}",
                self.eps
            )));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::config(format!(
                "clamp must be positive, got {}",
                self.clamp
            )));
        }
        Ok(())
    }

    /// Length of a feature vector: `2M` for RKS, `M` for PRF.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Rks => 2 * self.num_samples,
            FeatureKind::Prf => self.num_samples,
        }
    }

    fn norm_weight(&self) -> f64 {
        if self.half_norm {
            0.5
        } else {
            1.0
        }
    }

    fn check(&self, x: &[f64], proj: &dyn Projection) -> Result<()> {
        if proj.num_frequencies() != self.num_samples {
            return Err(Error::dim(format!(
                "feature map expects {} frequencies, projection has {}",
                self.num_samples,
                proj.num_frequencies()
            )));
        }
        if x.len() != proj.input_dim() {
            return Err(Error::dim(format!(
                "input of dimension {} against frequencies of dimension {}",
                x.len(),
                proj.input_dim()
            )));
        }
        Ok(())
    }

    /// Writes `φ(x)` into `out`, which must hold [`feature_dim`](Self::feature_dim) values.
    pub fn map_into(&self, x: &[f64], proj: &dyn Projection, out: &mut [f64]) -> Result<()> {
        self.check(x, proj)?;
        if out.len() != self.feature_dim() {
            return Err(Error::dim("feature buffer has the wrong length"));
        }
        let m = self.num_samples;
        let norm = 1.0 / (m as f64).sqrt();
        proj.project_into(x, &mut out[..m]);
        match self.kind {
            FeatureKind::Rks => {
                for i in 0..m {
                    let (s, c) = out[i].sin_cos();
                    out[i] = c * norm;
                    out[m + i] = s * norm;
                }
            }
            FeatureKind::Prf => {
                let sq: f64 = x.iter().map(|v| v * v).sum::<f64>() * self.norm_weight();
                for o in &mut out[..m] {
                    *o = (*o - sq).clamp(-self.clamp, self.clamp).exp() * norm;
                }
            }
        }
        Ok(())
    }

    pub fn map(&self, x: &[f64], proj: &dyn Projection) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.feature_dim()];
        self.map_into(x, proj, &mut out)?;
        Ok(out)
    }

    /// Applies the map to every row of `x`.
    pub fn map_rows(&self, x: &DenseArray, proj: &dyn Projection) -> Result<DenseArray> {
        let (rows, _) = x.dims2()?;
        let f = self.feature_dim();
        let mut out = DenseArray::zeros([rows, f]);
        for r in 0..rows {
            self.map_into(x.row(r), proj, out.row_mut(r))?;
        }
        Ok(out)
    }

    /// Differentiable feature map on the tape. `x` holds inputs as rows
    /// (`N×d`), `projected` the matching projections `XΩᵀ` (`N×M`).
    pub fn features<'t>(&self, x: Var<'t>, projected: Var<'t>) -> Result<Var<'t>> {
        let shape = projected.shape();
        if shape.len() != 2 || shape[1] != self.num_samples {
            return Err(Error::dim(format!(
                "projection shape {shape:?} does not carry {} frequencies",
                self.num_samples
            )));
        }
        let norm = 1.0 / (self.num_samples as f64).sqrt();
        match self.kind {
            FeatureKind::Rks => Ok(projected.cos_sin()?.scale(norm)),
            FeatureKind::Prf => {
                let sq = x.square().sum_axis(1)?.scale(-self.norm_weight());
                Ok(projected
                    .add_col(sq)?
                    .clamp(-self.clamp, self.clamp)
                    .exp()
                    .scale(norm))
            }
        }
    }
}

/// `(1/√M)[cos(Ωx); sin(Ωx)]`
pub fn rks_map(x: &[f64], omega: &dyn Projection) -> Result<Vec<f64>> {
    FeatureMapSpec::rks(omega.num_frequencies()).map(x, omega)
}

/// `(e^{-‖x‖²}/√M)[e^{ω₁ᵀx}, …]`, exponents clamped to `±clamp`.
pub fn prf_map(x: &[f64], omega: &dyn Projection, clamp: f64) -> Result<Vec<f64>> {
    let mut spec = FeatureMapSpec::prf(omega.num_frequencies());
    spec.clamp = clamp;
    spec.map(x, omega)
}

/// `φ(q)ᵀφ(k)` under a shared set of frequencies.
pub fn kernel_estimate(
    q: &[f64],
    k: &[f64],
    spec: &FeatureMapSpec,
    omega: &dyn Projection,
) -> Result<f64> {
    let fq = spec.map(q, omega)?;
    let fk = spec.map(k, omega)?;
    Ok(crate::tensor::kernels::dot(&fq, &fk))
}

/// Gaussian kernel `exp(-‖q−k‖²/2)` that both maps estimate under standard-normal frequencies.
pub fn gaussian_kernel(q: &[f64], k: &[f64]) -> f64 {
    let d2: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
    (-0.5 * d2).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::FrequencyMatrix;
    use crate::tensor::gradcheck::max_relative_error;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_omega(m: usize, d: usize, rng: &mut ChaCha8Rng) -> FrequencyMatrix {
        let data = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        FrequencyMatrix::from_array(DenseArray::new([m, d], data).unwrap())
    }

    #[test]
    fn zero_frequencies_give_constant_rks_features() {
        let omega = FrequencyMatrix::from_array(DenseArray::zeros([1, 3]));
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 5.0]] {
            assert_eq!(rks_map(&x, &omega).unwrap(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn prf_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let omega = normal_omega(16, 4, &mut rng);
        let phi = prf_map(&[0.0; 4], &omega, DEFAULT_CLAMP).unwrap();
        for &v in &phi {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let spec = FeatureMapSpec::prf(16);
        assert!(
            (kernel_estimate(&[0.0; 4], &[0.0; 4], &spec, &omega).unwrap() - 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn prf_clamp_keeps_features_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let omega = normal_omega(8, 2, &mut rng);
        let phi = prf_map(&[100.0, -100.0], &omega, DEFAULT_CLAMP).unwrap();
        assert!(phi.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let omega = FrequencyMatrix::from_array(DenseArray::zeros([4, 3]));
        assert!(matches!(
            rks_map(&[1.0, 2.0], &omega),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            prf_map(&[1.0], &omega, 30.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn half_norm_switches_to_softmax_kernel() {
        // With the ‖x‖²/2 normalizer the estimate targets exp(qᵀk).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = 1 << 16;
        let omega = normal_omega(m, 2, &mut rng);
        let mut spec = FeatureMapSpec::prf(m);
        spec.half_norm = true;
        let (q, k) = ([0.3, 0.1], [-0.2, 0.4]);
        let est = kernel_estimate(&q, &k, &spec, &omega).unwrap();
        let target = (q[0] * k[0] + q[1] * k[1]).exp();
        assert!((est - target).abs() < 0.02, "{est} vs {target}");
    }

    #[test]
    fn tape_features_match_plain_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let omega = normal_omega(5, 3, &mut rng);
        let x = DenseArray::new(
            [4, 3],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for spec in [FeatureMapSpec::rks(5), FeatureMapSpec::prf(5)] {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let ov = tape.leaf(omega.array().clone());
            let p = xv.matmul(ov.transpose().unwrap()).unwrap();
            let phi = spec.features(xv, p).unwrap().value();
            let plain = spec.map_rows(&x, &omega).unwrap();
            assert!(phi.max_abs_diff(&plain) < 1e-14);
        }
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseArray::new(
            [3, 4],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let om = DenseArray::new(
            [6, 4],
            (0..24).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap();
        for spec in [FeatureMapSpec::rks(6), FeatureMapSpec::prf(6)] {
            let err = max_relative_error(&[x.clone(), om.clone()], |_, v| {
                let p = v[0].matmul(v[1].transpose()?)?;
                Ok(spec.features(v[0], p)?.sin().sum())
            })
            .unwrap();
            assert!(err < 1e-3, "{:?}: {err}", spec.kind);
        }
    }
}

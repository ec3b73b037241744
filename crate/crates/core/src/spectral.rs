//! Learnable spectral samplers producing the frequency matrix `Ω`.
//!
//! Three families are provided:
//!
//! * **GMM**: a mixture of Gaussians with equal weights. Component `c`
//!   draws `ω = S_c n + μ_c` from standard-normal noise `n`, so gradients
//!   reach `μ_c` and the scale factor `S_c` (covariance `S_c S_cᵀ`).
//! * **FastFood**: `V = (1/(σ√d)) S H G Π H B`, applied with two fast
//!   Walsh–Hadamard transforms per block of `d` frequencies.
//! * **Generative**: a small MLP `g` pushing standard-normal noise through
//!   four affine/batch-norm/LeakyReLU layers and a final `tanh` layer.
//!
//! Each family has a differentiable form on the [`Tape`] (used for
//! training) and a plain sampling function returning a [`FrequencyMatrix`].
//! All randomness comes from a caller-supplied RNG.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::Projection;
use crate::tensor::{kernels, DenseArray, Tape, Var};

/// Hidden layers in the generator network.
pub const GENERATOR_HIDDEN_LAYERS: usize = 4;
/// Initial multiplier on the generator's `tanh` output.
pub const DEFAULT_OUTPUT_SCALE: f64 = 3.0;
const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Gmm,
    FastFood,
    Generative,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmm" => Ok(Self::Gmm),
            "fastfood" => Ok(Self::FastFood),
            "generative" | "gen" => Ok(Self::Generative),
            other => Err(Error::config(format!("unknown sampler `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gmm => "gmm",
            Self::FastFood => "fastfood",
            Self::Generative => "generative",
        })
    }
}

/// Which sampler drew a frequency matrix, and at which training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub sampler: SamplerKind,
    pub step: u64,
}

/// `M` frequency vectors of dimension `d`, stored as the rows of an `M×d` array.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMatrix {
    omega: DenseArray,
    provenance: Option<Provenance>,
}

impl FrequencyMatrix {
    pub fn from_array(omega: DenseArray) -> Self {
        Self {
            omega,
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn array(&self) -> &DenseArray {
        &self.omega
    }

    pub fn into_array(self) -> DenseArray {
        self.omega
    }

    pub fn num_rows(&self) -> usize {
        self.omega.rows()
    }

    pub fn dim(&self) -> usize {
        self.omega.cols()
    }

    pub fn provenance(&self) -> Option<Provenance> {
        self.provenance
    }
}

impl Projection for FrequencyMatrix {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn num_frequencies(&self) -> usize {
        self.num_rows()
    }

    fn project_into(&self, x: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.num_rows()) {
            *o = kernels::dot(self.omega.row(m), x);
        }
    }
}

fn standard_normal(shape: [usize; 2], rng: &mut impl Rng) -> DenseArray {
    let n = shape[0] * shape[1];
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    DenseArray::new(shape, data).expect("shape matches")
}

// ── GMM ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    /// `C×d`, one mean per row.
    pub means: DenseArray,
    /// `C` scale factors, each `d×d`.
    pub scales: Vec<DenseArray>,
}

impl GmmParams {
    pub fn new(means: DenseArray, scales: Vec<DenseArray>) -> Result<Self> {
        let (c, d) = means.dims2()?;
        if c == 0 {
            return Err(Error::config("GMM needs at least one component"));
        }
        if scales.len() != c {
            return Err(Error::dim(format!("{c} means but {} scales", scales.len())));
        }
        for s in &scales {
            if s.shape() != [d, d] {
                return Err(Error::dim(format!(
                    "scale of shape {:?}, want [{d}, {d}]",
                    s.shape()
                )));
            }
        }
        Ok(Self { means, scales })
    }

    /// Zero means and scales `scale·I`.
    pub fn isotropic(components: usize, dim: usize, scale: f64) -> Self {
        let s = DenseArray::eye(dim).map(|v| v * scale);
        Self {
            means: DenseArray::zeros([components, dim]),
            scales: vec![s; components],
        }
    }

    pub fn components(&self) -> usize {
        self.scales.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }
}

/// Frequencies per component for `m` samples over `c` components; the first
/// `m mod c` components receive one extra sample.
pub fn component_counts(m: usize, c: usize) -> Result<Vec<usize>> {
    if c == 0 {
        return Err(Error::config("GMM needs at least one component"));
    }
    if c > m {
        return Err(Error::config(format!(
            "{c} mixture components cannot share {m} frequencies"
        )));
    }
    Ok((0..c).map(|i| m / c + usize::from(i < m % c)).collect())
}

/// Fresh standard-normal base noise, one `m_c×d` block per component.
pub fn draw_gmm_noise(counts: &[usize], dim: usize, rng: &mut impl Rng) -> Vec<DenseArray> {
    counts
        .iter()
        .map(|&mc| standard_normal([mc, dim], rng))
        .collect()
}

/// `ω = S_c n + μ_c` for every buffered noise row, components in order.
pub fn gmm_frequencies<'t>(
    means: Var<'t>,
    scales: &[Var<'t>],
    noise: &[DenseArray],
) -> Result<Var<'t>> {
    if scales.len() != noise.len() {
        return Err(Error::dim("one noise block per component is required"));
    }
    let tape = means.tape();
    let mut blocks = Vec::with_capacity(scales.len());
    for (c, (scale, n)) in scales.iter().zip(noise).enumerate() {
        if n.rows() == 0 {
            continue;
        }
        let mu = means.slice_rows(c, c + 1)?;
        blocks.push(
            tape.leaf(n.clone())
                .matmul(scale.transpose()?)?
                .add_row(mu)?,
        );
    }
    Var::concat_rows(&blocks)
}

pub fn gmm_sample(params: &GmmParams, m: usize, rng: &mut impl Rng) -> Result<FrequencyMatrix> {
    let counts = component_counts(m, params.components())?;
    let noise = draw_gmm_noise(&counts, params.dim(), rng);
    let tape = Tape::new();
    let means = tape.leaf(params.means.clone());
    let scales: Vec<Var<'_>> = params.scales.iter().map(|s| tape.leaf(s.clone())).collect();
    let omega = gmm_frequencies(means, &scales, &noise)?.value();
    Ok(FrequencyMatrix::from_array((*omega).clone()))
}

// ── FastFood ────────────────────────────────────────────────────────────

/// Which FastFood diagonals receive gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Learnable {
    pub s: bool,
    pub g: bool,
    pub b: bool,
}

impl Learnable {
    pub const ALL: Self = Self {
        s: true,
        g: true,
        b: true,
    };
    pub const NONE: Self = Self {
        s: false,
        g: false,
        b: false,
    };
}

impl std::str::FromStr for Learnable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self::NONE;
        if s.eq_ignore_ascii_case("none") {
            return Ok(out);
        }
        for ch in s.chars() {
            match ch.to_ascii_lowercase() {
                's' => out.s = true,
                'g' => out.g = true,
                'b' => out.b = true,
                other => {
                    return Err(Error::config(format!(
                        "fastfood.learnable accepts letters from `sgb`, got `{other}`"
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for Learnable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        if self.s {
            s.push('s');
        }
        if self.g {
            s.push('g');
        }
        if self.b {
            s.push('b');
        }
        if s.is_empty() {
            s.push_str("none");
        }
        f.write_str(&s)
    }
}

/// One `d×d` block `S H G Π H B` of the FastFood product.
#[derive(Clone, Debug, PartialEq)]
pub struct FastFoodBlock {
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    /// `(Πx)_i = x_{perm[i]}`.
    pub perm: Vec<usize>,
}

impl FastFoodBlock {
    fn identity(d: usize) -> Self {
        Self {
            s: vec![1.0; d],
            g: vec![1.0; d],
            b: vec![1.0; d],
            perm: (0..d).collect(),
        }
    }

    fn draw_b(d: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    }

    fn draw_g(d: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..d).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn draw_perm(d: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..d).collect();
        p.shuffle(rng);
        p
    }

    /// Row-length correction: `s_i = r_i/‖G‖` with `r_i ~ χ(d)`, so every
    /// row of the block is distributed like a standard Gaussian row.
    fn draw_s(g: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = g.len();
        let chi2 = ChiSquared::new(d as f64).expect("positive degrees of freedom");
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        (0..d).map(|_| chi2.sample(rng).sqrt() / g_norm).collect()
    }

    pub fn sample(d: usize, rng: &mut impl Rng) -> Self {
        let b = Self::draw_b(d, rng);
        let g = Self::draw_g(d, rng);
        let perm = Self::draw_perm(d, rng);
        let s = Self::draw_s(&g, rng);
        Self { s, g, b, perm }
    }

    /// Redraws the permutation and every diagonal not marked learnable.
    pub fn redraw(&mut self, learnable: Learnable, rng: &mut impl Rng) {
        let d = self.perm.len();
        self.perm = Self::draw_perm(d, rng);
        if !learnable.b {
            self.b = Self::draw_b(d, rng);
        }
        if !learnable.g {
            self.g = Self::draw_g(d, rng);
        }
        if !learnable.s {
            self.s = Self::draw_s(&self.g, rng);
        }
    }

    /// `c · S H G Π H B x` in place, `x.len() == d`.
    fn apply_in_place(&self, x: &mut [f64], scratch: &mut [f64], c: f64) {
        for (xi, bi) in x.iter_mut().zip(&self.b) {
            *xi *= bi;
        }
        kernels::fwht(x);
        for (i, &p) in self.perm.iter().enumerate() {
            scratch[i] = x[p] * self.g[i];
        }
        kernels::fwht(scratch);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = c * self.s[i] * scratch[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastFoodParams {
    input_dim: usize,
    dim: usize,
    pub sigma: f64,
    pub learnable: Learnable,
    pub blocks: Vec<FastFoodBlock>,
}

fn fastfood_layout(input_dim: usize, num_samples: usize) -> Result<(usize, usize)> {
    if input_dim == 0 {
        return Err(Error::config("FastFood input dimension must be positive"));
    }
    let dim = input_dim.next_power_of_two();
    if num_samples == 0 || !num_samples.is_multiple_of(dim) {
        return Err(Error::config(format!(
            "FastFood needs the sample count ({num_samples}) to be a positive multiple of the padded dimension ({dim})"
        )));
    }
    Ok((dim, num_samples / dim))
}

impl FastFoodParams {
    /// Random blocks for `num_samples` frequencies over inputs of dimension
    /// `input_dim` (padded with zeros to the next power of two).
    pub fn sample(
        input_dim: usize,
        num_samples: usize,
        sigma: f64,
        learnable: Learnable,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (dim, nblocks) = fastfood_layout(input_dim, num_samples)?;
        if !(sigma > 0.0) {
            return Err(Error::config(format!(
                "FastFood sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            input_dim,
            dim,
            sigma,
            learnable,
            blocks: (0..nblocks)
                .map(|_| FastFoodBlock::sample(dim, rng))
                .collect(),
        })
    }

    /// All diagonals one, identity permutations, `σ = 1`.
    pub fn identity(input_dim: usize, num_samples: usize) -> Result<Self> {
        let (dim, nblocks) = fastfood_layout(input_dim, num_samples)?;
        Ok(Self {
            input_dim,
            dim,
            sigma: 1.0,
            learnable: Learnable::NONE,
            blocks: vec![FastFoodBlock::identity(dim); nblocks],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_samples(&self) -> usize {
        self.dim * self.blocks.len()
    }

    fn prefactor(&self) -> f64 {
        1.0 / (self.sigma * (self.dim as f64).sqrt())
    }

    /// `Vx` via fast Walsh–Hadamard transforms. `x` may have the unpadded
    /// input dimension or the padded one; the result has one length-`d`
    /// block per FastFood block.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim && x.len() != self.dim {
            return Err(Error::dim(format!(
                "FastFood input of length {}, expected {} or {}",
                x.len(),
                self.input_dim,
                self.dim
            )));
        }
        let mut out = vec![0.0; self.num_samples()];
        self.project_padded(x, &mut out);
        Ok(out)
    }

    fn project_padded(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let c = self.prefactor();
        let mut scratch = vec![0.0; d];
        for (block, chunk) in self.blocks.iter().zip(out.chunks_mut(d)) {
            chunk[..x.len()].copy_from_slice(x);
            chunk[x.len()..].fill(0.0);
            block.apply_in_place(chunk, &mut scratch, c);
        }
    }

    /// Explicit `M×d` matrix `V` (over the padded dimension).
    pub fn dense(&self) -> DenseArray {
        let d = self.dim;
        let h = kernels::hadamard(d);
        let c = self.prefactor();
        let mut out = DenseArray::zeros([self.num_samples(), d]);
        for (bi, block) in self.blocks.iter().enumerate() {
            // V_ij = c s_i Σ_k H_ik g_k H_{perm[k], j} b_j
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += h[i * d + k] * block.g[k] * h[block.perm[k] * d + j];
                    }
                    out.set(bi * d + i, j, c * block.s[i] * acc * block.b[j]);
                }
            }
        }
        out
    }

    /// The frequencies seen by unpadded inputs: the first `input_dim`
    /// columns of [`dense`](Self::dense).
    pub fn frequency_matrix(&self) -> FrequencyMatrix {
        let dense = self.dense();
        let m = dense.rows();
        let mut out = DenseArray::zeros([m, self.input_dim]);
        for r in 0..m {
            out.row_mut(r)
                .copy_from_slice(&dense.row(r)[..self.input_dim]);
        }
        FrequencyMatrix::from_array(out)
    }

    /// Redraws the permutations and every diagonal not marked learnable.
    pub fn redraw(&mut self, rng: &mut impl Rng) {
        for block in &mut self.blocks {
            block.redraw(self.learnable, rng);
        }
    }
}

impl Projection for FastFoodParams {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_frequencies(&self) -> usize {
        self.num_samples()
    }

    fn project_into(&self, x: &[f64], out: &mut [f64]) {
        self.project_padded(x, &mut out[..self.num_samples()]);
    }
}

/// Tape handles for one FastFood block.
#[derive(Clone, Debug)]
pub struct FastFoodBlockVars<'t> {
    pub s: Var<'t>,
    pub g: Var<'t>,
    pub b: Var<'t>,
    pub perm: Vec<usize>,
}

/// Differentiable `X Vᵀ` for row inputs `X` (`N×d_q`), returning `N×M`.
pub fn fastfood_project<'t>(
    x: Var<'t>,
    blocks: &[FastFoodBlockVars<'t>],
    dim: usize,
    sigma: f64,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] > dim {
        return Err(Error::dim(format!(
            "FastFood input {shape:?} wider than {dim}"
        )));
    }
    let padded = if shape[1] < dim {
        let zeros = x.tape().leaf(DenseArray::zeros([shape[0], dim - shape[1]]));
        Var::concat_cols(&[x, zeros])?
    } else {
        x
    };
    let c = 1.0 / (sigma * (dim as f64).sqrt());
    let mut outs = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let y = padded
            .mul_row(blk.b)?
            .fwht_rows()?
            .permute_cols(&blk.perm)?
            .mul_row(blk.g)?
            .fwht_rows()?
            .mul_row(blk.s)?
            .scale(c);
        outs.push(y);
    }
    Var::concat_cols(&outs)
}

// ── Generator ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLayer {
    /// `d×d`, applied to row vectors as `x W`.
    pub weight: DenseArray,
    pub bias: DenseArray,
    pub gamma: DenseArray,
    pub beta: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub hidden: Vec<GeneratorLayer>,
    pub out_weight: DenseArray,
    pub out_bias: DenseArray,
    /// Log of the positive multiplier on the `tanh` output.
    pub log_scale: f64,
    /// When false the output is plain `tanh`, confined to `(-1, 1)`.
    pub scaled_output: bool,
}

impl GeneratorParams {
    /// Weights `N(0, 1/d)`, zero biases, unit batch-norm gains.
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut weight = || standard_normal([dim, dim], rng).map(|v| v * std);
        let hidden = (0..GENERATOR_HIDDEN_LAYERS)
            .map(|_| GeneratorLayer {
                weight: weight(),
                bias: DenseArray::zeros([dim]),
                gamma: DenseArray::ones([dim]),
                beta: DenseArray::zeros([dim]),
            })
            .collect();
        Self {
            hidden,
            out_weight: weight(),
            out_bias: DenseArray::zeros([dim]),
            log_scale: DEFAULT_OUTPUT_SCALE.ln(),
            scaled_output: true,
        }
    }

    /// Every weight, bias and batch-norm gain zero.
    pub fn zeros(dim: usize) -> Self {
        let z = || DenseArray::zeros([dim, dim]);
        let zv = || DenseArray::zeros([dim]);
        Self {
            hidden: (0..GENERATOR_HIDDEN_LAYERS)
                .map(|_| GeneratorLayer {
                    weight: z(),
                    bias: zv(),
                    gamma: zv(),
                    beta: zv(),
                })
                .collect(),
            out_weight: z(),
            out_bias: zv(),
            log_scale: DEFAULT_OUTPUT_SCALE.ln(),
            scaled_output: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.out_bias.len()
    }

    pub fn output_scale(&self) -> f64 {
        if self.scaled_output {
            self.log_scale.exp()
        } else {
            1.0
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> GeneratorVars<'t> {
        GeneratorVars {
            hidden: self
                .hidden
                .iter()
                .map(|l| {
                    [
                        tape.leaf(l.weight.clone()),
                        tape.leaf(l.bias.clone()),
                        tape.leaf(l.gamma.clone()),
                        tape.leaf(l.beta.clone()),
                    ]
                })
                .collect(),
            out_weight: tape.leaf(self.out_weight.clone()),
            out_bias: tape.leaf(self.out_bias.clone()),
            log_scale: self
                .scaled_output
                .then(|| tape.leaf(DenseArray::scalar(self.log_scale))),
        }
    }
}

/// Tape handles for the generator: per hidden layer `[weight, bias, gamma, beta]`.
#[derive(Clone, Debug)]
pub struct GeneratorVars<'t> {
    pub hidden: Vec<[Var<'t>; 4]>,
    pub out_weight: Var<'t>,
    pub out_bias: Var<'t>,
    pub log_scale: Option<Var<'t>>,
}

/// `ω_m = g(n_m)` for every row of `noise` (`M×d`). Batch statistics are
/// taken over the `M` noise rows.
pub fn generator_frequencies<'t>(vars: &GeneratorVars<'t>, noise: &DenseArray) -> Result<Var<'t>> {
    if noise.rows() < 2 {
        return Err(Error::config(
            "generator sampling needs at least two noise rows for batch statistics",
        ));
    }
    let tape = vars.out_weight.tape();
    let mut x = tape.leaf(noise.clone());
    for [w, b, gamma, beta] in &vars.hidden {
        x = x
            .matmul(*w)?
            .add_row(*b)?
            .batch_norm(BATCH_NORM_EPS)?
            .mul_row(*gamma)?
            .add_row(*beta)?
            .leaky_relu();
    }
    let out = x.matmul(vars.out_weight)?.add_row(vars.out_bias)?.tanh();
    match vars.log_scale {
        Some(ls) => out.mul(ls.exp()),
        None => Ok(out),
    }
}

pub fn generator_sample(
    params: &GeneratorParams,
    m: usize,
    rng: &mut impl Rng,
) -> Result<FrequencyMatrix> {
    if m < 2 {
        return Err(Error::config(
            "generator sampling needs at least two samples for batch statistics",
        ));
    }
    let noise = standard_normal([m, params.dim()], rng);
    let tape = Tape::new();
    let vars = params.leaves(&tape);
    let omega = generator_frequencies(&vars, &noise)?.value();
    Ok(FrequencyMatrix::from_array((*omega).clone()))
}

// ── Resampling ──────────────────────────────────────────────────────────

/// Default number of training steps between frequency redraws.
pub const DEFAULT_RESAMPLE_INTERVAL: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResamplePolicy {
    interval: u64,
}

impl ResamplePolicy {
    pub fn new(interval: u64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::config("resample interval must be positive"));
        }
        Ok(Self { interval })
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn is_due(&self, step: u64) -> bool {
        step.is_multiple_of(self.interval)
    }
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        Self {
            interval: DEFAULT_RESAMPLE_INTERVAL,
        }
    }
}

/// Learnable parameters of one sampler.
#[derive(Clone, Debug, PartialEq)]
pub enum SpectralParams {
    Gmm(GmmParams),
    FastFood(FastFoodParams),
    Generative(GeneratorParams),
}

impl SpectralParams {
    pub fn kind(&self) -> SamplerKind {
        match self {
            Self::Gmm(_) => SamplerKind::Gmm,
            Self::FastFood(_) => SamplerKind::FastFood,
            Self::Generative(_) => SamplerKind::Generative,
        }
    }
}

/// A sampler with its own RNG stream and a current frequency matrix that is
/// replaced only on resample steps.
#[derive(Clone, Debug)]
pub struct SpectralSampler {
    params: SpectralParams,
    num_samples: usize,
    policy: ResamplePolicy,
    rng: ChaCha8Rng,
    current: Option<FrequencyMatrix>,
}

impl SpectralSampler {
    pub fn new(
        params: SpectralParams,
        num_samples: usize,
        policy: ResamplePolicy,
        seed: u64,
    ) -> Result<Self> {
        match &params {
            SpectralParams::Gmm(p) => {
                component_counts(num_samples, p.components())?;
            }
            SpectralParams::FastFood(p) => {
                if p.num_samples() != num_samples {
                    return Err(Error::config(format!(
                        "FastFood blocks carry {} frequencies, sampler asked for {num_samples}",
                        p.num_samples()
                    )));
                }
            }
            SpectralParams::Generative(_) => {
                if num_samples < 2 {
                    return Err(Error::config(
                        "generator sampling needs at least two samples",
                    ));
                }
            }
        }
        Ok(Self {
            params,
            num_samples,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current: None,
        })
    }

    pub fn params(&self) -> &SpectralParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut SpectralParams {
        &mut self.params
    }

    pub fn frequencies(&self) -> Option<&FrequencyMatrix> {
        self.current.as_ref()
    }

    fn draw(&mut self, step: u64) -> Result<FrequencyMatrix> {
        let kind = self.params.kind();
        let omega = match &mut self.params {
            SpectralParams::Gmm(p) => gmm_sample(p, self.num_samples, &mut self.rng)?,
            SpectralParams::FastFood(p) => {
                if self.current.is_some() {
                    p.redraw(&mut self.rng);
                }
                p.frequency_matrix()
            }
            SpectralParams::Generative(p) => generator_sample(p, self.num_samples, &mut self.rng)?,
        };
        Ok(omega.with_provenance(Provenance {
            sampler: kind,
            step,
        }))
    }

    /// Draws a new `Ω` iff `step` is a multiple of the interval (or nothing
    /// has been drawn yet); otherwise returns the previous matrix unchanged.
    pub fn maybe_resample(&mut self, step: u64) -> Result<&FrequencyMatrix> {
        if self.current.is_none() || self.policy.is_due(step) {
            let omega = self.draw(step)?;
            self.current = Some(omega);
        }
        Ok(self.current.as_ref().expect("drawn above"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_relative_error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_scale_gmm_returns_the_mean() {
        let means = DenseArray::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let p = GmmParams::new(means, vec![DenseArray::zeros([2, 2])]).unwrap();
        let omega = gmm_sample(&p, 7, &mut rng(0)).unwrap();
        for r in 0..7 {
            assert_eq!(omega.array().row(r), &[2.0, -1.0]);
        }
    }

    #[test]
    fn symmetric_pair_rows_in_component_order() {
        let means = DenseArray::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let z = DenseArray::zeros([2, 2]);
        let p = GmmParams::new(means, vec![z.clone(), z]).unwrap();
        let omega = gmm_sample(&p, 4, &mut rng(1)).unwrap();
        let rows: Vec<&[f64]> = (0..4).map(|r| omega.array().row(r)).collect();
        assert_eq!(
            rows,
            vec![&[1.0, 0.0][..], &[1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0]]
        );
    }

    #[test]
    fn uneven_split_favours_first_components() {
        assert_eq!(component_counts(7, 3).unwrap(), vec![3, 2, 2]);
        assert!(matches!(component_counts(2, 3), Err(Error::Config(_))));
        let p = GmmParams::isotropic(3, 2, 1.0);
        assert!(matches!(
            gmm_sample(&p, 2, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gmm_sampling_is_bit_reproducible() {
        let p = GmmParams::isotropic(2, 3, 0.7);
        let a = gmm_sample(&p, 10, &mut rng(42)).unwrap();
        let b = gmm_sample(&p, 10, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gmm_gradients_reach_means_and_scales() {
        let mut r = rng(5);
        let noise = draw_gmm_noise(&[3, 2], 3, &mut r);
        let means = standard_normal([2, 3], &mut r);
        let s0 = standard_normal([3, 3], &mut r);
        let s1 = standard_normal([3, 3], &mut r);
        let err = max_relative_error(&[means, s0, s1], |_, v| {
            Ok(gmm_frequencies(v[0], &v[1..], &noise)?.cos().sum())
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn identity_fastfood_is_scaled_identity() {
        let p = FastFoodParams::identity(4, 4).unwrap();
        assert_eq!(
            p.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![2.0, 4.0, 6.0, 8.0]
        );
        assert!(p.dense().max_abs_diff(&DenseArray::eye(4).map(|v| 2.0 * v)) < 1e-15);
    }

    #[test]
    fn fastfood_layout_errors() {
        assert!(matches!(
            FastFoodParams::sample(4, 6, 1.0, Learnable::ALL, &mut rng(0)),
            Err(Error::Config(_))
        ));
        // d_q = 5 pads to 8
        let p = FastFoodParams::sample(5, 16, 1.0, Learnable::ALL, &mut rng(0)).unwrap();
        assert_eq!((p.dim(), p.blocks.len()), (8, 2));
        assert!(p.apply(&[0.0; 3]).is_err());
    }

    #[test]
    fn fastfood_fast_matches_dense_with_padding() {
        let p = FastFoodParams::sample(5, 16, 1.3, Learnable::ALL, &mut rng(7)).unwrap();
        let x = [0.3, -1.0, 0.5, 2.0, 0.1];
        let fast = p.apply(&x).unwrap();
        let dense = p.frequency_matrix();
        let mut slow = vec![0.0; 16];
        dense.project_into(&x, &mut slow);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fastfood_gradients() {
        let mut r = rng(8);
        let p = FastFoodParams::sample(3, 8, 1.0, Learnable::ALL, &mut r).unwrap();
        let x = standard_normal([2, 3], &mut r);
        let blocks = p.blocks.clone();
        let mut inputs = vec![x];
        for b in &blocks {
            inputs.push(DenseArray::new([4], b.s.clone()).unwrap());
            inputs.push(DenseArray::new([4], b.g.clone()).unwrap());
            inputs.push(DenseArray::new([4], b.b.clone()).unwrap());
        }
        let err = max_relative_error(&inputs, |_, v| {
            let bv: Vec<FastFoodBlockVars<'_>> = blocks
                .iter()
                .enumerate()
                .map(|(i, b)| FastFoodBlockVars {
                    s: v[1 + 3 * i],
                    g: v[2 + 3 * i],
                    b: v[3 + 3 * i],
                    perm: b.perm.clone(),
                })
                .collect();
            Ok(fastfood_project(v[0], &bv, 4, 1.0)?.sin().sum())
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn tape_fastfood_matches_plain_apply() {
        let mut r = rng(9);
        let p = FastFoodParams::sample(6, 16, 0.8, Learnable::ALL, &mut r).unwrap();
        let x = standard_normal([3, 6], &mut r);
        let tape = Tape::new();
        let bv: Vec<_> = p
            .blocks
            .iter()
            .map(|b| FastFoodBlockVars {
                s: tape.leaf(DenseArray::new([8], b.s.clone()).unwrap()),
                g: tape.leaf(DenseArray::new([8], b.g.clone()).unwrap()),
                b: tape.leaf(DenseArray::new([8], b.b.clone()).unwrap()),
                perm: b.perm.clone(),
            })
            .collect();
        let y = fastfood_project(tape.leaf(x.clone()), &bv, 8, p.sigma)
            .unwrap()
            .value();
        for row in 0..3 {
            let plain = p.apply(x.row(row)).unwrap();
            for (a, b) in y.row(row).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_generator_gives_zero_frequencies() {
        let p = GeneratorParams::zeros(4);
        let omega = generator_sample(&p, 8, &mut rng(0)).unwrap();
        assert!(omega.array().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_output_range() {
        let mut r = rng(1);
        let mut p = GeneratorParams::random(4, &mut r);
        let omega = generator_sample(&p, 64, &mut r).unwrap();
        let s = p.output_scale();
        assert!((s - 3.0).abs() < 1e-12);
        assert!(omega.array().data().iter().all(|v| v.abs() < s));
        p.scaled_output = false;
        let omega = generator_sample(&p, 64, &mut r).unwrap();
        assert!(omega.array().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn generator_needs_a_batch() {
        let p = GeneratorParams::random(3, &mut rng(0));
        assert!(matches!(
            generator_sample(&p, 1, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generator_first_layer_gradient() {
        let mut r = rng(2);
        let p = GeneratorParams::random(3, &mut r);
        let noise = standard_normal([6, 3], &mut r);
        let w0 = p.hidden[0].weight.clone();
        let err = max_relative_error(&[w0], |tape, v| {
            let mut vars = p.leaves(tape);
            vars.hidden[0][0] = v[0];
            Ok(generator_frequencies(&vars, &noise)?.sin().sum())
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn resample_policy() {
        let p = SpectralParams::Gmm(GmmParams::isotropic(1, 2, 1.0));
        let mut s = SpectralSampler::new(p, 4, ResamplePolicy::new(100).unwrap(), 3).unwrap();
        let first = s.maybe_resample(100).unwrap().clone();
        assert_eq!(first.provenance().unwrap().step, 100);
        let next = s.maybe_resample(101).unwrap().clone();
        assert_eq!(first, next);
        let later = s.maybe_resample(200).unwrap().clone();
        assert_eq!(later.provenance().unwrap().step, 200);
        assert_ne!(later.array(), first.array());
        assert!(ResamplePolicy::new(0).is_err());
    }

    #[test]
    fn interval_one_redraws_every_step() {
        let p = SpectralParams::Gmm(GmmParams::isotropic(2, 3, 0.5));
        let mut s = SpectralSampler::new(p, 8, ResamplePolicy::new(1).unwrap(), 11).unwrap();
        let draws: Vec<DenseArray> = (1..=10)
            .map(|step| s.maybe_resample(step).unwrap().array().clone())
            .collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j]);
            }
        }
    }

    #[test]
    fn learnable_flags_parse() {
        assert_eq!("sgb".parse::<Learnable>().unwrap(), Learnable::ALL);
        assert_eq!("none".parse::<Learnable>().unwrap(), Learnable::NONE);
        let s: Learnable = "s".parse().unwrap();
        assert!(s.s && !s.g && !s.b);
        assert_eq!(s.to_string(), "s");
        assert!("x".parse::<Learnable>().is_err());
    }
}

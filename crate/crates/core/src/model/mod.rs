//! A small pre-norm transformer encoder over kernelized attention, with a
//! classifier head, AdamW training and checkpointing.

pub mod checkpoint;
pub mod optim;
pub mod params;

pub use checkpoint::{Checkpoint, RngState};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::featmap::{FeatureKind, FeatureMapSpec};
use crate::spectral::{
    self, component_counts, draw_gmm_noise, FastFoodBlock, FastFoodBlockVars, FastFoodParams,
    GeneratorParams, GeneratorVars, Learnable, ResamplePolicy, SamplerKind,
};
use crate::tensor::{DenseArray, Tape, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention mechanism used inside every encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Softmax,
    Kernel {
        sampler: SamplerKind,
        features: FeatureKind,
    },
}

impl Variant {
    /// The six learnable-kernel variants.
    pub const KERNELIZED: [Variant; 6] = [
        Variant::kernel(SamplerKind::Gmm, FeatureKind::Rks),
        Variant::kernel(SamplerKind::Gmm, FeatureKind::Prf),
        Variant::kernel(SamplerKind::FastFood, FeatureKind::Rks),
        Variant::kernel(SamplerKind::FastFood, FeatureKind::Prf),
        Variant::kernel(SamplerKind::Generative, FeatureKind::Rks),
        Variant::kernel(SamplerKind::Generative, FeatureKind::Prf),
    ];

    pub const fn kernel(sampler: SamplerKind, features: FeatureKind) -> Self {
        Variant::Kernel { sampler, features }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Softmax => f.write_str("softmax"),
            Variant::Kernel { sampler, features } => write!(f, "{sampler}-{features}"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("softmax") {
            return Ok(Variant::Softmax);
        }
        let (sampler, features) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::config(format!("unknown attention variant `{s}`")))?;
        Ok(Variant::kernel(sampler.parse()?, features.parse()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    Learnable,
    Sinusoidal,
}

impl std::str::FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(Self::Learnable),
            "sinusoidal" => Ok(Self::Sinusoidal),
            _ => Err(Error::config(format!("unknown positional encoding `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Final embedding of the first position.
    First,
    /// A learnable token prepended to every sequence.
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "position0" => Ok(Self::First),
            "cls" => Ok(Self::Cls),
            _ => Err(Error::config(format!("unknown pooling `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Per-head query, key and value width.
    pub d_head: usize,
    pub variant: Variant,
    /// Frequencies per head (`M`).
    pub num_samples: usize,
    pub gmm_components: usize,
    /// Initial GMM scale factor `S = c·I`.
    pub gmm_init_scale: f64,
    pub fastfood_learnable: Learnable,
    pub fastfood_sigma: f64,
    pub generator_scaled_output: bool,
    /// Initial multiplier on the generator's `tanh` output.
    pub generator_output_scale: f64,
    pub feature_eps: f64,
    pub prf_clamp: f64,
    pub positional: Positional,
    pub pooling: Pooling,
    pub dropout: f64,
    pub max_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub classifier_hidden: usize,
    /// Query/key projections start at this multiple of the default
    /// `1/√d_model` scale.
    pub qk_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            d_model: 64,
            d_ff: 64,
            heads: 4,
            d_head: 16,
            variant: Variant::kernel(SamplerKind::Gmm, FeatureKind::Rks),
            num_samples: 64,
            gmm_components: 2,
            gmm_init_scale: 1.0,
            fastfood_learnable: Learnable::ALL,
            fastfood_sigma: 1.0,
            generator_scaled_output: true,
            generator_output_scale: crate::spectral::DEFAULT_OUTPUT_SCALE,
            feature_eps: crate::featmap::DEFAULT_EPS,
            prf_clamp: crate::featmap::DEFAULT_CLAMP,
            positional: Positional::Learnable,
            pooling: Pooling::First,
            dropout: 0.1,
            max_len: 50,
            input_dim: 3,
            num_classes: 9,
            classifier_hidden: 64,
            qk_init_scale: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("num_samples", self.num_samples),
            ("max_len", self.max_len),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.heads * self.d_head != self.d_model {
            return Err(Error::config(format!(
                "heads × d_head = {} must equal d_model = {}",
                self.heads * self.d_head,
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if let Variant::Kernel { sampler, .. } = self.variant {
            self.feature_spec().validate()?;
            match sampler {
                SamplerKind::Gmm => {
                    component_counts(self.num_samples, self.gmm_components)?;
                }
                SamplerKind::FastFood => {
                    let d = self.d_head.next_power_of_two();
                    if !self.num_samples.is_multiple_of(d) {
                        return Err(Error::config(format!(
                            "FastFood needs num_samples ({}) to be a multiple of {d}",
                            self.num_samples
                        )));
                    }
                    if !(self.fastfood_sigma > 0.0) {
                        return Err(Error::config("fastfood.sigma must be positive"));
                    }
                }
                SamplerKind::Generative => {
                    if self.num_samples < 2 {
                        return Err(Error::config(
                            "the generative sampler needs at least two samples",
                        ));
                    }
                    if !(self.generator_output_scale > 0.0) {
                        return Err(Error::config("generator.output_scale must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureMapSpec {
        let kind = match self.variant {
            Variant::Kernel { features, .. } => features,
            Variant::Softmax => FeatureKind::Prf,
        };
        let mut spec = FeatureMapSpec::new(kind, self.num_samples);
        spec.eps = self.feature_eps;
        spec.clamp = self.prf_clamp;
        spec
    }

    fn positions(&self) -> usize {
        match self.pooling {
            Pooling::First => self.max_len,
            Pooling::Cls => self.max_len + 1,
        }
    }
}

#[derive(Clone, Debug)]
struct GmmSlots {
    mu: usize,
    scales: Vec<usize>,
}

#[derive(Clone, Debug)]
struct GeneratorSlots {
    hidden: Vec<[usize; 4]>,
    out_w: usize,
    out_b: usize,
    log_scale: Option<usize>,
}

#[derive(Clone, Debug)]
enum KernelSlots {
    None,
    Gmm(Vec<GmmSlots>),
    /// Per head, per block: `[s, g, b]`.
    FastFood(Vec<Vec<[usize; 3]>>),
    Generative(GeneratorSlots),
}

#[derive(Clone, Debug)]
struct LayerSlots {
    ln1: [usize; 2],
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2: [usize; 2],
    ff1: [usize; 2],
    ff2: [usize; 2],
    kernel: KernelSlots,
}

#[derive(Clone, Debug)]
struct Slots {
    embed: [usize; 2],
    pos: usize,
    cls: Option<usize>,
    layers: Vec<LayerSlots>,
    final_ln: [usize; 2],
    hidden: [usize; 2],
    out: [usize; 2],
}

/// Non-trainable sampler state that persists between resamples.
#[derive(Clone, Debug, PartialEq)]
enum LayerNoise {
    None,
    /// Per head, per component: `m_c × d_head` standard-normal rows.
    Gmm(Vec<Vec<DenseArray>>),
    /// Per head, per block: the permutation.
    FastFood(Vec<Vec<Vec<usize>>>),
    /// `M × d_head`, shared by every head of the layer.
    Generative(DenseArray),
}

/// Results of one forward pass.
pub struct ForwardOutput<'t> {
    /// Pooled sequence representation, `batch × d_model`.
    pub pooled: Var<'t>,
    /// Classifier hidden layer before its activation, `batch × hidden`.
    pub hidden: Var<'t>,
    /// `batch × num_classes`.
    pub logits: Var<'t>,
}

fn normal(shape: [usize; 2], std: f64, rng: &mut impl Rng) -> DenseArray {
    let n = shape[0] * shape[1];
    DenseArray::new(
        shape,
        (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("shape matches")
}

fn sinusoidal(positions: usize, d: usize) -> DenseArray {
    let mut out = DenseArray::zeros([positions, d]);
    for p in 0..positions {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            out.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    pub params: ParamStore,
    slots: Slots,
    noise: Vec<LayerNoise>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, dh) = (c.d_model, c.d_head);
        let mut p = ParamStore::new();
        let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let embed = [
            p.insert("embed.w", normal([c.input_dim, d], 1.0, rng), true),
            p.insert("embed.b", DenseArray::zeros([d]), true),
        ];
        let pos = match c.positional {
            Positional::Learnable => p.insert("pos", normal([c.positions(), d], 0.1, rng), true),
            Positional::Sinusoidal => p.insert("pos", sinusoidal(c.positions(), d), false),
        };
        let cls =
            (c.pooling == Pooling::Cls).then(|| p.insert("cls", normal([1, d], 1.0, rng), true));

        let mut layers = Vec::with_capacity(c.layers);
        let mut noise = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let ln = |p: &mut ParamStore, tag: &str| {
                [
                    p.insert(name(&format!("{tag}.g")), DenseArray::ones([d]), true),
                    p.insert(name(&format!("{tag}.b")), DenseArray::zeros([d]), true),
                ]
            };
            let ln1 = ln(&mut p, "ln1");
            let qk_std = c.qk_init_scale * lecun(d);
            let wq = p.insert(name("wq"), normal([d, d], qk_std, rng), true);
            let wk = p.insert(name("wk"), normal([d, d], qk_std, rng), true);
            let wv = p.insert(name("wv"), normal([d, d], lecun(d), rng), true);
            let wo = p.insert(name("wo"), normal([d, d], lecun(d), rng), true);
            let bo = p.insert(name("bo"), DenseArray::zeros([d]), true);
            let ln2 = ln(&mut p, "ln2");
            let ff1 = [
                p.insert(name("ff1.w"), normal([d, c.d_ff], lecun(d), rng), true),
                p.insert(name("ff1.b"), DenseArray::zeros([c.d_ff]), true),
            ];
            let ff2 = [
                p.insert(name("ff2.w"), normal([c.d_ff, d], lecun(c.d_ff), rng), true),
                p.insert(name("ff2.b"), DenseArray::zeros([d]), true),
            ];
            let (kernel, layer_noise) = Self::init_kernel(c, l, &mut p, rng)?;
            layers.push(LayerSlots {
                ln1,
                wq,
                wk,
                wv,
                wo,
                bo,
                ln2,
                ff1,
                ff2,
                kernel,
            });
            noise.push(layer_noise);
        }
        let _ = dh;
        let final_ln = [
            p.insert("final_ln.g", DenseArray::ones([d]), true),
            p.insert("final_ln.b", DenseArray::zeros([d]), true),
        ];
        let hidden = [
            p.insert(
                "classifier.hidden.w",
                normal([d, c.classifier_hidden], lecun(d), rng),
                true,
            ),
            p.insert(
                "classifier.hidden.b",
                DenseArray::zeros([c.classifier_hidden]),
                true,
            ),
        ];
        let out = [
            p.insert(
                "classifier.out.w",
                normal(
                    [c.classifier_hidden, c.num_classes],
                    lecun(c.classifier_hidden),
                    rng,
                ),
                true,
            ),
            p.insert("classifier.out.b", DenseArray::zeros([c.num_classes]), true),
        ];
        Ok(Self {
            config,
            params: p,
            slots: Slots {
                embed,
                pos,
                cls,
                layers,
                final_ln,
                hidden,
                out,
            },
            noise,
        })
    }

    fn init_kernel(
        c: &EncoderConfig,
        l: usize,
        p: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<(KernelSlots, LayerNoise)> {
        let dh = c.d_head;
        let sampler = match c.variant {
            Variant::Softmax => return Ok((KernelSlots::None, LayerNoise::None)),
            Variant::Kernel { sampler, .. } => sampler,
        };
        Ok(match sampler {
            SamplerKind::Gmm => {
                let counts = component_counts(c.num_samples, c.gmm_components)?;
                let mut slots = Vec::with_capacity(c.heads);
                let mut noise = Vec::with_capacity(c.heads);
                for h in 0..c.heads {
                    let mu = p.insert(
                        format!("layer{l}.head{h}.gmm.mu"),
                        DenseArray::zeros([c.gmm_components, dh]),
                        true,
                    );
                    let scales = (0..c.gmm_components)
                        .map(|comp| {
                            p.insert(
                                format!("layer{l}.head{h}.gmm.s{comp}"),
                                DenseArray::eye(dh).map(|v| v * c.gmm_init_scale),
                                true,
                            )
                        })
                        .collect();
                    slots.push(GmmSlots { mu, scales });
                    noise.push(draw_gmm_noise(&counts, dh, rng));
                }
                (KernelSlots::Gmm(slots), LayerNoise::Gmm(noise))
            }
            SamplerKind::FastFood => {
                let mut slots = Vec::with_capacity(c.heads);
                let mut perms = Vec::with_capacity(c.heads);
                let learn = c.fastfood_learnable;
                for h in 0..c.heads {
                    let ff =
                        FastFoodParams::sample(dh, c.num_samples, c.fastfood_sigma, learn, rng)?;
                    let dim = ff.dim();
                    let mut head_slots = Vec::with_capacity(ff.blocks.len());
                    let mut head_perms = Vec::with_capacity(ff.blocks.len());
                    for (b, block) in ff.blocks.into_iter().enumerate() {
                        let key = |f: &str| format!("layer{l}.head{h}.fastfood{b}.{f}");
                        let arr = |v: Vec<f64>| DenseArray::new([dim], v).expect("block length");
                        head_slots.push([
                            p.insert(key("s"), arr(block.s), learn.s),
                            p.insert(key("g"), arr(block.g), learn.g),
                            p.insert(key("b"), arr(block.b), learn.b),
                        ]);
                        head_perms.push(block.perm);
                    }
                    slots.push(head_slots);
                    perms.push(head_perms);
                }
                (KernelSlots::FastFood(slots), LayerNoise::FastFood(perms))
            }
            SamplerKind::Generative => {
                let mut g = GeneratorParams::random(dh, rng);
                g.scaled_output = c.generator_scaled_output;
                g.log_scale = c.generator_output_scale.ln();
                let key = |s: &str| format!("layer{l}.gen.{s}");
                let hidden = g
                    .hidden
                    .iter()
                    .enumerate()
                    .map(|(i, layer)| {
                        [
                            p.insert(key(&format!("h{i}.w")), layer.weight.clone(), true),
                            p.insert(key(&format!("h{i}.b")), layer.bias.clone(), true),
                            p.insert(key(&format!("h{i}.gamma")), layer.gamma.clone(), true),
                            p.insert(key(&format!("h{i}.beta")), layer.beta.clone(), true),
                        ]
                    })
                    .collect();
                let out_w = p.insert(key("out.w"), g.out_weight.clone(), true);
                let out_b = p.insert(key("out.b"), g.out_bias.clone(), true);
                let log_scale = g
                    .scaled_output
                    .then(|| p.insert(key("log_scale"), DenseArray::scalar(g.log_scale), true));
                let noise = normal([c.num_samples, dh], 1.0, rng);
                (
                    KernelSlots::Generative(GeneratorSlots {
                        hidden,
                        out_w,
                        out_b,
                        log_scale,
                    }),
                    LayerNoise::Generative(noise),
                )
            }
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Draws fresh base noise (GMM, generative) or fresh permutations and
    /// non-learnable diagonals (FastFood) for every layer and head.
    pub fn resample(&mut self, rng: &mut impl Rng) {
        let c = &self.config;
        for (slots, noise) in self.slots.layers.iter().zip(&mut self.noise) {
            match (&slots.kernel, noise) {
                (KernelSlots::Gmm(_), LayerNoise::Gmm(heads)) => {
                    let counts =
                        component_counts(c.num_samples, c.gmm_components).expect("validated");
                    for h in heads.iter_mut() {
                        *h = draw_gmm_noise(&counts, c.d_head, rng);
                    }
                }
                (KernelSlots::FastFood(heads), LayerNoise::FastFood(perms)) => {
                    for (head_slots, head_perms) in heads.iter().zip(perms.iter_mut()) {
                        for (&[s, g, b], perm) in head_slots.iter().zip(head_perms.iter_mut()) {
                            let mut block = FastFoodBlock {
                                s: self.params.get(s).data().to_vec(),
                                g: self.params.get(g).data().to_vec(),
                                b: self.params.get(b).data().to_vec(),
                                perm: std::mem::take(perm),
                            };
                            block.redraw(c.fastfood_learnable, rng);
                            self.params.get_mut(s).data_mut().copy_from_slice(&block.s);
                            self.params.get_mut(g).data_mut().copy_from_slice(&block.g);
                            self.params.get_mut(b).data_mut().copy_from_slice(&block.b);
                            *perm = block.perm;
                        }
                    }
                }
                (KernelSlots::Generative(_), LayerNoise::Generative(n)) => {
                    *n = normal([c.num_samples, c.d_head], 1.0, rng);
                }
                _ => {}
            }
        }
    }

    /// Frequency matrix (`M × d_head`) currently used by `head` of `layer`,
    /// for samplers that form one explicitly.
    pub fn frequencies(&self, layer: usize, head: usize) -> Result<Option<DenseArray>> {
        let tape = Tape::new();
        let vars = self.params.leaves(&tape);
        let omega = match (&self.slots.layers[layer].kernel, &self.noise[layer]) {
            (KernelSlots::Gmm(heads), LayerNoise::Gmm(noise)) => {
                Some(self.gmm_omega(&vars, &heads[head], &noise[head])?)
            }
            (KernelSlots::Generative(g), LayerNoise::Generative(noise)) => {
                Some(self.generator_omega(&vars, g, noise)?)
            }
            (KernelSlots::FastFood(heads), LayerNoise::FastFood(perms)) => {
                let mut ff = FastFoodParams::identity(self.config.d_head, self.config.num_samples)?;
                ff.sigma = self.config.fastfood_sigma;
                for (block, (&[s, g, b], perm)) in ff
                    .blocks
                    .iter_mut()
                    .zip(heads[head].iter().zip(&perms[head]))
                {
                    block.s = self.params.get(s).data().to_vec();
                    block.g = self.params.get(g).data().to_vec();
                    block.b = self.params.get(b).data().to_vec();
                    block.perm = perm.clone();
                }
                return Ok(Some(ff.frequency_matrix().into_array()));
            }
            _ => None,
        };
        Ok(omega.map(|v| (*v.value()).clone()))
    }

    fn gmm_omega<'t>(
        &self,
        vars: &[Var<'t>],
        slots: &GmmSlots,
        noise: &[DenseArray],
    ) -> Result<Var<'t>> {
        let scales: Vec<Var<'t>> = slots.scales.iter().map(|&s| vars[s]).collect();
        spectral::gmm_frequencies(vars[slots.mu], &scales, noise)
    }

    fn generator_omega<'t>(
        &self,
        vars: &[Var<'t>],
        g: &GeneratorSlots,
        noise: &DenseArray,
    ) -> Result<Var<'t>> {
        let gv = GeneratorVars {
            hidden: g.hidden.iter().map(|h| h.map(|i| vars[i])).collect(),
            out_weight: vars[g.out_w],
            out_bias: vars[g.out_b],
            log_scale: g.log_scale.map(|i| vars[i]),
        };
        spectral::generator_frequencies(&gv, noise)
    }

    /// Runs the encoder on `batch` sequences stacked as rows of `inputs`
    /// (`batch·L × input_dim`). Dropout is applied only when `dropout_rng`
    /// is given.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        inputs: &DenseArray,
        batch: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<'t>> {
        let c = &self.config;
        let s = &self.slots;
        if vars.len() != self.params.len() {
            return Err(Error::dim("one variable per parameter is required"));
        }
        let (n, din) = inputs.dims2()?;
        if batch == 0 || n % batch != 0 || din != c.input_dim {
            return Err(Error::dim(format!(
                "inputs {:?} do not hold {batch} sequences of {}-dimensional tokens",
                inputs.shape(),
                c.input_dim
            )));
        }
        let len = n / batch;
        if len == 0 || len > c.max_len {
            return Err(Error::dim(format!(
                "sequence length {len} outside 1..={}",
                c.max_len
            )));
        }

        let x = tape.leaf(inputs.clone());
        let mut h = x.matmul(vars[s.embed[0]])?.add_row(vars[s.embed[1]])?;
        let seq = match s.cls {
            Some(cls) => {
                let table = Var::concat_rows(&[vars[cls], h])?;
                let index: Vec<usize> = (0..batch)
                    .flat_map(|b| std::iter::once(0).chain((0..len).map(move |i| 1 + b * len + i)))
                    .collect();
                h = table.gather_rows(&index)?;
                len + 1
            }
            None => len,
        };
        let pos_index: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        h = h.add(vars[s.pos].gather_rows(&pos_index)?)?;

        for (l, slots) in s.layers.iter().enumerate() {
            let a = self.attention(l, slots, vars, layer_norm(h, vars, slots.ln1)?, seq)?;
            h = h.add(dropout(a, c.dropout, dropout_rng.as_deref_mut())?)?;
            let f = layer_norm(h, vars, slots.ln2)?
                .matmul(vars[slots.ff1[0]])?
                .add_row(vars[slots.ff1[1]])?
                .gelu()
                .matmul(vars[slots.ff2[0]])?
                .add_row(vars[slots.ff2[1]])?;
            h = h.add(dropout(f, c.dropout, dropout_rng.as_deref_mut())?)?;
        }

        let first: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let pooled = h.gather_rows(&first)?;
        let z = layer_norm(pooled, vars, s.final_ln)?;
        let hidden = z.matmul(vars[s.hidden[0]])?.add_row(vars[s.hidden[1]])?;
        let logits = hidden
            .gelu()
            .matmul(vars[s.out[0]])?
            .add_row(vars[s.out[1]])?;
        Ok(ForwardOutput {
            pooled,
            hidden,
            logits,
        })
    }

    fn attention<'t>(
        &self,
        l: usize,
        slots: &LayerSlots,
        vars: &[Var<'t>],
        x: Var<'t>,
        seq: usize,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let dh = c.d_head;
        let q_all = x.matmul(vars[slots.wq])?;
        let k_all = x.matmul(vars[slots.wk])?;
        let v_all = x.matmul(vars[slots.wv])?;
        let spec = c.feature_spec();
        let shared = match (&slots.kernel, &self.noise[l]) {
            (KernelSlots::Generative(g), LayerNoise::Generative(noise)) => {
                Some(self.generator_omega(vars, g, noise)?.transpose()?)
            }
            _ => None,
        };
        let mut heads = Vec::with_capacity(c.heads);
        for hd in 0..c.heads {
            let q = q_all.slice_cols(hd * dh, (hd + 1) * dh)?;
            let k = k_all.slice_cols(hd * dh, (hd + 1) * dh)?;
            let v = v_all.slice_cols(hd * dh, (hd + 1) * dh)?;
            let (pq, pk) = match (&slots.kernel, &self.noise[l]) {
                (KernelSlots::None, _) => {
                    heads.push(q.softmax_attention(k, v, seq, 1.0 / (dh as f64).sqrt())?);
                    continue;
                }
                (KernelSlots::Gmm(hs), LayerNoise::Gmm(noise)) => {
                    let ot = self.gmm_omega(vars, &hs[hd], &noise[hd])?.transpose()?;
                    (q.matmul(ot)?, k.matmul(ot)?)
                }
                (KernelSlots::FastFood(hs), LayerNoise::FastFood(perms)) => {
                    let blocks: Vec<FastFoodBlockVars<'t>> = hs[hd]
                        .iter()
                        .zip(&perms[hd])
                        .map(|(&[s, g, b], perm)| FastFoodBlockVars {
                            s: vars[s],
                            g: vars[g],
                            b: vars[b],
                            perm: perm.clone(),
                        })
                        .collect();
                    // The projection is linear, so pushing the identity through
                    // the structured chain yields Vᵀ; one product per input is
                    // then cheaper than a transform per row at this width.
                    let dim = dh.next_power_of_two();
                    let eye = x.tape().leaf(DenseArray::eye(dh));
                    let vt = spectral::fastfood_project(eye, &blocks, dim, c.fastfood_sigma)?;
                    (q.matmul(vt)?, k.matmul(vt)?)
                }
                (KernelSlots::Generative(_), _) => {
                    let ot = shared.expect("computed above");
                    (q.matmul(ot)?, k.matmul(ot)?)
                }
                _ => unreachable!("sampler state matches its slots"),
            };
            let fq = spec.features(q, pq)?;
            let fk = spec.features(k, pk)?;
            heads.push(fq.linear_attention(fk, v, seq, false, spec.eps)?);
        }
        Var::concat_cols(&heads)?
            .matmul(vars[slots.wo])?
            .add_row(vars[slots.bo])
    }

    /// Logits without dropout, evaluated in chunks of at most `chunk` sequences.
    pub fn logits(&self, inputs: &DenseArray, batch: usize, chunk: usize) -> Result<DenseArray> {
        let (n, din) = inputs.dims2()?;
        if batch == 0 || n % batch != 0 {
            return Err(Error::dim("inputs do not split into the batch"));
        }
        let len = n / batch;
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(batch * self.config.num_classes);
        let mut tape = Tape::new();
        for start in (0..batch).step_by(chunk) {
            let b = chunk.min(batch - start);
            let rows = &inputs.data()[start * len * din..(start + b) * len * din];
            let part = DenseArray::new([b * len, din], rows.to_vec())?;
            tape.reset();
            let vars = self.params.leaves(&tape);
            let fwd = self.forward(&tape, &vars, &part, b, None)?;
            out.extend_from_slice(fwd.logits.value().data());
        }
        DenseArray::new([batch, self.config.num_classes], out)
    }

    fn noise_arrays(&self) -> Vec<(String, DenseArray)> {
        let mut out = Vec::new();
        for (l, noise) in self.noise.iter().enumerate() {
            match noise {
                LayerNoise::None => {}
                LayerNoise::Gmm(heads) => {
                    for (h, comps) in heads.iter().enumerate() {
                        for (c, n) in comps.iter().enumerate() {
                            out.push((format!("noise/layer{l}.head{h}.c{c}"), n.clone()));
                        }
                    }
                }
                LayerNoise::FastFood(heads) => {
                    for (h, blocks) in heads.iter().enumerate() {
                        for (b, perm) in blocks.iter().enumerate() {
                            let data = perm.iter().map(|&i| i as f64).collect();
                            out.push((
                                format!("noise/layer{l}.head{h}.perm{b}"),
                                DenseArray::new([perm.len()], data).expect("length"),
                            ));
                        }
                    }
                }
                LayerNoise::Generative(n) => out.push((format!("noise/layer{l}"), n.clone())),
            }
        }
        out
    }

    fn load_noise(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expect = |name: &str, like: &DenseArray| -> Result<DenseArray> {
            let a = ckpt.get(name)?;
            if a.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "array `{name}` has shape {:?}",
                    a.shape()
                )));
            }
            Ok(a.clone())
        };
        for (l, noise) in self.noise.iter_mut().enumerate() {
            match noise {
                LayerNoise::None => {}
                LayerNoise::Gmm(heads) => {
                    for (h, comps) in heads.iter_mut().enumerate() {
                        for (c, n) in comps.iter_mut().enumerate() {
                            *n = expect(&format!("noise/layer{l}.head{h}.c{c}"), n)?;
                        }
                    }
                }
                LayerNoise::FastFood(heads) => {
                    for (h, blocks) in heads.iter_mut().enumerate() {
                        for (b, perm) in blocks.iter_mut().enumerate() {
                            let name = format!("noise/layer{l}.head{h}.perm{b}");
                            let a = ckpt.get(&name)?;
                            let d = perm.len();
                            let restored: Vec<usize> =
                                a.data().iter().map(|&x| x as usize).collect();
                            let mut seen = vec![false; d];
                            for &i in &restored {
                                if i >= d || std::mem::replace(&mut seen[i], true) {
                                    return Err(Error::Format(format!(
                                        "`{name}` is not a permutation"
                                    )));
                                }
                            }
                            if restored.len() != d {
                                return Err(Error::Format(format!(
                                    "`{name}` has the wrong length"
                                )));
                            }
                            *perm = restored;
                        }
                    }
                }
                LayerNoise::Generative(n) => *n = expect(&format!("noise/layer{l}"), n)?,
            }
        }
        Ok(())
    }
}

fn layer_norm<'t>(x: Var<'t>, vars: &[Var<'t>], slots: [usize; 2]) -> Result<Var<'t>> {
    x.layer_norm(LAYER_NORM_EPS)?
        .mul_row(vars[slots[0]])?
        .add_row(vars[slots[1]])
}

fn dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = x.shape();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    x.mul(x.tape().leaf(DenseArray::new(shape, mask)?))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainConfig {
    pub adamw: AdamWConfig,
    pub resample: ResamplePolicy,
    pub seed: u64,
}

/// An encoder together with its optimizer state and random stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub encoder: Encoder,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    resample: ResamplePolicy,
    near_zero: usize,
}

impl Trainer {
    pub fn new(config: EncoderConfig, train: &TrainConfig) -> Result<Self> {
        train.adamw.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let encoder = Encoder::new(config, &mut rng)?;
        let opt = AdamW::new(train.adamw, &encoder.params);
        Ok(Self {
            encoder,
            opt,
            rng,
            step: 0,
            resample: train.resample,
            near_zero: 0,
        })
    }

    /// Near-zero attention denominators seen during training so far.
    pub fn near_zero_denominators(&self) -> usize {
        self.near_zero
    }

    /// One optimizer step on a batch; returns the batch loss. Frequencies
    /// are redrawn first whenever the step is a multiple of the resample
    /// interval (the initial draw serves step 0).
    pub fn train_step(&mut self, inputs: &DenseArray, labels: &[usize]) -> Result<f64> {
        if self.step > 0 && self.resample.is_due(self.step) {
            self.encoder.resample(&mut self.rng);
        }
        let tape = Tape::new();
        let vars = self.encoder.params.leaves(&tape);
        let fwd = self
            .encoder
            .forward(&tape, &vars, inputs, labels.len(), Some(&mut self.rng))?;
        let loss = fwd.logits.cross_entropy(labels)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {}",
                self.step
            )));
        }
        let grads = tape.backward(loss)?;
        self.near_zero += tape.near_zero_denominators();
        let g: Vec<DenseArray> = vars.iter().map(|&v| grads.wrt(v)).collect();
        self.opt.step(&mut self.encoder.params, &g)?;
        self.step += 1;
        Ok(value)
    }

    /// Loss and per-parameter gradients on a batch without dropout and
    /// without updating anything.
    pub fn gradients(
        &self,
        inputs: &DenseArray,
        labels: &[usize],
    ) -> Result<(f64, Vec<DenseArray>)> {
        let tape = Tape::new();
        let vars = self.encoder.params.leaves(&tape);
        let fwd = self
            .encoder
            .forward(&tape, &vars, inputs, labels.len(), None)?;
        let loss = fwd.logits.cross_entropy(labels)?;
        let value = loss.value().item()?;
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let p = &self.encoder.params;
        let mut arrays = Vec::new();
        for (i, (name, value)) in p.iter().enumerate() {
            arrays.push((format!("param/{name}"), value.clone()));
            arrays.push((format!("adam.m/{name}"), self.opt.m[i].clone()));
            arrays.push((format!("adam.v/{name}"), self.opt.v[i].clone()));
        }
        arrays.push(("adam.t".into(), DenseArray::scalar(self.opt.t as f64)));
        arrays.push((
            "near_zero".into(),
            DenseArray::scalar(self.near_zero as f64),
        ));
        arrays.extend(self.encoder.noise_arrays());
        Checkpoint {
            step: self.step,
            rng: RngState::capture(&self.rng),
            arrays,
        }
    }

    /// Rebuilds a trainer from `ckpt`; `config` and `train` must describe the
    /// same architecture that produced it.
    pub fn restore(config: EncoderConfig, train: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, train)?;
        let names: Vec<String> = t.encoder.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            for (prefix, target) in [
                ("param", t.encoder.params.get_mut(i)),
                ("adam.m", &mut t.opt.m[i]),
                ("adam.v", &mut t.opt.v[i]),
            ] {
                let key = format!("{prefix}/{name}");
                let a = ckpt.get(&key)?;
                if a.shape() != target.shape() {
                    return Err(Error::Format(format!(
                        "`{key}` has shape {:?}, model expects {:?}",
                        a.shape(),
                        target.shape()
                    )));
                }
                *target = a.clone();
            }
        }
        t.opt.t = ckpt.get("adam.t")?.item()? as u64;
        t.near_zero = ckpt.get("near_zero")?.item()? as usize;
        t.encoder.load_noise(ckpt)?;
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step;
        Ok(t)
    }
}

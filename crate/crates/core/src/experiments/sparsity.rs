//! Synthetic sparse-summation task: given pairs `(v_i, a_i)` with
//! `v_i ∈ {−1, +1}` and `a_i ∈ {0, 1}`, predict `Σ v_i a_i ∈ [−4, 4]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Bound on every prefix sum, and hence on the label.
pub const MAX_ABS_PREFIX: i32 = 4;
pub const NUM_CLASSES: usize = (2 * MAX_ABS_PREFIX + 1) as usize;
/// Raw examples drawn per requested example before class balancing.
pub const OVERGENERATION: usize = 3;
/// Token width of the many-hot encoding `(v=+1, v=−1, a)`.
pub const TOKEN_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SparsitySpec {
    /// Probability that a position is relevant.
    pub p: f64,
    pub len: usize,
    pub n: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Overgenerate and resample towards a uniform label histogram.
    pub balance: bool,
}

impl Default for SparsitySpec {
    fn default() -> Self {
        Self {
            p: 0.5,
            len: 50,
            n: 20_000,
            train_fraction: 0.8,
            seed: 0,
            balance: true,
        }
    }
}

impl SparsitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!(
                "relevance probability {} outside [0, 1]",
                self.p
            )));
        }
        if self.len == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        if self.n == 0 {
            return Err(Error::config(
                "infeasible dataset: zero instances requested",
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "train fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SyntheticExample {
    pub v: Vec<i8>,
    pub a: Vec<u8>,
    pub label: i32,
}

impl SyntheticExample {
    /// Builds an example, checking value ranges and the prefix bound.
    pub fn new(v: Vec<i8>, a: Vec<u8>) -> Result<Self> {
        if v.len() != a.len() || v.is_empty() {
            return Err(Error::dim(format!(
                "v has {} entries, a has {}",
                v.len(),
                a.len()
            )));
        }
        if v.iter().any(|&x| x != 1 && x != -1) || a.iter().any(|&x| x > 1) {
            return Err(Error::config("v must be ±1 and a must be 0/1"));
        }
        let mut prefix = 0i32;
        for (&vi, &ai) in v.iter().zip(&a) {
            prefix += i32::from(vi) * i32::from(ai);
            if prefix.abs() > MAX_ABS_PREFIX {
                return Err(Error::config(format!(
                    "prefix sum {prefix} exceeds the bound"
                )));
            }
        }
        Ok(Self {
            v,
            a,
            label: prefix,
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Class index in `0..9` (label + 4).
    pub fn class(&self) -> usize {
        (self.label + MAX_ABS_PREFIX) as usize
    }

    /// Label identity and the prefix bound, recomputed from scratch.
    pub fn satisfies_invariants(&self) -> bool {
        let mut prefix = 0i32;
        for (&vi, &ai) in self.v.iter().zip(&self.a) {
            if (vi != 1 && vi != -1) || ai > 1 {
                return false;
            }
            prefix += i32::from(vi) * i32::from(ai);
            if prefix.abs() > MAX_ABS_PREFIX {
                return false;
            }
        }
        self.v.len() == self.a.len() && prefix == self.label
    }
}

/// One raw example: `a_i ~ Bernoulli(p)`, `v_i` a fair sign, except that a
/// relevant sign which would push the running sum past ±4 is flipped.
pub fn sample_example(p: f64, len: usize, rng: &mut impl Rng) -> SyntheticExample {
    let mut v = Vec::with_capacity(len);
    let mut a = Vec::with_capacity(len);
    let mut prefix = 0i32;
    for _ in 0..len {
        let ai = u8::from(rng.random_bool(p));
        let mut vi: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        if ai == 1 && (prefix + i32::from(vi)).abs() > MAX_ABS_PREFIX {
            vi = -vi;
        }
        prefix += i32::from(vi) * i32::from(ai);
        v.push(vi);
        a.push(ai);
    }
    SyntheticExample {
        v,
        a,
        label: prefix,
    }
}

/// Most uniform per-class counts summing to `n` given what is available:
/// water-filling from the scarcest class up.
pub fn balanced_targets(
    available: &[usize; NUM_CLASSES],
    n: usize,
) -> Result<[usize; NUM_CLASSES]> {
    let total: usize = available.iter().sum();
    if total < n {
        return Err(Error::config(format!(
            "{n} examples requested, {total} available"
        )));
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by_key(|&c| (available[c], c));
    let mut targets = [0; NUM_CLASSES];
    let mut remaining = n;
    for (i, &c) in order.iter().enumerate() {
        let share = remaining.div_ceil(NUM_CLASSES - i);
        targets[c] = available[c].min(share);
        remaining -= targets[c];
    }
    debug_assert_eq!(remaining, 0);
    Ok(targets)
}

pub fn label_histogram(examples: &[SyntheticExample]) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for e in examples {
        h[e.class()] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticExample>,
    pub valid: Vec<SyntheticExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn generate_sparsity_dataset(spec: &SparsitySpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = if spec.balance {
        let raw: Vec<SyntheticExample> = (0..OVERGENERATION * spec.n)
            .map(|_| sample_example(spec.p, spec.len, &mut rng))
            .collect();
        let mut by_class: Vec<Vec<SyntheticExample>> = vec![Vec::new(); NUM_CLASSES];
        for e in raw {
            by_class[e.class()].push(e);
        }
        let available: [usize; NUM_CLASSES] = std::array::from_fn(|c| by_class[c].len());
        let targets = balanced_targets(&available, spec.n)?;
        let mut out = Vec::with_capacity(spec.n);
        for (bucket, &t) in by_class.iter_mut().zip(&targets) {
            bucket.shuffle(&mut rng);
            out.extend(bucket.drain(..t));
        }
        out
    } else {
        (0..spec.n)
            .map(|_| sample_example(spec.p, spec.len, &mut rng))
            .collect()
    };
    chosen.shuffle(&mut rng);
    let n_train = ((spec.n as f64 * spec.train_fraction).round() as usize).clamp(1, spec.n);
    let valid = chosen.split_off(n_train);
    Ok(Dataset {
        train: chosen,
        valid,
    })
}

/// Stacks equal-length examples into `(Σ L) × 3` many-hot rows and class
/// indices.
pub fn encode_batch<'a>(
    examples: impl IntoIterator<Item = &'a SyntheticExample>,
) -> Result<(DenseArray, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut len = None;
    for e in examples {
        if *len.get_or_insert(e.len()) != e.len() {
            return Err(Error::dim("examples in one batch must share a length"));
        }
        for (&vi, &ai) in e.v.iter().zip(&e.a) {
            data.extend_from_slice(&[
                f64::from(u8::from(vi == 1)),
                f64::from(u8::from(vi == -1)),
                f64::from(ai),
            ]);
        }
        labels.push(e.class());
    }
    if labels.is_empty() {
        return Err(Error::dim("empty batch"));
    }
    let rows = data.len() / TOKEN_DIM;
    Ok((DenseArray::new([rows, TOKEN_DIM], data)?, labels))
}

//! Kernelized self-attention.
//!
//! Row `i` of the output is `Σ_j κ(q_i,k_j) v_j / Σ_j κ(q_i,k_j)`. The
//! quadratic form evaluates every pair and serves as the reference. When
//! `κ(q,k) = φ(q)ᵀφ(k)` the sums factor through `Σ_j φ(k_j) v_jᵀ` and
//! `Σ_j φ(k_j)`, which gives the linear-time form. A softmax baseline is
//! included for comparison.
//!
//! Feature maps with signed entries (RKS) can produce denominators at or
//! near zero. Every path applies the same rule, `den + ε·sign(den)` with
//! `sign(0) = +1`, and counts denominators with `|den| < 1000·ε`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{FeatureMapSpec, Projection};
use crate::spectral::SamplerKind;
use crate::tensor::kernels::{self, dot};
use crate::tensor::DenseArray;

/// Denominators smaller than this multiple of `ε` are tallied as near zero.
pub const NEAR_ZERO_FACTOR: f64 = 1e3;

const F64_BYTES: usize = std::mem::size_of::<f64>();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Per-head query/key dimension.
    pub d_qk: usize,
    /// Per-head value dimension.
    pub d_v: usize,
    pub featmap: FeatureMapSpec,
    pub sampler: SamplerKind,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_qk == 0 || self.d_v == 0 {
            return Err(Error::config(format!(
                "attention needs positive heads and dimensions, got heads={} d_qk={} d_v={}",
                self.heads, self.d_qk, self.d_v
            )));
        }
        self.featmap.validate()
    }
}

/// `den + ε·sign(den)` with `sign(0) = +1`.
pub fn stabilize(den: f64, eps: f64) -> f64 {
    if den >= 0.0 {
        den + eps
    } else {
        den - eps
    }
}

fn is_near_zero(den: f64, eps: f64) -> bool {
    den.abs() < NEAR_ZERO_FACTOR * eps
}

/// Tracks auxiliary scratch memory (excluding inputs and outputs) used by an
/// attention evaluation, with an optional hard budget.
#[derive(Clone, Debug, Default)]
pub struct AuxTracker {
    current: usize,
    peak: usize,
    budget: Option<usize>,
}

impl AuxTracker {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn with_budget(bytes: usize) -> Self {
        Self {
            budget: Some(bytes),
            ..Self::default()
        }
    }

    /// Allocates a zeroed scratch buffer of `len` values, failing with
    /// [`Error::Memory`] if the budget would be exceeded.
    pub fn alloc(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = len * F64_BYTES;
        let requested = self.current + bytes;
        if let Some(budget) = self.budget {
            if requested > budget {
                return Err(Error::Memory { requested, budget });
            }
        }
        self.current = requested;
        self.peak = self.peak.max(self.current);
        Ok(vec![0.0; len])
    }

    pub fn free(&mut self, buf: Vec<f64>) {
        self.current -= buf.len() * F64_BYTES;
    }

    pub fn current_bytes(&self) -> usize {
        self.current
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub values: DenseArray,
    /// Denominators with `|den| < 1000·ε` before stabilization.
    pub near_zero: usize,
}

fn check_qkv(q: &DenseArray, k: &DenseArray, v: &DenseArray) -> Result<(usize, usize, usize)> {
    let (l, d) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    let (lv, dv) = v.dims2()?;
    if l == 0 {
        return Err(Error::dim("attention needs at least one position"));
    }
    if lk != l || lv != l {
        return Err(Error::dim(format!(
            "sequence lengths differ: {l} queries, {lk} keys, {lv} values"
        )));
    }
    if dk != d {
        return Err(Error::dim(format!("query dim {d} but key dim {dk}")));
    }
    Ok((l, d, dv))
}

fn quadratic_impl(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    kernel: impl Fn(&[f64], &[f64]) -> f64,
    eps: f64,
    causal: bool,
) -> Result<AttentionOutput> {
    let (l, _, dv) = check_qkv(q, k, v)?;
    let mut out = DenseArray::zeros([l, dv]);
    let mut near_zero = 0;
    for i in 0..l {
        let last = if causal { i + 1 } else { l };
        let mut den = 0.0;
        let row = out.row_mut(i);
        for j in 0..last {
            let w = kernel(q.row(i), k.row(j));
            den += w;
            kernels::axpy(w, v.row(j), row);
        }
        if den == 0.0 && eps == 0.0 {
            return Err(Error::Division(format!(
                "attention weights of query {i} sum to zero"
            )));
        }
        near_zero += usize::from(is_near_zero(den, eps));
        let d = stabilize(den, eps);
        for o in row.iter_mut() {
            *o /= d;
        }
    }
    Ok(AttentionOutput {
        values: out,
        near_zero,
    })
}

/// Reference `O(L²)` kernel attention. Fails with [`Error::Division`] when a
/// row of weights sums to exactly zero and `eps == 0`.
pub fn quadratic_kernel_attention(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    kernel: impl Fn(&[f64], &[f64]) -> f64,
    eps: f64,
) -> Result<DenseArray> {
    Ok(quadratic_impl(q, k, v, kernel, eps, false)?.values)
}

/// [`quadratic_kernel_attention`] with query `i` restricted to keys `j ≤ i`.
pub fn masked_quadratic_kernel_attention(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    kernel: impl Fn(&[f64], &[f64]) -> f64,
    eps: f64,
) -> Result<DenseArray> {
    Ok(quadratic_impl(q, k, v, kernel, eps, true)?.values)
}

fn check_featmap(spec: &FeatureMapSpec, proj: &dyn Projection, d: usize) -> Result<()> {
    spec.validate()?;
    if proj.num_frequencies() != spec.num_samples || proj.input_dim() != d {
        return Err(Error::dim(format!(
            "frequencies are {}×{}, expected {}×{d}",
            proj.num_frequencies(),
            proj.input_dim(),
            spec.num_samples
        )));
    }
    Ok(())
}

/// Linear-time kernel attention with `κ = φᵀφ`. Queries and keys are mapped
/// one row at a time into fixed scratch buffers, so auxiliary memory is
/// `F·d_v + 3F` values (with `F` the feature length) whatever the sequence
/// length.
pub fn linear_kernel_attention_tracked(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    spec: &FeatureMapSpec,
    proj: &dyn Projection,
    causal: bool,
    tracker: &mut AuxTracker,
) -> Result<AttentionOutput> {
    let (l, d, dv) = check_qkv(q, k, v)?;
    check_featmap(spec, proj, d)?;
    let f = spec.feature_dim();
    let eps = spec.eps;
    let mut s = tracker.alloc(f * dv)?;
    let mut z = tracker.alloc(f)?;
    let mut phi_k = tracker.alloc(f)?;
    let mut phi_q = tracker.alloc(f)?;
    let mut out = DenseArray::zeros([l, dv]);
    let mut near_zero = 0;

    let accumulate = |j: usize, s: &mut [f64], z: &mut [f64], phi_k: &mut [f64]| -> Result<()> {
        spec.map_into(k.row(j), proj, phi_k)?;
        let vj = v.row(j);
        for (m, &p) in phi_k.iter().enumerate() {
            z[m] += p;
            kernels::axpy(p, vj, &mut s[m * dv..(m + 1) * dv]);
        }
        Ok(())
    };

    if !causal {
        for j in 0..l {
            accumulate(j, &mut s, &mut z, &mut phi_k)?;
        }
    }
    for i in 0..l {
        if causal {
            accumulate(i, &mut s, &mut z, &mut phi_k)?;
        }
        spec.map_into(q.row(i), proj, &mut phi_q)?;
        let den = dot(&phi_q, &z);
        near_zero += usize::from(is_near_zero(den, eps));
        let dn = stabilize(den, eps);
        let row = out.row_mut(i);
        kernels::gemm_nn(1, f, dv, &phi_q, &s, row);
        for o in row.iter_mut() {
            *o /= dn;
        }
    }
    for buf in [s, z, phi_k, phi_q] {
        tracker.free(buf);
    }
    Ok(AttentionOutput {
        values: out,
        near_zero,
    })
}

pub fn linear_kernel_attention(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    spec: &FeatureMapSpec,
    proj: &dyn Projection,
) -> Result<AttentionOutput> {
    linear_kernel_attention_tracked(q, k, v, spec, proj, false, &mut AuxTracker::unbounded())
}

/// Linear attention where row `i` only sees keys `j ≤ i`, via running
/// prefix sums of `φ(k_j) v_jᵀ` and `φ(k_j)`.
pub fn causal_linear_attention(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    spec: &FeatureMapSpec,
    proj: &dyn Projection,
) -> Result<AttentionOutput> {
    linear_kernel_attention_tracked(q, k, v, spec, proj, true, &mut AuxTracker::unbounded())
}

/// Scaled dot-product attention with temperature `1/√d_q`. Materializes the
/// full `L×L` weight matrix.
pub fn softmax_attention_tracked(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    causal: bool,
    tracker: &mut AuxTracker,
) -> Result<DenseArray> {
    let (l, d, dv) = check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut p = tracker.alloc(l * l)?;
    kernels::gemm_nt(l, d, l, q.data(), k.data(), &mut p);
    for i in 0..l {
        let row = &mut p[i * l..(i + 1) * l];
        let last = if causal { i + 1 } else { l };
        softmax_in_place(&mut row[..last], scale);
        row[last..].fill(0.0);
    }
    let mut out = vec![0.0; l * dv];
    kernels::gemm_nn(l, l, dv, &p, v.data(), &mut out);
    tracker.free(p);
    DenseArray::new([l, dv], out)
}

pub fn softmax_attention(q: &DenseArray, k: &DenseArray, v: &DenseArray) -> Result<DenseArray> {
    softmax_attention_tracked(q, k, v, false, &mut AuxTracker::unbounded())
}

/// Row-stochastic weights `softmax(scale · q_i·k_j)` of [`softmax_attention`].
pub fn softmax_weights(q: &DenseArray, k: &DenseArray) -> Result<DenseArray> {
    let (l, d) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    if dk != d {
        return Err(Error::dim(format!("query dim {d} but key dim {dk}")));
    }
    let mut p = vec![0.0; l * lk];
    kernels::gemm_nt(l, d, lk, q.data(), k.data(), &mut p);
    let scale = 1.0 / (d as f64).sqrt();
    for row in p.chunks_mut(lk.max(1)) {
        softmax_in_place(row, scale);
    }
    DenseArray::new([l, lk], p)
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Batched forward and backward kernels behind the tape's attention ops.
/// Inputs are stacked sequences: rows `[s·seg, (s+1)·seg)` form segment `s`.
pub(crate) mod fused {
    use super::{is_near_zero, softmax_in_place, stabilize};
    use crate::error::{Error, Result};
    use crate::tensor::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
    use crate::tensor::DenseArray;

    pub(crate) struct LinearForward {
        pub values: DenseArray,
        /// Stabilized denominators, one per row.
        pub denominators: Vec<f64>,
        pub near_zero: usize,
    }

    pub(crate) fn check_segments(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        seg: usize,
    ) -> Result<()> {
        let (n, f) = q.dims2()?;
        let (nk, fk) = k.dims2()?;
        let (nv, _) = v.dims2()?;
        if nk != n || nv != n || fk != f {
            return Err(Error::dim(format!(
                "attention operands {:?}, {:?}, {:?} do not line up",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if seg == 0 || n % seg != 0 {
            return Err(Error::dim(format!(
                "{n} rows do not split into segments of {seg}"
            )));
        }
        Ok(())
    }

    struct Dims {
        n: usize,
        f: usize,
        dv: usize,
        seg: usize,
    }

    fn dims(q: &DenseArray, v: &DenseArray, seg: usize) -> Dims {
        Dims {
            n: q.rows(),
            f: q.cols(),
            dv: v.cols(),
            seg,
        }
    }

    pub(crate) fn linear_forward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        seg: usize,
        eps: f64,
    ) -> LinearForward {
        let Dims { n, f, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; n * dv];
        let mut den = vec![0.0; n];
        let mut near_zero = 0;
        let mut s = vec![0.0; f * dv];
        let mut z = vec![0.0; f];
        for r0 in (0..n).step_by(seg) {
            s.fill(0.0);
            z.fill(0.0);
            let ks = &kd[r0 * f..(r0 + seg) * f];
            gemm_tn(f, seg, dv, ks, &vd[r0 * dv..(r0 + seg) * dv], &mut s);
            for row in ks.chunks(f) {
                axpy(1.0, row, &mut z);
            }
            let qs = &qd[r0 * f..(r0 + seg) * f];
            let os = &mut out[r0 * dv..(r0 + seg) * dv];
            gemm_nn(seg, f, dv, qs, &s, os);
            for i in 0..seg {
                let raw = dot(&qs[i * f..(i + 1) * f], &z);
                near_zero += usize::from(is_near_zero(raw, eps));
                let d = stabilize(raw, eps);
                den[r0 + i] = d;
                for o in &mut os[i * dv..(i + 1) * dv] {
                    *o /= d;
                }
            }
        }
        LinearForward {
            values: DenseArray::new([n, dv], out).expect("shape matches"),
            denominators: den,
            near_zero,
        }
    }

    /// `∂/∂num = g/den`, `∂/∂den = −g·y/den` for every row.
    fn output_grads(g: &[f64], y: &[f64], den: &[f64], dv: usize) -> (Vec<f64>, Vec<f64>) {
        let mut dnum = vec![0.0; g.len()];
        let mut dden = vec![0.0; den.len()];
        for (i, &d) in den.iter().enumerate() {
            let gi = &g[i * dv..(i + 1) * dv];
            let yi = &y[i * dv..(i + 1) * dv];
            for (o, &gv) in dnum[i * dv..(i + 1) * dv].iter_mut().zip(gi) {
                *o = gv / d;
            }
            dden[i] = -dot(gi, yi) / d;
        }
        (dnum, dden)
    }

    pub(crate) fn linear_backward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        y: &DenseArray,
        den: &[f64],
        g: &[f64],
        seg: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let Dims { n, f, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let (dnum, dden) = output_grads(g, y.data(), den, dv);
        let mut dq = vec![0.0; n * f];
        let mut dk = vec![0.0; n * f];
        let mut dvv = vec![0.0; n * dv];
        let mut s = vec![0.0; f * dv];
        let mut z = vec![0.0; f];
        let mut ds = vec![0.0; f * dv];
        let mut dz = vec![0.0; f];
        for r0 in (0..n).step_by(seg) {
            let qs = &qd[r0 * f..(r0 + seg) * f];
            let ks = &kd[r0 * f..(r0 + seg) * f];
            let vs = &vd[r0 * dv..(r0 + seg) * dv];
            let dn = &dnum[r0 * dv..(r0 + seg) * dv];
            let dd = &dden[r0..r0 + seg];
            s.fill(0.0);
            z.fill(0.0);
            ds.fill(0.0);
            dz.fill(0.0);
            gemm_tn(f, seg, dv, ks, vs, &mut s);
            for row in ks.chunks(f) {
                axpy(1.0, row, &mut z);
            }
            let dqs = &mut dq[r0 * f..(r0 + seg) * f];
            gemm_nt(seg, dv, f, dn, &s, dqs);
            for (i, row) in dqs.chunks_mut(f).enumerate() {
                axpy(dd[i], &z, row);
            }
            gemm_tn(f, seg, dv, qs, dn, &mut ds);
            for (i, row) in qs.chunks(f).enumerate() {
                axpy(dd[i], row, &mut dz);
            }
            let dks = &mut dk[r0 * f..(r0 + seg) * f];
            gemm_nt(seg, dv, f, vs, &ds, dks);
            for row in dks.chunks_mut(f) {
                axpy(1.0, &dz, row);
            }
            gemm_nn(seg, f, dv, ks, &ds, &mut dvv[r0 * dv..(r0 + seg) * dv]);
        }
        (dq, dk, dvv)
    }

    pub(crate) fn causal_linear_forward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        seg: usize,
        eps: f64,
    ) -> LinearForward {
        let Dims { n, f, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; n * dv];
        let mut den = vec![0.0; n];
        let mut near_zero = 0;
        let mut s = vec![0.0; f * dv];
        let mut z = vec![0.0; f];
        for r0 in (0..n).step_by(seg) {
            s.fill(0.0);
            z.fill(0.0);
            for i in r0..r0 + seg {
                let ki = &kd[i * f..(i + 1) * f];
                gemm_tn(f, 1, dv, ki, &vd[i * dv..(i + 1) * dv], &mut s);
                axpy(1.0, ki, &mut z);
                let qi = &qd[i * f..(i + 1) * f];
                let oi = &mut out[i * dv..(i + 1) * dv];
                gemm_nn(1, f, dv, qi, &s, oi);
                let raw = dot(qi, &z);
                near_zero += usize::from(is_near_zero(raw, eps));
                let d = stabilize(raw, eps);
                den[i] = d;
                for o in oi.iter_mut() {
                    *o /= d;
                }
            }
        }
        LinearForward {
            values: DenseArray::new([n, dv], out).expect("shape matches"),
            denominators: den,
            near_zero,
        }
    }

    pub(crate) fn causal_linear_backward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        y: &DenseArray,
        den: &[f64],
        g: &[f64],
        seg: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let Dims { n, f, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let (dnum, dden) = output_grads(g, y.data(), den, dv);
        let mut dq = vec![0.0; n * f];
        let mut dk = vec![0.0; n * f];
        let mut dvv = vec![0.0; n * dv];
        let mut acc = vec![0.0; f * dv];
        let mut vec_acc = vec![0.0; f];
        for r0 in (0..n).step_by(seg) {
            // Prefix sweep: dq_i = dnum_i S_iᵀ + dden_i z_i.
            acc.fill(0.0);
            vec_acc.fill(0.0);
            for i in r0..r0 + seg {
                let ki = &kd[i * f..(i + 1) * f];
                gemm_tn(f, 1, dv, ki, &vd[i * dv..(i + 1) * dv], &mut acc);
                axpy(1.0, ki, &mut vec_acc);
                let dqi = &mut dq[i * f..(i + 1) * f];
                gemm_nt(1, dv, f, &dnum[i * dv..(i + 1) * dv], &acc, dqi);
                axpy(dden[i], &vec_acc, dqi);
            }
            // Suffix sweep: R_j = Σ_{i≥j} q_iᵀ dnum_i, r_j = Σ_{i≥j} dden_i q_i.
            acc.fill(0.0);
            vec_acc.fill(0.0);
            for j in (r0..r0 + seg).rev() {
                let qj = &qd[j * f..(j + 1) * f];
                gemm_tn(f, 1, dv, qj, &dnum[j * dv..(j + 1) * dv], &mut acc);
                axpy(dden[j], qj, &mut vec_acc);
                let dkj = &mut dk[j * f..(j + 1) * f];
                gemm_nt(1, dv, f, &vd[j * dv..(j + 1) * dv], &acc, dkj);
                axpy(1.0, &vec_acc, dkj);
                gemm_nn(
                    1,
                    f,
                    dv,
                    &kd[j * f..(j + 1) * f],
                    &acc,
                    &mut dvv[j * dv..(j + 1) * dv],
                );
            }
        }
        (dq, dk, dvv)
    }

    fn segment_weights(qs: &[f64], ks: &[f64], seg: usize, d: usize, scale: f64, p: &mut [f64]) {
        p.fill(0.0);
        gemm_nt(seg, d, seg, qs, ks, p);
        for row in p.chunks_mut(seg) {
            softmax_in_place(row, scale);
        }
    }

    pub(crate) fn softmax_forward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        seg: usize,
        scale: f64,
    ) -> DenseArray {
        let Dims { n, f: d, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; n * dv];
        let mut p = vec![0.0; seg * seg];
        for r0 in (0..n).step_by(seg) {
            segment_weights(
                &qd[r0 * d..(r0 + seg) * d],
                &kd[r0 * d..(r0 + seg) * d],
                seg,
                d,
                scale,
                &mut p,
            );
            gemm_nn(
                seg,
                seg,
                dv,
                &p,
                &vd[r0 * dv..(r0 + seg) * dv],
                &mut out[r0 * dv..(r0 + seg) * dv],
            );
        }
        DenseArray::new([n, dv], out).expect("shape matches")
    }

    pub(crate) fn softmax_backward(
        q: &DenseArray,
        k: &DenseArray,
        v: &DenseArray,
        g: &[f64],
        seg: usize,
        scale: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let Dims { n, f: d, dv, seg } = dims(q, v, seg);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dvv = vec![0.0; n * dv];
        let mut p = vec![0.0; seg * seg];
        let mut dp = vec![0.0; seg * seg];
        for r0 in (0..n).step_by(seg) {
            let qs = &qd[r0 * d..(r0 + seg) * d];
            let ks = &kd[r0 * d..(r0 + seg) * d];
            let vs = &vd[r0 * dv..(r0 + seg) * dv];
            let gs = &g[r0 * dv..(r0 + seg) * dv];
            segment_weights(qs, ks, seg, d, scale, &mut p);
            gemm_tn(seg, seg, dv, &p, gs, &mut dvv[r0 * dv..(r0 + seg) * dv]);
            dp.fill(0.0);
            gemm_nt(seg, dv, seg, gs, vs, &mut dp);
            for (prow, dprow) in p.chunks(seg).zip(dp.chunks_mut(seg)) {
                let inner = dot(prow, dprow);
                for (x, &pv) in dprow.iter_mut().zip(prow) {
                    *x = scale * pv * (*x - inner);
                }
            }
            gemm_nn(seg, seg, d, &dp, ks, &mut dq[r0 * d..(r0 + seg) * d]);
            gemm_tn(seg, seg, d, &dp, qs, &mut dk[r0 * d..(r0 + seg) * d]);
        }
        (dq, dk, dvv)
    }
}

//! Dense feed-forward networks with hand-written reverse-mode gradients and Adam.
//!
//! Parameters live in one flat `f64` vector. For each layer the weight matrix is
//! stored row-major with shape `(n_out, n_in)`, followed by its bias of length
//! `n_out`. Layers appear in order from input to output.
//!
//! Hidden layers apply the configured activation. The output layer is affine, or
//! a tanh squash onto `[lo, hi]` when an output bound is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// `tanh` through a branch-free `exp`: absolute error within a few
/// `f64::EPSILON`, and the loop over a slice vectorises.
#[inline]
pub fn tanh(z: f64) -> f64 {
    tanh_with::<false>(z)
}

#[inline(always)]
fn tanh_with<const FMA: bool>(z: f64) -> f64 {
    let e = exp_small::<FMA>(2.0 * z.clamp(-20.0, 20.0));
    (e - 1.0) / (e + 1.0)
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `exp(x)` for `|x| ≤ 40`: `x = n ln2 + r` with `|r| ≤ ln2 / 2`, a Taylor
/// polynomial for `exp(r)` and the scale `2^n` written into the exponent bits.
#[inline(always)]
fn exp_small<const FMA: bool>(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 × 2^52
    let k = x * std::f64::consts::LOG2_E + SHIFT;
    let n = k - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = madd::<FMA>(p, r, c);
    }
    let n_bits = k.to_bits().wrapping_sub(SHIFT.to_bits());
    let scale = f64::from_bits(n_bits.wrapping_add(1023) << 52);
    p * scale
}

/// Partial sums per dot product in the batch kernels.
const LANES: usize = 8;
/// Points per register block of [`combine`].
const BLOCK: usize = 32;

#[inline(always)]
fn hsum(s: &[f64; LANES]) -> f64 {
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))
}

#[inline(always)]
fn lanes(v: &[f64], at: usize) -> &[f64; LANES] {
    v[at..at + LANES].try_into().unwrap()
}

#[inline(always)]
fn fma_lanes<const FMA: bool>(s: &mut [f64; LANES], x: &[f64; LANES], y: &[f64; LANES]) {
    for j in 0..LANES {
        s[j] = madd::<FMA>(x[j], y[j], s[j]);
    }
}

/// Dot products of `d` with four vectors at once.
#[inline(always)]
fn dot4<const FMA: bool>(d: &[f64], a: [&[f64]; 4]) -> [f64; 4] {
    #[cfg(target_arch = "x86_64")]
    if FMA {
        // SAFETY: the FMA kernels only run after feature detection.
        return unsafe { avx::dot4(d, a) };
    }
    let mut s = [[0.0; LANES]; 4];
    let (dc, dr) = d.as_chunks::<LANES>();
    for (c, dv) in dc.iter().enumerate() {
        for (s, a) in s.iter_mut().zip(a) {
            fma_lanes::<FMA>(s, dv, lanes(a, c * LANES));
        }
    }
    let mut t = [hsum(&s[0]), hsum(&s[1]), hsum(&s[2]), hsum(&s[3])];
    let n = dc.len() * LANES;
    for (b, &dv) in dr.iter().enumerate() {
        for r in 0..4 {
            t[r] = madd::<FMA>(dv, a[r][n + b], t[r]);
        }
    }
    t
}

/// Dot product with `LANES` partial sums.
#[inline(always)]
fn dot<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if FMA {
        // SAFETY: as in `dot4`.
        return unsafe { avx::dot(a, b) };
    }
    let mut s = [0.0; LANES];
    let (ca, ra) = a.as_chunks::<LANES>();
    for (c, x) in ca.iter().enumerate() {
        fma_lanes::<FMA>(&mut s, x, lanes(b, c * LANES));
    }
    let mut t = hsum(&s);
    let n = ca.len() * LANES;
    for (i, &x) in ra.iter().enumerate() {
        t = madd::<FMA>(x, b[n + i], t);
    }
    t
}

/// `grad[i] += d · src[i nb..(i + 1) nb]` for every row of `src`.
#[inline(always)]
fn dot_rows<const FMA: bool>(d: &[f64], src: &[f64], nb: usize, grad: &mut [f64]) {
    let rows = grad.len();
    let mut i = 0;
    while i + 4 <= rows {
        let r = |k: usize| &src[(i + k) * nb..(i + k + 1) * nb];
        let t = dot4::<FMA>(d, [r(0), r(1), r(2), r(3)]);
        for (g, t) in grad[i..i + 4].iter_mut().zip(t) {
            *g += t;
        }
        i += 4;
    }
    for (k, g) in grad.iter_mut().enumerate().skip(i) {
        *g += dot::<FMA>(d, &src[k * nb..(k + 1) * nb]);
    }
}

#[inline(always)]
fn combine_block<const FMA: bool, const W: usize>(w: &[f64], bias: f64, src: &[f64], nb: usize, b0: usize, out: &mut [f64]) {
    let mut acc = [bias; W];
    for (k, &wk) in w.iter().enumerate() {
        let a: &[f64; W] = src[k * nb + b0..k * nb + b0 + W].try_into().unwrap();
        for j in 0..W {
            acc[j] = madd::<FMA>(wk, a[j], acc[j]);
        }
    }
    out[b0..b0 + W].copy_from_slice(&acc);
}

/// `out[b] = bias + Σ_k w[k] src[k nb + b]`, accumulated in registers.
#[inline(always)]
fn combine<const FMA: bool>(w: &[f64], bias: f64, src: &[f64], nb: usize, out: &mut [f64]) {
    let mut b0 = 0;
    while b0 + BLOCK <= nb {
        combine_block::<FMA, BLOCK>(w, bias, src, nb, b0, out);
        b0 += BLOCK;
    }
    while b0 + LANES <= nb {
        combine_block::<FMA, LANES>(w, bias, src, nb, b0, out);
        b0 += LANES;
    }
    for b in b0..nb {
        let mut z = bias;
        for (k, &wk) in w.iter().enumerate() {
            z = madd::<FMA>(wk, src[k * nb + b], z);
        }
        out[b] = z;
    }
}

#[inline(always)]
fn tanh_in_place<const FMA: bool>(v: &mut [f64]) {
    for z in v {
        *z = tanh_with::<FMA>(*z);
    }
}

/// Explicit AVX2 dot kernels; auto-vectorisation shuffles these badly.
#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256d) -> f64 {
        let mut l = [0.0; 4];
        _mm256_storeu_pd(l.as_mut_ptr(), v);
        (l[0] + l[1]) + (l[2] + l[3])
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot4(d: &[f64], a: [&[f64]; 4]) -> [f64; 4] {
        let len = d.len();
        assert!(a.iter().all(|r| r.len() >= len));
        let n = len / 8 * 8;
        let dp = d.as_ptr();
        let ap = a.map(|r| r.as_ptr());
        let mut acc = [_mm256_setzero_pd(); 8];
        let mut b = 0;
        while b < n {
            let d0 = _mm256_loadu_pd(dp.add(b));
            let d1 = _mm256_loadu_pd(dp.add(b + 4));
            for r in 0..4 {
                acc[2 * r] = _mm256_fmadd_pd(d0, _mm256_loadu_pd(ap[r].add(b)), acc[2 * r]);
                acc[2 * r + 1] = _mm256_fmadd_pd(d1, _mm256_loadu_pd(ap[r].add(b + 4)), acc[2 * r + 1]);
            }
            b += 8;
        }
        let mut t = [0.0; 4];
        for r in 0..4 {
            t[r] = hsum(_mm256_add_pd(acc[2 * r], acc[2 * r + 1]));
            for k in n..len {
                t[r] = d[k].mul_add(a[r][k], t[r]);
            }
        }
        t
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        let len = a.len();
        assert!(b.len() >= len);
        let n = len / 8 * 8;
        let (ap, bp) = (a.as_ptr(), b.as_ptr());
        let (mut s0, mut s1) = (_mm256_setzero_pd(), _mm256_setzero_pd());
        let mut k = 0;
        while k < n {
            s0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(k)), _mm256_loadu_pd(bp.add(k)), s0);
            s1 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(k + 4)), _mm256_loadu_pd(bp.add(k + 4)), s1);
            k += 8;
        }
        let mut t = hsum(_mm256_add_pd(s0, s1));
        for k in n..len {
            t = a[k].mul_add(b[k], t);
        }
        t
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Checkpoint(format!("unknown activation tag {tag}"))),
        }
    }
}

/// Architecture of a dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_bound: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    act: usize,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidParameter(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParameter("layer sizes must be positive".into()));
        }
        Ok(Self { layer_sizes, activation, output_bound: None })
    }

    /// Squashes the output onto `[lo, hi]` through a scaled tanh.
    pub fn with_output_bound(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("bad output bound [{lo}, {hi}]")));
        }
        self.output_bound = Some((lo, hi));
        Ok(self)
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut off = 0;
        let mut act = 0;
        for w in self.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            out.push(LayerShape { n_in, n_out, w: off, b: off + n_in * n_out, act });
            off += n_in * n_out + n_out;
            act += n_out;
        }
        out
    }
}

/// Flat parameter vector of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub flat: Vec<f64>,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(spec, &mut rng)
}

pub(crate) fn init_params_with<R: Rng>(spec: &MlpSpec, rng: &mut R) -> MlpParams {
    let mut flat = vec![0.0; spec.n_params()];
    for s in spec.shapes() {
        let a = (6.0 / (s.n_in + s.n_out) as f64).sqrt();
        for w in &mut flat[s.w..s.w + s.n_in * s.n_out] {
            *w = rng.gen_range(-a..a);
        }
    }
    MlpParams { flat }
}

/// Evaluates the network at one input.
pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let net = Dense::new(spec, &params.flat)?;
    if x.len() != spec.n_inputs() {
        return Err(Error::Shape(format!("input has {} entries, expected {}", x.len(), spec.n_inputs())));
    }
    let mut scratch = net.scratch();
    Ok(net.forward(x, &mut scratch).to_vec())
}

/// Returns `(d/dparams, d/dx)` of `upstream · forward(x)`.
pub fn mlp_grad(
    spec: &MlpSpec,
    params: &MlpParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let net = Dense::new(spec, &params.flat)?;
    if x.len() != spec.n_inputs() {
        return Err(Error::Shape(format!("input has {} entries, expected {}", x.len(), spec.n_inputs())));
    }
    if upstream.len() != spec.n_outputs() {
        return Err(Error::Shape(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            spec.n_outputs()
        )));
    }
    let mut scratch = net.scratch();
    let mut g = vec![0.0; spec.n_params()];
    let mut gx = vec![0.0; spec.n_inputs()];
    net.forward(x, &mut scratch);
    net.backward(x, upstream, &mut scratch, &mut g, &mut gx);
    Ok((g, gx))
}

/// Buffers for batch backward passes.
#[derive(Clone, Debug)]
pub struct BatchScratch {
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Per-thread buffers for [`Dense`] evaluations.
#[derive(Clone, Debug)]
pub struct Scratch {
    acts: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// A network bound to a parameter slice, with a transposed weight copy for
/// vectorisable forward sweeps.
///
/// Besides the plain forward/backward pair it supports a split first layer: all
/// input columns except one are folded into a precomputed bias (`pre`). This is
/// how clouds of particles sharing a measure argument are evaluated cheaply.
#[derive(Clone, Debug)]
pub struct Dense<'a> {
    spec: &'a MlpSpec,
    params: &'a [f64],
    shapes: Vec<LayerShape>,
    wt: Vec<f64>,
    n_acts: usize,
}

impl<'a> Dense<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a [f64]) -> Result<Self> {
        if params.len() != spec.n_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, expected {}",
                params.len(),
                spec.n_params()
            )));
        }
        let shapes = spec.shapes();
        let mut wt = vec![0.0; params.len()];
        for s in &shapes {
            for o in 0..s.n_out {
                for i in 0..s.n_in {
                    wt[s.w + i * s.n_out + o] = params[s.w + o * s.n_in + i];
                }
            }
        }
        let n_acts = shapes.iter().map(|s| s.n_out).sum();
        Ok(Self { spec, params, shapes, wt, n_acts })
    }

    pub fn spec(&self) -> &MlpSpec {
        self.spec
    }

    pub fn scratch(&self) -> Scratch {
        let w = *self.spec.layer_sizes.iter().max().unwrap();
        Scratch { acts: vec![0.0; self.n_acts], delta: vec![0.0; w], delta_prev: vec![0.0; w] }
    }

    /// First-layer pre-activation with column `skip` left out: `b1 + W1[:, -skip] · input`.
    /// The entry `input[skip]` is ignored.
    pub fn first_layer_pre(&self, input: &[f64], skip: usize, pre: &mut [f64]) {
        let s = self.shapes[0];
        pre.copy_from_slice(&self.params[s.b..s.b + s.n_out]);
        for (i, &xi) in input.iter().enumerate() {
            if i == skip {
                continue;
            }
            let col = &self.wt[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
            for (p, &w) in pre.iter_mut().zip(col) {
                *p += w * xi;
            }
        }
    }

    /// Full forward pass.
    pub fn forward<'s>(&self, x: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        let s = self.shapes[0];
        let mut pre = std::mem::take(&mut scratch.delta_prev);
        pre.truncate(s.n_out);
        pre.resize(s.n_out, 0.0);
        self.first_layer_pre(x, usize::MAX, &mut pre);
        self.forward_from_pre(&pre, 0, 0.0, scratch);
        scratch.delta_prev = pre;
        scratch.delta_prev.resize(scratch.delta.len(), 0.0);
        let last = *self.shapes.last().unwrap();
        &scratch.acts[last.act..last.act + last.n_out]
    }

    /// Forward pass given the folded first-layer bias and the value of the
    /// free column `col`.
    pub fn forward_from_pre<'s>(&self, pre: &[f64], col: usize, x: f64, scratch: &'s mut Scratch) -> &'s [f64] {
        let n_layers = self.shapes.len();
        let act = self.spec.activation;
        for (l, s) in self.shapes.iter().enumerate() {
            let is_out = l + 1 == n_layers;
            let (prev, rest) = scratch.acts.split_at_mut(s.act);
            let out = &mut rest[..s.n_out];
            if l == 0 {
                let col_w = &self.wt[s.w + col * s.n_out..s.w + (col + 1) * s.n_out];
                for ((o, &p), &w) in out.iter_mut().zip(pre).zip(col_w) {
                    *o = p + w * x;
                }
            } else {
                let input = &prev[s.act - s.n_in..];
                out.copy_from_slice(&self.params[s.b..s.b + s.n_out]);
                for (i, &xi) in input.iter().enumerate() {
                    let wcol = &self.wt[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
                    for (o, &w) in out.iter_mut().zip(wcol) {
                        *o += w * xi;
                    }
                }
            }
            if !is_out {
                for o in out.iter_mut() {
                    *o = act.apply(*o);
                }
            } else if let Some((lo, hi)) = self.spec.output_bound {
                for o in out.iter_mut() {
                    *o = lo + (hi - lo) * 0.5 * (tanh(*o) + 1.0);
                }
            }
        }
        let last = self.shapes[n_layers - 1];
        &scratch.acts[last.act..last.act + last.n_out]
    }

    /// Backpropagates `upstream` through the most recent forward pass stored in
    /// `scratch`, down to the first-layer pre-activation. Leaves `δ1` in
    /// `scratch.delta[..n1]`. Accumulates gradients of all layers but the first.
    fn backward_to_first(&self, upstream: &[f64], scratch: &mut Scratch, grad: &mut [f64]) {
        let n_layers = self.shapes.len();
        let act = self.spec.activation;
        let last = self.shapes[n_layers - 1];
        {
            let out = &scratch.acts[last.act..last.act + last.n_out];
            for (o, (d, &u)) in scratch.delta[..last.n_out].iter_mut().zip(upstream).enumerate() {
                *d = match self.spec.output_bound {
                    Some((lo, hi)) => {
                        let th = 2.0 * (out[o] - lo) / (hi - lo) - 1.0;
                        u * 0.5 * (hi - lo) * (1.0 - th * th)
                    }
                    None => u,
                };
            }
        }
        for l in (1..n_layers).rev() {
            let s = self.shapes[l];
            let input = &scratch.acts[s.act - s.n_in..s.act];
            let delta = &scratch.delta[..s.n_out];
            for (g, &d) in grad[s.b..s.b + s.n_out].iter_mut().zip(delta) {
                *g += d;
            }
            let prev = &mut scratch.delta_prev[..s.n_in];
            prev.iter_mut().for_each(|p| *p = 0.0);
            for (o, &d) in delta.iter().enumerate() {
                let row = &self.params[s.w + o * s.n_in..s.w + (o + 1) * s.n_in];
                let grow = &mut grad[s.w + o * s.n_in..s.w + (o + 1) * s.n_in];
                for ((p, g), (&w, &a)) in prev.iter_mut().zip(grow.iter_mut()).zip(row.iter().zip(input)) {
                    *p += w * d;
                    *g += d * a;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                *p *= act.derivative_from_output(a);
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
        }
    }

    /// Full backward pass after [`Dense::forward`] at the same `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64], scratch: &mut Scratch, grad: &mut [f64], grad_x: &mut [f64]) {
        self.backward_to_first(upstream, scratch, grad);
        let s = self.shapes[0];
        let delta = &scratch.delta[..s.n_out];
        grad_x.iter_mut().for_each(|g| *g = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            grad[s.b + o] += d;
            let row = &self.params[s.w + o * s.n_in..s.w + (o + 1) * s.n_in];
            let grow = &mut grad[s.w + o * s.n_in..s.w + (o + 1) * s.n_in];
            for ((gx, g), (&w, &xi)) in grad_x.iter_mut().zip(grow.iter_mut()).zip(row.iter().zip(x)) {
                *gx += w * d;
                *g += d * xi;
            }
        }
    }

    /// Backward pass after [`Dense::forward_from_pre`]. Only the free column of
    /// the first layer receives its weight gradient here; `δ1` is added to
    /// `pre_acc` so that the bias and folded columns can be settled once with
    /// [`Dense::settle_pre`]. Returns the derivative with respect to `x`.
    pub fn backward_from_pre(
        &self,
        col: usize,
        x: f64,
        upstream: &[f64],
        scratch: &mut Scratch,
        grad: &mut [f64],
        pre_acc: &mut [f64],
    ) -> f64 {
        self.backward_to_first(upstream, scratch, grad);
        let s = self.shapes[0];
        let delta = &scratch.delta[..s.n_out];
        let mut dx = 0.0;
        for (o, (&d, acc)) in delta.iter().zip(pre_acc.iter_mut()).enumerate() {
            *acc += d;
            let idx = s.w + o * s.n_in + col;
            dx += self.params[idx] * d;
            grad[idx] += d * x;
        }
        dx
    }

    /// Adds the gradient of the folded bias: `pre_acc` is `Σ δ1` over all
    /// evaluations that shared `input`.
    pub fn settle_pre(&self, input: &[f64], skip: usize, pre_acc: &[f64], grad: &mut [f64]) {
        let s = self.shapes[0];
        for (o, &d) in pre_acc.iter().enumerate() {
            grad[s.b + o] += d;
            for (i, &xi) in input.iter().enumerate() {
                if i != skip {
                    grad[s.w + o * s.n_in + i] += d * xi;
                }
            }
        }
    }

    /// `W1[:, i]ᵀ · v`, the sensitivity of the folded bias to input column `i`.
    pub fn first_layer_column_dot(&self, i: usize, v: &[f64]) -> f64 {
        let s = self.shapes[0];
        self.wt[s.w + i * s.n_out..s.w + (i + 1) * s.n_out].iter().zip(v).map(|(w, d)| w * d).sum()
    }

    pub fn first_width(&self) -> usize {
        self.shapes[0].n_out
    }

    /// Length of the activation buffer of a batch of `nb` points.
    pub fn batch_acts_len(&self, nb: usize) -> usize {
        self.n_acts * nb
    }

    /// Buffers for batch backward passes of up to `max_batch` points.
    pub fn batch_scratch(&self, max_batch: usize) -> BatchScratch {
        let w = *self.spec.layer_sizes.iter().max().unwrap();
        BatchScratch { delta: vec![0.0; w * max_batch], delta_prev: vec![0.0; w * max_batch] }
    }

    /// [`Dense::forward_from_pre`] over a batch `xs`. `acts` receives every
    /// layer's activations neuron-major (`acts[(off + o) * nb + b]`); the
    /// outputs are the last `n_outputs * nb` entries.
    pub fn forward_batch_from_pre(&self, pre: &[f64], col: usize, xs: &[f64], acts: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_fma() {
            // SAFETY: the features were detected at run time.
            return unsafe { self.forward_batch_fma(pre, col, xs, acts) };
        }
        self.forward_batch::<false>(pre, col, xs, acts)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn forward_batch_fma(&self, pre: &[f64], col: usize, xs: &[f64], acts: &mut [f64]) {
        self.forward_batch::<true>(pre, col, xs, acts)
    }

    #[inline(always)]
    fn forward_batch<const FMA: bool>(&self, pre: &[f64], col: usize, xs: &[f64], acts: &mut [f64]) {
        let nb = xs.len();
        let n_layers = self.shapes.len();
        let act = self.spec.activation;
        for (l, s) in self.shapes.iter().enumerate() {
            let (prev, rest) = acts.split_at_mut(s.act * nb);
            let out = &mut rest[..s.n_out * nb];
            if l == 0 {
                let cw = &self.wt[s.w + col * s.n_out..s.w + (col + 1) * s.n_out];
                for (o, z) in out.chunks_exact_mut(nb).enumerate() {
                    let (p, w) = (pre[o], cw[o]);
                    for (z, &x) in z.iter_mut().zip(xs) {
                        *z = madd::<FMA>(w, x, p);
                    }
                }
            } else {
                let input = &prev[(s.act - s.n_in) * nb..];
                for (o, z) in out.chunks_exact_mut(nb).enumerate() {
                    let row = &self.params[s.w + o * s.n_in..s.w + (o + 1) * s.n_in];
                    combine::<FMA>(row, self.params[s.b + o], input, nb, z);
                }
            }
            if l + 1 < n_layers {
                if act == Activation::Tanh {
                    tanh_in_place::<FMA>(out);
                }
            } else if let Some((lo, hi)) = self.spec.output_bound {
                tanh_in_place::<FMA>(out);
                for o in out.iter_mut() {
                    *o = lo + (hi - lo) * 0.5 * (*o + 1.0);
                }
            }
        }
    }

    /// Batch counterpart of [`Dense::backward_from_pre`] after
    /// [`Dense::forward_batch_from_pre`]. `upstream` is neuron-major like the
    /// outputs. Writes `∂/∂x` per point into `dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch_from_pre(
        &self,
        col: usize,
        xs: &[f64],
        acts: &[f64],
        upstream: &[f64],
        bs: &mut BatchScratch,
        grad: &mut [f64],
        pre_acc: &mut [f64],
        dx: &mut [f64],
    ) {
        #[cfg(target_arch = "x86_64")]
        if has_fma() {
            // SAFETY: the features were detected at run time.
            return unsafe { self.backward_batch_fma(col, xs, acts, upstream, bs, grad, pre_acc, dx) };
        }
        self.backward_batch::<false>(col, xs, acts, upstream, bs, grad, pre_acc, dx)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn backward_batch_fma(
        &self,
        col: usize,
        xs: &[f64],
        acts: &[f64],
        upstream: &[f64],
        bs: &mut BatchScratch,
        grad: &mut [f64],
        pre_acc: &mut [f64],
        dx: &mut [f64],
    ) {
        self.backward_batch::<true>(col, xs, acts, upstream, bs, grad, pre_acc, dx)
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn backward_batch<const FMA: bool>(
        &self,
        col: usize,
        xs: &[f64],
        acts: &[f64],
        upstream: &[f64],
        bs: &mut BatchScratch,
        grad: &mut [f64],
        pre_acc: &mut [f64],
        dx: &mut [f64],
    ) {
        let nb = xs.len();
        let n_layers = self.shapes.len();
        let act = self.spec.activation;
        let last = self.shapes[n_layers - 1];
        {
            let delta = &mut bs.delta[..last.n_out * nb];
            match self.spec.output_bound {
                Some((lo, hi)) => {
                    let out = &acts[last.act * nb..(last.act + last.n_out) * nb];
                    for ((d, &u), &y) in delta.iter_mut().zip(upstream).zip(out) {
                        let th = 2.0 * (y - lo) / (hi - lo) - 1.0;
                        *d = u * 0.5 * (hi - lo) * (1.0 - th * th);
                    }
                }
                None => delta.copy_from_slice(&upstream[..last.n_out * nb]),
            }
        }
        for l in (1..n_layers).rev() {
            let s = self.shapes[l];
            let input = &acts[(s.act - s.n_in) * nb..s.act * nb];
            let delta = &bs.delta[..s.n_out * nb];
            for (o, d) in delta.chunks_exact(nb).enumerate() {
                grad[s.b + o] += d.iter().sum::<f64>();
                dot_rows::<FMA>(d, input, nb, &mut grad[s.w + o * s.n_in..s.w + (o + 1) * s.n_in]);
            }
            let prev = &mut bs.delta_prev[..s.n_in * nb];
            for (i, (p, a)) in prev.chunks_exact_mut(nb).zip(input.chunks_exact(nb)).enumerate() {
                let wcol = &self.wt[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
                combine::<FMA>(wcol, 0.0, delta, nb, p);
                if act == Activation::Tanh {
                    for (p, &a) in p.iter_mut().zip(a) {
                        *p *= 1.0 - a * a;
                    }
                }
            }
            std::mem::swap(&mut bs.delta, &mut bs.delta_prev);
        }
        let s = self.shapes[0];
        dx[..nb].fill(0.0);
        for (o, (d, acc)) in bs.delta[..s.n_out * nb].chunks_exact(nb).zip(pre_acc.iter_mut()).enumerate() {
            let idx = s.w + o * s.n_in + col;
            let w = self.params[idx];
            for (g, &d) in dx.iter_mut().zip(d) {
                *g = madd::<FMA>(w, d, *g);
            }
            *acc += d.iter().sum::<f64>();
            grad[idx] += dot::<FMA>(d, xs);
        }
    }

    /// Number of activations a forward pass leaves in the scratch.
    pub fn n_acts(&self) -> usize {
        self.n_acts
    }

    /// Copies the activations of the last forward pass out of `scratch`.
    pub fn save_acts(&self, scratch: &Scratch, out: &mut [f64]) {
        out.copy_from_slice(&scratch.acts);
    }

    /// Restores activations saved by [`Dense::save_acts`], so that a backward
    /// pass can run without repeating the forward one.
    pub fn load_acts(&self, scratch: &mut Scratch, saved: &[f64]) {
        scratch.acts.copy_from_slice(saved);
    }
}

/// Adam hyper-parameters, with an optional step decay of the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Factor applied to the learning rate every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 1.0, decay_every: 0 }
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        if c.decay_every == 0 {
            c.lr
        } else {
            c.lr * c.decay.powi((self.step / c.decay_every as u64) as i32)
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves the parameters
/// untouched and reports divergence.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradient entries, state for {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged {
            epoch: state.step as usize,
            detail: format!("non-finite gradient entry {i}"),
        });
    }
    let lr = state.learning_rate();
    state.step += 1;
    let AdamConfig { beta1, beta2, eps, .. } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

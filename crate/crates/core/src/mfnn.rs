//! Networks taking a probability measure as an argument.
//!
//! Two encodings of the measure are supported:
//!
//! * **Bins**: the measure enters as its `K` bin values, and the network is a
//!   dense net on `[t?, x, p_1, …, p_K]`.
//! * **Cylindrical**: an inner net `φ([t?, x]) ∈ R^q` is averaged over samples of
//!   the measure, and an outer net `Ψ` reads `[t?, x, latent]`.
//!
//! The optional leading `t` input is present when `time_input` is set. For the
//! cylindrical variant it feeds both the inner and outer net.
//!
//! The flat parameter vector is the outer net's parameters followed by the inner
//! net's.
//!
//! Solvers evaluate whole particle clouds that share a measure argument. They
//! use the [`Field`] trait: [`Field::context`] folds everything except `x` into
//! the first layer once per cloud. [`Field::backward`] then handles one particle,
//! and [`Field::settle`] finishes the shared part.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::BinDensity;
use crate::nnet::{init_params_with, Activation, BatchScratch, Dense, MlpSpec, Scratch};

/// How the measure argument is encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetVariant {
    Bin { k: usize },
    Cylindrical { q: usize },
}

/// A measure-dependent network.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldNet {
    pub variant: NetVariant,
    pub time_input: bool,
    pub outer: MlpSpec,
    pub inner: Option<MlpSpec>,
    pub params: Vec<f64>,
}

/// Measure argument for single-point evaluation.
#[derive(Clone, Copy, Debug)]
pub enum MeasureArg<'a> {
    Density(&'a BinDensity),
    Cloud(&'a [f64]),
    Latent(&'a [f64]),
}

fn layers(n_in: usize, hidden: &[usize], n_out: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(n_in);
    v.extend_from_slice(hidden);
    v.push(n_out);
    v
}

impl MeanFieldNet {
    /// Bin-encoded network with tanh hidden layers.
    pub fn bins(k: usize, hidden: &[usize], out_dim: usize, time_input: bool, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("bin count must be positive".into()));
        }
        let outer = MlpSpec::new(layers(time_input as usize + 1 + k, hidden, out_dim), Activation::Tanh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params_with(&outer, &mut rng).flat;
        Ok(Self { variant: NetVariant::Bin { k }, time_input, outer, inner: None, params })
    }

    /// Cylindrical network with latent dimension `q`.
    pub fn cylindrical(q: usize, hidden: &[usize], out_dim: usize, time_input: bool, seed: u64) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter("latent dimension must be positive".into()));
        }
        let t = time_input as usize;
        let outer = MlpSpec::new(layers(t + 1 + q, hidden, out_dim), Activation::Tanh)?;
        let inner = MlpSpec::new(layers(t + 1, hidden, q), Activation::Tanh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params_with(&outer, &mut rng).flat;
        params.extend(init_params_with(&inner, &mut rng).flat);
        Ok(Self { variant: NetVariant::Cylindrical { q }, time_input, outer, inner: Some(inner), params })
    }

    /// Squashes every output onto `[lo, hi]`.
    pub fn with_output_bound(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.outer = self.outer.with_output_bound(lo, hi)?;
        Ok(self)
    }

    pub fn out_dim(&self) -> usize {
        self.outer.n_outputs()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Column of `x` in the input vector.
    pub fn x_col(&self) -> usize {
        self.time_input as usize
    }

    fn outer_len(&self) -> usize {
        self.outer.n_params()
    }

    /// Binds the current parameters for repeated cloud evaluations.
    pub fn prepare(&self) -> PreparedNet<'_> {
        let n = self.outer_len();
        let outer = Dense::new(&self.outer, &self.params[..n]).expect("consistent outer net");
        let inner = self.inner.as_ref().map(|s| Dense::new(s, &self.params[n..]).expect("consistent inner net"));
        PreparedNet { net: self, outer, inner }
    }
}

/// `(1/N) Σ φ(t, x_n)` for a cylindrical network.
pub fn empirical_latent(net: &MeanFieldNet, t: f64, cloud: &[f64]) -> Result<Vec<f64>> {
    let prepared = net.prepare();
    let inner = prepared.inner.as_ref().ok_or_else(|| Error::WrongVariant("bin networks have no latent".into()))?;
    if cloud.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok(prepared.latent(inner, t, cloud, &mut FieldScratch::default()))
}

/// Evaluates the network at one point.
pub fn mf_eval(net: &MeanFieldNet, t: f64, measure: MeasureArg<'_>, x: f64) -> Result<Vec<f64>> {
    let prepared = net.prepare();
    let view = prepared.view_for(measure)?;
    let mut sc = prepared.scratch();
    let ctx = prepared.context_from(t, &view, &mut sc)?;
    let mut out = vec![0.0; net.out_dim()];
    prepared.eval(&ctx, x, &mut sc, &mut out);
    Ok(out)
}

/// Gradient of `upstream · mf_eval(...)` with respect to the parameters and `x`.
///
/// With a cylindrical net and a [`MeasureArg::Cloud`], the inner network
/// receives its gradient through the latent average. A given
/// [`MeasureArg::Latent`] is treated as a constant.
pub fn mf_grad(
    net: &MeanFieldNet,
    t: f64,
    measure: MeasureArg<'_>,
    x: f64,
    upstream: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if upstream.len() != net.out_dim() {
        return Err(Error::Shape(format!("upstream has {} entries, expected {}", upstream.len(), net.out_dim())));
    }
    let prepared = net.prepare();
    let view = prepared.view_for(measure)?;
    let mut sc = prepared.scratch();
    let ctx = prepared.context_from(t, &view, &mut sc)?;
    let mut grad = vec![0.0; net.n_params()];
    let mut acc = vec![0.0; prepared.acc_len()];
    let dx = prepared.backward(&ctx, x, upstream, &mut sc, &mut grad, &mut acc);
    let cloud = match measure {
        MeasureArg::Cloud(c) => c,
        _ => &[],
    };
    prepared.settle_inner(&ctx, &acc, cloud, &mut sc, &mut grad, None);
    Ok((grad, dx))
}

/// Measure data available to a [`Field`] at one time step.
#[derive(Clone, Copy, Debug)]
pub struct MeasureView<'a> {
    /// Bin values of the measure, required by bin networks.
    pub density: Option<&'a BinDensity>,
    /// Particles representing the measure.
    pub cloud: &'a [f64],
}

/// Per-cloud evaluation state.
#[derive(Clone, Debug, Default)]
pub struct FieldCtx {
    pub t: f64,
    /// Empirical mean of the cloud.
    pub mean: f64,
    input: Vec<f64>,
    pre: Vec<f64>,
    inner_pre: Vec<f64>,
}

impl FieldCtx {
    /// A context carrying only the time and the cloud mean, for fields without
    /// learnt measure features.
    pub fn new(t: f64, mean: f64) -> Self {
        Self { t, mean, ..Self::default() }
    }
}

/// Buffers for one thread of [`Field`] evaluations.
#[derive(Clone, Debug, Default)]
pub struct FieldScratch {
    outer: Option<Scratch>,
    buf: Vec<f64>,
    inner_acc: Vec<f64>,
    acts: Vec<f64>,
    up: Vec<f64>,
    bdx: Vec<f64>,
    outer_batch: Option<BatchScratch>,
    inner_batch: Option<BatchScratch>,
}

/// Points per batch in cloud evaluations.
pub const BATCH: usize = 64;

/// A function `(t, μ, x) ↦ R^d` that can be evaluated and differentiated over a
/// particle cloud.
pub trait Field: Sync {
    fn out_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Length of the per-cloud accumulator passed to [`Field::backward`].
    fn acc_len(&self) -> usize;
    fn scratch(&self) -> FieldScratch;
    fn context(&self, t: f64, view: &MeasureView<'_>, scratch: &mut FieldScratch) -> Result<FieldCtx>;
    fn eval(&self, ctx: &FieldCtx, x: f64, scratch: &mut FieldScratch, out: &mut [f64]);
    /// Adds `upstream · ∂out/∂θ` into `grad` (per-particle part only) and the
    /// shared part into `acc`; returns `upstream · ∂out/∂x`.
    fn backward(
        &self,
        ctx: &FieldCtx,
        x: f64,
        upstream: &[f64],
        scratch: &mut FieldScratch,
        grad: &mut [f64],
        acc: &mut [f64],
    ) -> f64;
    /// Per-point length of the record written by [`Field::eval_many`].
    fn record_len(&self) -> usize {
        0
    }
    /// Evaluates every point of `xs` into `out` (point-major,
    /// `xs.len() × out_dim`). A non-empty `record` (`record_len() × xs.len()`)
    /// keeps what a later [`Field::backward_many`] at the same points needs.
    fn eval_many(&self, ctx: &FieldCtx, xs: &[f64], scratch: &mut FieldScratch, out: &mut [f64], _record: &mut [f64]) {
        let d = self.out_dim();
        for (&x, o) in xs.iter().zip(out.chunks_exact_mut(d)) {
            self.eval(ctx, x, scratch, o);
        }
    }
    /// [`Field::backward`] over the points `xs` with point-major `upstream`;
    /// writes each `upstream · ∂out/∂x` into `dx`. `record` is the one filled
    /// by [`Field::eval_many`] at the same points.
    #[allow(clippy::too_many_arguments)]
    fn backward_many(
        &self,
        ctx: &FieldCtx,
        xs: &[f64],
        upstream: &[f64],
        scratch: &mut FieldScratch,
        grad: &mut [f64],
        acc: &mut [f64],
        _record: &[f64],
        dx: &mut [f64],
    ) {
        let d = self.out_dim();
        for ((&x, u), g) in xs.iter().zip(upstream.chunks_exact(d)).zip(dx.iter_mut()) {
            *g = self.backward(ctx, x, u, scratch, grad, acc);
        }
    }
    /// Settles the shared part accumulated over a cloud. When `cloud_dx` is
    /// given, the derivative with respect to each particle of `view.cloud`
    /// (through the measure argument) is added to it.
    fn settle(
        &self,
        ctx: &FieldCtx,
        acc: &[f64],
        view: &MeasureView<'_>,
        scratch: &mut FieldScratch,
        grad: &mut [f64],
        cloud_dx: Option<&mut [f64]>,
    );
}

thread_local! {
    static RECORD_POOL: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Record buffer for [`Field::eval_many`] drawn from a per-thread pool, so that
/// repeated passes over large clouds reuse memory instead of zero-filling it.
/// Contents on creation are unspecified.
pub(crate) struct RecordBuf {
    buf: Vec<f64>,
    len: usize,
}

impl RecordBuf {
    pub(crate) fn new(len: usize) -> Self {
        let mut buf = RECORD_POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        Self { buf, len }
    }
}

impl std::ops::Deref for RecordBuf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf[..self.len]
    }
}

impl std::ops::DerefMut for RecordBuf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf[..self.len]
    }
}

impl Drop for RecordBuf {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.buf);
        if buf.capacity() > 0 {
            RECORD_POOL.with(|p| p.borrow_mut().push(buf));
        }
    }
}

fn cloud_mean(cloud: &[f64]) -> f64 {
    if cloud.is_empty() {
        0.0
    } else {
        cloud.iter().sum::<f64>() / cloud.len() as f64
    }
}

/// A [`MeanFieldNet`] bound to its parameters.
pub struct PreparedNet<'a> {
    pub net: &'a MeanFieldNet,
    outer: Dense<'a>,
    inner: Option<Dense<'a>>,
}

impl<'a> PreparedNet<'a> {
    fn view_for<'m>(&self, measure: MeasureArg<'m>) -> Result<ViewOrLatent<'m>> {
        match (self.net.variant, measure) {
            (NetVariant::Bin { k }, MeasureArg::Density(d)) => {
                if d.p.len() != k {
                    return Err(Error::Shape(format!("density has {} bins, network expects {k}", d.p.len())));
                }
                Ok(ViewOrLatent::View(MeasureView { density: Some(d), cloud: &[] }))
            }
            (NetVariant::Cylindrical { .. }, MeasureArg::Cloud(c)) => {
                if c.is_empty() {
                    return Err(Error::EmptySamples);
                }
                Ok(ViewOrLatent::View(MeasureView { density: None, cloud: c }))
            }
            (NetVariant::Cylindrical { q }, MeasureArg::Latent(l)) => {
                if l.len() != q {
                    return Err(Error::Shape(format!("latent has {} entries, expected {q}", l.len())));
                }
                Ok(ViewOrLatent::Latent(l))
            }
            (NetVariant::Bin { .. }, _) => Err(Error::WrongVariant("bin networks take a bin density".into())),
            (NetVariant::Cylindrical { .. }, MeasureArg::Density(_)) => {
                Err(Error::WrongVariant("cylindrical networks take samples or a latent".into()))
            }
        }
    }

    fn context_from(&self, t: f64, v: &ViewOrLatent<'_>, sc: &mut FieldScratch) -> Result<FieldCtx> {
        match v {
            ViewOrLatent::View(view) => self.context(t, view, sc),
            ViewOrLatent::Latent(l) => Ok(self.context_with_latent(t, l, 0.0)),
        }
    }

    fn latent(&self, inner: &Dense<'_>, t: f64, cloud: &[f64], sc: &mut FieldScratch) -> Vec<f64> {
        let q = inner.spec().n_outputs();
        let na = inner.n_acts();
        let pre = self.inner_pre(inner, t);
        let mut sum = vec![0.0; q];
        let col = self.net.x_col();
        sc.acts.resize(na * BATCH, 0.0);
        for xb in cloud.chunks(BATCH) {
            let nb = xb.len();
            let acts = &mut sc.acts[..na * nb];
            inner.forward_batch_from_pre(&pre, col, xb, acts);
            for (s, o) in sum.iter_mut().zip(acts[(na - q) * nb..].chunks_exact(nb)) {
                *s += o.iter().sum::<f64>();
            }
        }
        let inv = 1.0 / cloud.len() as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
        sum
    }

    fn inner_pre(&self, inner: &Dense<'_>, t: f64) -> Vec<f64> {
        let mut pre = vec![0.0; inner.first_width()];
        let input: Vec<f64> = if self.net.time_input { vec![t, 0.0] } else { vec![0.0] };
        inner.first_layer_pre(&input, self.net.x_col(), &mut pre);
        pre
    }

    fn context_with_latent(&self, t: f64, latent: &[f64], mean: f64) -> FieldCtx {
        let mut input = Vec::with_capacity(self.net.outer.n_inputs());
        if self.net.time_input {
            input.push(t);
        }
        input.push(0.0);
        input.extend_from_slice(latent);
        let mut pre = vec![0.0; self.outer.first_width()];
        self.outer.first_layer_pre(&input, self.net.x_col(), &mut pre);
        let inner_pre = self.inner.as_ref().map(|i| self.inner_pre(i, t)).unwrap_or_default();
        FieldCtx { t, mean, input, pre, inner_pre }
    }

    fn settle_inner(
        &self,
        ctx: &FieldCtx,
        acc: &[f64],
        cloud: &[f64],
        sc: &mut FieldScratch,
        grad: &mut [f64],
        cloud_dx: Option<&mut [f64]>,
    ) {
        let n_outer = self.net.outer_len();
        let col = self.net.x_col();
        self.outer.settle_pre(&ctx.input, col, acc, &mut grad[..n_outer]);
        let Some(inner) = self.inner.as_ref() else { return };
        if cloud.is_empty() {
            return;
        }
        let q = inner.spec().n_outputs();
        let lat0 = col + 1;
        let inv = 1.0 / cloud.len() as f64;
        sc.buf.clear();
        sc.buf.extend((0..q).map(|j| self.outer.first_layer_column_dot(lat0 + j, acc) * inv));
        if sc.buf.iter().all(|&v| v == 0.0) {
            return;
        }
        let na = inner.n_acts();
        let mut bs = sc.inner_batch.take().unwrap_or_else(|| inner.batch_scratch(BATCH));
        let mut iacc = std::mem::take(&mut sc.inner_acc);
        iacc.clear();
        iacc.resize(inner.first_width(), 0.0);
        sc.acts.resize(na * BATCH, 0.0);
        sc.up.resize(q * BATCH, 0.0);
        sc.bdx.resize(BATCH, 0.0);
        let g_inner = &mut grad[n_outer..];
        let mut dx_out = cloud_dx;
        for (c, xb) in cloud.chunks(BATCH).enumerate() {
            let nb = xb.len();
            for (u, &v) in sc.up[..q * nb].chunks_exact_mut(nb).zip(&sc.buf) {
                u.fill(v);
            }
            inner.forward_batch_from_pre(&ctx.inner_pre, col, xb, &mut sc.acts[..na * nb]);
            inner.backward_batch_from_pre(
                col,
                xb,
                &sc.acts[..na * nb],
                &sc.up[..q * nb],
                &mut bs,
                g_inner,
                &mut iacc,
                &mut sc.bdx[..nb],
            );
            if let Some(dx) = dx_out.as_deref_mut() {
                for (d, &v) in dx[c * BATCH..c * BATCH + nb].iter_mut().zip(&sc.bdx) {
                    *d += v;
                }
            }
        }
        let tin: Vec<f64> = if self.net.time_input { vec![ctx.t, 0.0] } else { vec![0.0] };
        inner.settle_pre(&tin, col, &iacc, g_inner);
        sc.inner_acc = iacc;
        sc.inner_batch = Some(bs);
    }
}

enum ViewOrLatent<'m> {
    View(MeasureView<'m>),
    Latent(&'m [f64]),
}

impl Field for PreparedNet<'_> {
    fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn acc_len(&self) -> usize {
        self.outer.first_width()
    }

    fn scratch(&self) -> FieldScratch {
        FieldScratch {
            outer: Some(self.outer.scratch()),
            ..FieldScratch::default()
        }
    }

    fn context(&self, t: f64, view: &MeasureView<'_>, sc: &mut FieldScratch) -> Result<FieldCtx> {
        let mean = cloud_mean(view.cloud);
        match self.net.variant {
            NetVariant::Bin { k } => {
                let d = view.density.ok_or_else(|| Error::WrongVariant("bin network needs bin values".into()))?;
                if d.p.len() != k {
                    return Err(Error::Shape(format!("density has {} bins, network expects {k}", d.p.len())));
                }
                let mut input = Vec::with_capacity(self.net.outer.n_inputs());
                if self.net.time_input {
                    input.push(t);
                }
                input.push(0.0);
                input.extend_from_slice(&d.p);
                let mut pre = vec![0.0; self.outer.first_width()];
                self.outer.first_layer_pre(&input, self.net.x_col(), &mut pre);
                Ok(FieldCtx { t, mean, input, pre, inner_pre: Vec::new() })
            }
            NetVariant::Cylindrical { .. } => {
                if view.cloud.is_empty() {
                    return Err(Error::EmptySamples);
                }
                let inner = self.inner.as_ref().expect("cylindrical net has an inner part");
                let latent = self.latent(inner, t, view.cloud, sc);
                Ok(self.context_with_latent(t, &latent, mean))
            }
        }
    }

    #[inline]
    fn eval(&self, ctx: &FieldCtx, x: f64, sc: &mut FieldScratch, out: &mut [f64]) {
        let o = self.outer.forward_from_pre(&ctx.pre, self.net.x_col(), x, sc.outer.as_mut().unwrap());
        out.copy_from_slice(o);
    }

    #[inline]
    fn backward(
        &self,
        ctx: &FieldCtx,
        x: f64,
        upstream: &[f64],
        sc: &mut FieldScratch,
        grad: &mut [f64],
        acc: &mut [f64],
    ) -> f64 {
        let col = self.net.x_col();
        let osc = sc.outer.as_mut().unwrap();
        self.outer.forward_from_pre(&ctx.pre, col, x, osc);
        let n_outer = self.net.outer_len();
        self.outer.backward_from_pre(col, x, upstream, osc, &mut grad[..n_outer], acc)
    }

    fn record_len(&self) -> usize {
        self.outer.n_acts()
    }

    fn eval_many(&self, ctx: &FieldCtx, xs: &[f64], sc: &mut FieldScratch, out: &mut [f64], record: &mut [f64]) {
        let (col, d, na) = (self.net.x_col(), self.out_dim(), self.outer.n_acts());
        let mut own = std::mem::take(&mut sc.acts);
        own.resize(na * BATCH, 0.0);
        for (c, xb) in xs.chunks(BATCH).enumerate() {
            let nb = xb.len();
            let acts = if record.is_empty() {
                &mut own[..na * nb]
            } else {
                &mut record[na * c * BATCH..na * (c * BATCH + nb)]
            };
            self.outer.forward_batch_from_pre(&ctx.pre, col, xb, acts);
            let res = &acts[(na - d) * nb..];
            let ob = &mut out[c * BATCH * d..(c * BATCH + nb) * d];
            for (b, o) in ob.chunks_exact_mut(d).enumerate() {
                for (i, o) in o.iter_mut().enumerate() {
                    *o = res[i * nb + b];
                }
            }
        }
        sc.acts = own;
    }

    fn backward_many(
        &self,
        ctx: &FieldCtx,
        xs: &[f64],
        upstream: &[f64],
        sc: &mut FieldScratch,
        grad: &mut [f64],
        acc: &mut [f64],
        record: &[f64],
        dx: &mut [f64],
    ) {
        let (col, d, na) = (self.net.x_col(), self.out_dim(), self.outer.n_acts());
        let n_outer = self.net.outer_len();
        let mut bs = sc.outer_batch.take().unwrap_or_else(|| self.outer.batch_scratch(BATCH));
        let mut own = std::mem::take(&mut sc.acts);
        own.resize(na * BATCH, 0.0);
        sc.up.resize(d * BATCH, 0.0);
        for (c, xb) in xs.chunks(BATCH).enumerate() {
            let nb = xb.len();
            let s0 = c * BATCH;
            let ub = &upstream[s0 * d..(s0 + nb) * d];
            for (b, u) in ub.chunks_exact(d).enumerate() {
                for (i, &u) in u.iter().enumerate() {
                    sc.up[i * nb + b] = u;
                }
            }
            let acts = if record.is_empty() {
                self.outer.forward_batch_from_pre(&ctx.pre, col, xb, &mut own[..na * nb]);
                &own[..na * nb]
            } else {
                &record[na * s0..na * (s0 + nb)]
            };
            self.outer.backward_batch_from_pre(
                col,
                xb,
                acts,
                &sc.up[..d * nb],
                &mut bs,
                &mut grad[..n_outer],
                acc,
                &mut dx[s0..s0 + nb],
            );
        }
        sc.outer_batch = Some(bs);
        sc.acts = own;
    }

    fn settle(
        &self,
        ctx: &FieldCtx,
        acc: &[f64],
        view: &MeasureView<'_>,
        sc: &mut FieldScratch,
        grad: &mut [f64],
        cloud_dx: Option<&mut [f64]>,
    ) {
        self.settle_inner(ctx, acc, view.cloud, sc, grad, cloud_dx);
    }
}

const MAGIC: &[u8; 4] = b"MFNN";
const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(b[0])
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

fn put_sizes(w: &mut impl Write, sizes: &[usize]) -> Result<()> {
    put_u32(w, sizes.len() as u32)?;
    for &s in sizes {
        put_u32(w, s as u32)?;
    }
    Ok(())
}

fn get_sizes(r: &mut impl Read) -> Result<Vec<usize>> {
    let n = get_u32(r)? as usize;
    if n > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    (0..n).map(|_| get_u32(r).map(|v| v as usize)).collect()
}

/// Serialises a network. Layout, all little-endian:
///
/// ```text
/// "MFNN" | version u32 | variant u8 (0 bins, 1 cylindrical) | time_input u8
/// | activation u8 | bounded u8 | lo f64 | hi f64 | K or q u32
/// | outer layer count u32 | outer sizes u32… | inner layer count u32 | inner sizes u32…
/// | parameter count u64 | parameters f64…
/// ```
pub fn write_checkpoint(net: &MeanFieldNet, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    let (tag, kq) = match net.variant {
        NetVariant::Bin { k } => (0u8, k),
        NetVariant::Cylindrical { q } => (1u8, q),
    };
    let (bounded, lo, hi) = match net.outer.output_bound {
        Some((lo, hi)) => (1u8, lo, hi),
        None => (0u8, 0.0, 0.0),
    };
    w.write_all(&[tag, net.time_input as u8, net.outer.activation.tag(), bounded])?;
    w.write_all(&lo.to_le_bytes())?;
    w.write_all(&hi.to_le_bytes())?;
    put_u32(w, kq as u32)?;
    put_sizes(w, &net.outer.layer_sizes)?;
    put_sizes(w, net.inner.as_ref().map(|s| s.layer_sizes.as_slice()).unwrap_or(&[]))?;
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_checkpoint`].
pub fn read_checkpoint(r: &mut impl Read) -> Result<MeanFieldNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let tag = get_u8(r)?;
    let time_input = get_u8(r)? != 0;
    let activation = Activation::from_tag(get_u8(r)?)?;
    let bounded = get_u8(r)? != 0;
    let lo = get_f64(r)?;
    let hi = get_f64(r)?;
    let kq = get_u32(r)? as usize;
    let outer_sizes = get_sizes(r)?;
    let inner_sizes = get_sizes(r)?;
    let mut outer = MlpSpec::new(outer_sizes, activation).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bounded {
        outer = outer.with_output_bound(lo, hi).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let t = time_input as usize;
    let (variant, inner) = match tag {
        0 => {
            if outer.n_inputs() != t + 1 + kq {
                return Err(Error::Checkpoint("bin count does not match input width".into()));
            }
            (NetVariant::Bin { k: kq }, None)
        }
        1 => {
            let inner = MlpSpec::new(inner_sizes, activation).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if outer.n_inputs() != t + 1 + kq || inner.n_outputs() != kq || inner.n_inputs() != t + 1 {
                return Err(Error::Checkpoint("latent dimension does not match layer sizes".into()));
            }
            (NetVariant::Cylindrical { q: kq }, Some(inner))
        }
        _ => return Err(Error::Checkpoint(format!("unknown variant tag {tag}"))),
    };
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let n = u64::from_le_bytes(nb) as usize;
    let expected = outer.n_params() + inner.as_ref().map_or(0, |s| s.n_params());
    if n != expected {
        return Err(Error::Checkpoint(format!("{n} parameters stored, architecture needs {expected}")));
    }
    let params = (0..n).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
    Ok(MeanFieldNet { variant, time_input, outer, inner, params })
}

pub fn save_checkpoint(net: &MeanFieldNet, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MeanFieldNet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

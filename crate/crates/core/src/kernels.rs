//! Raw forward/backward kernels on contiguous row-major slices.
//!
//! These functions know nothing about the tape; they are the arithmetic the
//! tape's forward ops and backward rules dispatch to.

use crate::tensor::Scalar;

/// Stand-in for minus infinity in the causal mask. `exp` of it underflows
/// to exactly zero without producing `NaN` from `inf * 0`.
pub const MASK_VALUE: f64 = -1e9;

/// Row-major `rows x cols` matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, F: Scalar> Mat<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        let (rs, cs) = (self.cols as isize, 1isize);
        if self.transposed {
            (self.cols, self.rows, cs, rs)
        } else {
            (self.rows, self.cols, rs, cs)
        }
    }
}

/// `c = a * b + beta * c` where `c` is row-major `m x n`.
pub fn gemm<F: Scalar>(a: Mat<'_, F>, b: Mat<'_, F>, beta: F, c: &mut [F]) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: `Mat::new` checked each buffer holds rows*cols elements and the
    // strides above address exactly that row-major block; `c` holds m*n.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const LANES: usize = 8;

/// Sum with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn sum_lanes<F: Scalar>(xs: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] += c[i];
        }
    }
    let mut total = rest.iter().copied().sum::<F>();
    for a in acc {
        total += a;
    }
    total
}

#[inline]
pub fn dot_lanes<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<F>();
    for a in acc {
        total += a;
    }
    total
}

#[inline]
pub fn max_lanes<F: Scalar>(xs: &[F]) -> F {
    let mut acc = [F::neg_infinity(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    rest.iter()
        .chain(acc.iter())
        .copied()
        .fold(F::neg_infinity(), F::max)
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = max_lanes(row);
    row.iter_mut().for_each(|x| *x -= max);
    F::exp_in_place(row);
    let sum = sum_lanes(row);
    let inv = sum.recip();
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Softmax of a score row whose entries after `visible` are masked with
/// [`MASK_VALUE`]. Masked weights come out exactly zero, as `exp` of the
/// mask value underflows; only the visible prefix is exponentiated.
pub fn masked_softmax_in_place<F: Scalar>(row: &mut [F], visible: usize) {
    let (head, tail) = row.split_at_mut(visible);
    softmax_in_place(head);
    tail.iter_mut().for_each(|x| *x = F::zero());
}

/// `dx = y * (dy - <dy, y>)` for one softmax row.
pub fn softmax_backward_row<F: Scalar>(y: &[F], dy: &[F], dx: &mut [F]) {
    let dot = dot_lanes(y, dy);
    for ((dx, &y), &dy) in dx.iter_mut().zip(y).zip(dy) {
        *dx += y * (dy - dot);
    }
}

/// Log-sum-exp of one row, max-shifted.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = max_lanes(row);
    let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub struct LayerNormSaved<F> {
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

pub fn layer_norm_forward<F: Scalar>(
    x: &[F],
    gain: &[F],
    shift: &[F],
    eps: F,
    out: &mut [F],
) -> LayerNormSaved<F> {
    let d = gain.len();
    let rows = x.len() / d;
    let inv_d = F::of(1.0 / d as f64);
    let mut normalized = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = sum_lanes(xs) * inv_d;
        let centered = &mut out[r * d..(r + 1) * d];
        for (c, &v) in centered.iter_mut().zip(xs) {
            *c = v - mean;
        }
        let var = dot_lanes(centered, centered) * inv_d;
        let rstd = (var + eps).sqrt().recip();
        inv_std.push(rstd);
        let xhat = &mut normalized[r * d..(r + 1) * d];
        let ys = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = ys[j] * rstd;
            ys[j] = xhat[j] * gain[j] + shift[j];
        }
    }
    LayerNormSaved {
        normalized,
        inv_std,
    }
}

/// Accumulates input, gain and shift gradients of a layer norm.
pub fn layer_norm_backward<F: Scalar>(
    saved: &LayerNormSaved<F>,
    gain: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dgain: Option<&mut [F]>,
    dshift: Option<&mut [F]>,
) {
    let d = gain.len();
    let rows = dy.len() / d;
    let inv_d = F::of(1.0 / d as f64);
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * saved.normalized[r * d + j];
            }
        }
    }
    if let Some(db) = dshift {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxhat = vec![F::zero(); d];
        for r in 0..rows {
            let xhat = &saved.normalized[r * d..(r + 1) * d];
            let dys = &dy[r * d..(r + 1) * d];
            for j in 0..d {
                dxhat[j] = dys[j] * gain[j];
            }
            let mean_dxhat = sum_lanes(&dxhat) * inv_d;
            let mean_dxhat_xhat = dot_lanes(&dxhat, xhat) * inv_d;
            let rstd = saved.inv_std[r];
            let dxs = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                dxs[j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
    }
}

/// Geometry of a batch of independent attention heads. Keys and values are
/// `heads` slices of `seq x dim`; queries are `queries x dim` slices holding
/// the last `queries` positions, so query `i` sits at position
/// `seq - queries + i`.
#[derive(Debug, Clone, Copy)]
pub struct HeadDims {
    pub heads: usize,
    pub queries: usize,
    pub seq: usize,
    pub dim: usize,
}

impl HeadDims {
    /// Every position queries.
    pub fn full(heads: usize, seq: usize, dim: usize) -> Self {
        Self {
            heads,
            queries: seq,
            seq,
            dim,
        }
    }

    fn q_stride(&self) -> usize {
        self.queries * self.dim
    }

    fn kv_stride(&self) -> usize {
        self.seq * self.dim
    }

    fn prob_stride(&self) -> usize {
        self.queries * self.seq
    }
}

/// Causal attention forward. Returns the (post-softmax, pre-dropout)
/// attention weights `heads x queries x seq`. `keep`, when given, holds the
/// inverted-dropout multiplier per attention weight.
pub fn attention_forward<F: Scalar>(
    dims: HeadDims,
    q: &[F],
    k: &[F],
    v: &[F],
    scale: F,
    keep: Option<&[F]>,
    out: &mut [F],
) -> Vec<F> {
    let HeadDims {
        heads,
        queries,
        seq,
        dim,
    } = dims;
    let (sq, s, p) = (dims.q_stride(), dims.kv_stride(), dims.prob_stride());
    let offset = seq - queries;
    let mut probs = vec![F::zero(); heads * p];
    let mut dropped = keep.map(|_| vec![F::zero(); p]);
    for h in 0..heads {
        let qh = Mat::new(&q[h * sq..(h + 1) * sq], queries, dim);
        let kh = Mat::new(&k[h * s..(h + 1) * s], seq, dim);
        let vh = Mat::new(&v[h * s..(h + 1) * s], seq, dim);
        let ph = &mut probs[h * p..(h + 1) * p];
        gemm(qh, kh.t(), F::zero(), ph);
        for i in 0..queries {
            let visible = offset + i + 1;
            let row = &mut ph[i * seq..(i + 1) * seq];
            row[..visible].iter_mut().for_each(|x| *x *= scale);
            masked_softmax_in_place(row, visible);
        }
        let oh = &mut out[h * sq..(h + 1) * sq];
        match (keep, dropped.as_mut()) {
            (Some(keep), Some(buf)) => {
                let kh = &keep[h * p..(h + 1) * p];
                for ((b, &x), &m) in buf.iter_mut().zip(ph.iter()).zip(kh) {
                    *b = x * m;
                }
                gemm(Mat::new(buf, queries, seq), vh, F::zero(), oh);
            }
            _ => gemm(Mat::new(ph, queries, seq), vh, F::zero(), oh),
        }
    }
    probs
}

pub struct AttentionGrads<'a, F> {
    pub dq: Option<&'a mut [F]>,
    pub dk: Option<&'a mut [F]>,
    pub dv: Option<&'a mut [F]>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    dims: HeadDims,
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    scale: F,
    keep: Option<&[F]>,
    dout: &[F],
    grads: AttentionGrads<'_, F>,
) {
    let HeadDims {
        heads,
        queries,
        seq,
        dim,
    } = dims;
    let (sq, s, p) = (dims.q_stride(), dims.kv_stride(), dims.prob_stride());
    let AttentionGrads {
        mut dq,
        mut dk,
        mut dv,
    } = grads;
    let mut dprobs = vec![F::zero(); p];
    let mut dscores = vec![F::zero(); p];
    let mut dropped = keep.map(|_| vec![F::zero(); p]);
    for h in 0..heads {
        let qh = Mat::new(&q[h * sq..(h + 1) * sq], queries, dim);
        let kh = Mat::new(&k[h * s..(h + 1) * s], seq, dim);
        let vh = Mat::new(&v[h * s..(h + 1) * s], seq, dim);
        let ph = &probs[h * p..(h + 1) * p];
        let doh = Mat::new(&dout[h * sq..(h + 1) * sq], queries, dim);

        // Weights that actually multiplied v.
        let effective: &[F] = match (keep, dropped.as_mut()) {
            (Some(keep), Some(buf)) => {
                let kh = &keep[h * p..(h + 1) * p];
                for ((b, &x), &m) in buf.iter_mut().zip(ph).zip(kh) {
                    *b = x * m;
                }
                buf
            }
            _ => ph,
        };
        if let Some(dv) = dv.as_deref_mut() {
            gemm(
                Mat::new(effective, queries, seq).t(),
                doh,
                F::one(),
                &mut dv[h * s..(h + 1) * s],
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm(doh, vh.t(), F::zero(), &mut dprobs);
        if let Some(keep) = keep {
            for (d, &m) in dprobs.iter_mut().zip(&keep[h * p..(h + 1) * p]) {
                *d *= m;
            }
        }
        dscores.iter_mut().for_each(|x| *x = F::zero());
        for i in 0..queries {
            let r = i * seq..(i + 1) * seq;
            softmax_backward_row(&ph[r.clone()], &dprobs[r.clone()], &mut dscores[r]);
        }
        dscores.iter_mut().for_each(|x| *x *= scale);
        let ds = Mat::new(&dscores, queries, seq);
        if let Some(dq) = dq.as_deref_mut() {
            gemm(ds, kh, F::one(), &mut dq[h * sq..(h + 1) * sq]);
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(ds.t(), qh, F::one(), &mut dk[h * s..(h + 1) * s]);
        }
    }
}

/// Cosine/sine tables for rotary embeddings: `seq x dim/2` entries each,
/// angle `t * base^(-2i/dim)` for position `t` and pair `i`.
#[derive(Debug)]
pub struct RopeTable<F> {
    pub cos: Vec<F>,
    pub sin: Vec<F>,
    pub half: usize,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(seq: usize, dim: usize, base: f64) -> Self {
        let half = dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for t in 0..seq {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / dim as f64);
                let angle = t as f64 * freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates every `seq x dim` slice of `x` into `out` (accumulating when
    /// `accumulate`), row `t` of a slice by the angles of position
    /// `offset + t`. `inverse` rotates by the negated angle.
    pub fn apply(
        &self,
        x: &[F],
        out: &mut [F],
        seq: usize,
        offset: usize,
        inverse: bool,
        accumulate: bool,
    ) {
        let dim = self.half * 2;
        for (xs, os) in x
            .chunks_exact(seq * dim)
            .zip(out.chunks_exact_mut(seq * dim))
        {
            for t in 0..seq {
                let at = (offset + t) * self.half;
                for i in 0..self.half {
                    let (c, mut s) = (self.cos[at + i], self.sin[at + i]);
                    if inverse {
                        s = -s;
                    }
                    let a = t * dim + 2 * i;
                    let (x0, x1) = (xs[a], xs[a + 1]);
                    let (y0, y1) = (x0 * c - x1 * s, x0 * s + x1 * c);
                    if accumulate {
                        os[a] += y0;
                        os[a + 1] += y1;
                    } else {
                        os[a] = y0;
                        os[a + 1] = y1;
                    }
                }
            }
        }
    }
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value and enough saved state to run its backward rule. Node ids are
//! assigned in creation order, so inputs always precede their consumers and
//! replaying backward rules in reverse id order is a valid topological
//! sweep.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, AttentionGrads, HeadDims, LayerNormSaved, Mat, RopeTable};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<F: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        saved: LayerNormSaved<F>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    SplitHeads {
        x: Var,
        layout: HeadLayout,
    },
    MergeHeads {
        x: Var,
        layout: HeadLayout,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: HeadDims,
        scale: F,
        probs: Vec<F>,
        keep: Option<Vec<F>>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable<F>>,
        seq: usize,
        offset: usize,
    },
    Sum {
        x: Var,
    },
}

/// How a `[batch*seq, heads*dim]` activation maps onto `[batch*heads, seq, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl HeadLayout {
    /// Calls `f(flat_offset, split_offset)` for each contiguous run of
    /// `dim` elements.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize)) {
        let HeadLayout {
            batch,
            seq,
            heads,
            dim,
        } = *self;
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let flat = (b * seq + t) * heads * dim + h * dim;
                    let split = ((b * heads + h) * seq + t) * dim;
                    f(flat, split);
                }
            }
        }
    }
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
}

/// Inverted-dropout configuration for one forward pass.
pub enum Mode<'r, R: Rng> {
    Train(&'r mut R),
    Eval,
}

impl<R: Rng> Mode<'_, R> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Default)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as an input node.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: &[usize], value: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = *shape.last().expect("nonempty shape");
        (shape.iter().product::<usize>() / cols, cols)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(
            Mat::new(self.value(a), m, k),
            Mat::new(self.value(b), k, n),
            F::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    /// Adds a vector along the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            add_into(row, b);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }))
    }

    /// `x * w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity in eval
    /// mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, mode: &mut Mode<'_, R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("probability {p} not in [0, 1)"),
            ));
        }
        let rng = match mode {
            Mode::Train(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = dropout_mask(self.value(x).len(), p, rng);
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, keep }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }))
    }

    /// Row gather from a `[V, d]` table. Out-of-range ids are vocabulary
    /// errors.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be 2-D, got {shape:?}"),
            ));
        }
        let size = shape[0];
        if let Some(&id) = ids.iter().find(|&&id| id >= size) {
            return Err(Error::Vocab { id, size });
        }
        self.gather_rows(table, ids)
    }

    /// Selects rows of a matrix (trailing dimension = row width).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("row {r} out of {n}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        let saved = kernels::layer_norm_forward(
            self.value(x),
            self.value(gain),
            self.value(shift),
            F::of(eps),
            &mut out,
        );
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                saved,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, d) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(d).for_each(kernels::softmax_in_place);
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x })
    }

    /// Mean negative log-likelihood (nats) of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(&id) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Vocab { id, size: v });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            total += (lse - row[t]).as_f64();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = F::of(total / targets.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `[batch*seq, heads*dim] -> [batch*heads, seq, dim]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if rows != batch * seq || heads == 0 || cols % heads != 0 {
            return Err(Error::invalid(
                "split_heads",
                format!(
                    "{:?} cannot be split into batch {batch}, seq {seq}, {heads} heads",
                    self.shape(x)
                ),
            ));
        }
        let layout = HeadLayout {
            batch,
            seq,
            heads,
            dim: cols / heads,
        };
        let src = self.value(x);
        let d = layout.dim;
        let mut out = vec![F::zero(); src.len()];
        layout.for_each_run(|flat, split| {
            out[split..split + d].copy_from_slice(&src[flat..flat + d])
        });
        Ok(self.push(
            vec![batch * heads, seq, layout.dim],
            out,
            Op::SplitHeads { x, layout },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(Error::invalid(
                "merge_heads",
                format!(
                    "{shape:?} is not [batch*heads, seq, dim] for batch {batch}, {heads} heads"
                ),
            ));
        }
        let layout = HeadLayout {
            batch,
            seq: shape[1],
            heads,
            dim: shape[2],
        };
        let src = self.value(x);
        let d = layout.dim;
        let mut out = vec![F::zero(); src.len()];
        layout.for_each_run(|flat, split| {
            out[flat..flat + d].copy_from_slice(&src[split..split + d])
        });
        Ok(self.push(
            vec![batch * layout.seq, heads * layout.dim],
            out,
            Op::MergeHeads { x, layout },
        ))
    }

    /// Causal scaled dot-product attention over `[N, T, d]` stacks of heads.
    /// Position `t` attends to positions `0..=t`. `q` may hold only the last
    /// `Tq <= T` positions, `[N, Tq, d]`, giving an `[N, Tq, d]` output.
    /// `attn_dropout`, when positive and training, drops attention weights.
    pub fn causal_attention<R: Rng>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        attn_dropout: f64,
        mode: &mut Mode<'_, R>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let kv_shape = self.shape(k).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid(
                "causal_attention",
                format!("q must be 3-D, got {shape:?}"),
            ));
        }
        if self.shape(v) != kv_shape.as_slice() {
            return Err(Error::shape("causal_attention", &kv_shape, self.shape(v)));
        }
        if kv_shape.len() != 3
            || kv_shape[0] != shape[0]
            || kv_shape[2] != shape[2]
            || kv_shape[1] < shape[1]
        {
            return Err(Error::shape("causal_attention", &shape, &kv_shape));
        }
        if !(0.0..1.0).contains(&attn_dropout) {
            return Err(Error::invalid(
                "causal_attention",
                format!("dropout probability {attn_dropout} not in [0, 1)"),
            ));
        }
        let dims = HeadDims {
            heads: shape[0],
            queries: shape[1],
            seq: kv_shape[1],
            dim: shape[2],
        };
        let keep = match mode {
            Mode::Train(rng) if attn_dropout > 0.0 => Some(dropout_mask(
                dims.heads * dims.queries * dims.seq,
                attn_dropout,
                rng,
            )),
            _ => None,
        };
        let scale = F::of(scale);
        let mut out = vec![F::zero(); self.value(q).len()];
        let probs = kernels::attention_forward(
            dims,
            self.value(q),
            self.value(k),
            self.value(v),
            scale,
            keep.as_deref(),
            &mut out,
        );
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
                keep,
            },
        ))
    }

    /// Rotary position embedding over `[N, T, d]` with `d` even.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<F>>) -> Result<Var> {
        self.rope_at(x, table, 0)
    }

    /// [`Tape::rope`] for rows holding positions `offset..offset + T`.
    pub fn rope_at(&mut self, x: Var, table: Arc<RopeTable<F>>, offset: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid(
                "rope",
                format!("input must be 3-D, got {shape:?}"),
            ));
        }
        let (seq, dim) = (shape[1], shape[2]);
        if dim % 2 != 0 {
            return Err(Error::invalid(
                "rope",
                format!("head dimension {dim} is odd"),
            ));
        }
        if table.half * 2 != dim || table.cos.len() < (offset + seq) * table.half {
            return Err(Error::invalid(
                "rope",
                format!("rotation table does not cover seq {seq}, dim {dim}"),
            ));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        table.apply(self.value(x), &mut out, seq, offset, false, false);
        Ok(self.push(
            shape,
            out,
            Op::Rope {
                x,
                table,
                seq,
                offset,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    /// Back-propagates from a scalar node, replacing any gradients left by a
    /// previous call on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: &[F]) {
        // Backward rules read saved values through `nodes` and write into
        // `grads`; the two are disjoint fields so both borrows can coexist.
        let Tape { nodes, grads } = self;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let gm = Mat::new(g, m, n);
                kernels::gemm(
                    gm,
                    Mat::new(&nodes[b.0].value, k, n).t(),
                    F::one(),
                    grad_buf(grads, nodes, *a),
                );
                kernels::gemm(
                    Mat::new(&nodes[a.0].value, m, k).t(),
                    gm,
                    F::one(),
                    grad_buf(grads, nodes, *b),
                );
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, *x, g);
                let db = grad_buf(grads, nodes, *bias);
                let d = db.len();
                for row in g.chunks_exact(d) {
                    add_into(db, row);
                }
            }
            Op::Relu { x } => {
                let xs = &nodes[x.0].value;
                let masked = g
                    .iter()
                    .zip(xs)
                    .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() });
                accumulate_iter(grads, *x, masked);
            }
            Op::Dropout { x, keep } => {
                accumulate_iter(grads, *x, g.iter().zip(keep).map(|(&gi, &m)| gi * m));
            }
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Gather { x, rows } => {
                let d = *nodes[x.0].shape.last().unwrap();
                let dx = grad_buf(grads, nodes, *x);
                for (row, &r) in g.chunks_exact(d).zip(rows) {
                    add_into(&mut dx[r * d..(r + 1) * d], row);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                saved,
            } => {
                let gv = &nodes[gain.0].value;
                let (gx, gg, gs) = disjoint3(grads, nodes, *x, *gain, *shift);
                kernels::layer_norm_backward(saved, gv, g, Some(gx), Some(gg), Some(gs));
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let d = *node.shape.last().unwrap();
                let dx = grad_buf(grads, nodes, *x);
                for ((yr, gr), dr) in y
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    kernels::softmax_backward_row(yr, gr, dr);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / F::of(targets.len() as f64);
                let dl = grad_buf(grads, nodes, *logits);
                for ((dr, pr), &t) in dl
                    .chunks_exact_mut(v)
                    .zip(probs.chunks_exact(v))
                    .zip(targets)
                {
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d += p * scale;
                    }
                    dr[t] -= scale;
                }
            }
            Op::SplitHeads { x, layout } => {
                let d = layout.dim;
                let dx = grad_buf(grads, nodes, *x);
                layout.for_each_run(|flat, split| {
                    add_into(&mut dx[flat..flat + d], &g[split..split + d])
                });
            }
            Op::MergeHeads { x, layout } => {
                let d = layout.dim;
                let dx = grad_buf(grads, nodes, *x);
                layout.for_each_run(|flat, split| {
                    add_into(&mut dx[split..split + d], &g[flat..flat + d])
                });
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
                keep,
            } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                if q == k || k == v || q == v {
                    // Shared inputs: route through scratch buffers.
                    let (mut dq, mut dk, mut dv) = (
                        vec![F::zero(); qv.len()],
                        vec![F::zero(); kv.len()],
                        vec![F::zero(); vv.len()],
                    );
                    kernels::attention_backward(
                        *dims,
                        qv,
                        kv,
                        vv,
                        probs,
                        *scale,
                        keep.as_deref(),
                        g,
                        AttentionGrads {
                            dq: Some(&mut dq),
                            dk: Some(&mut dk),
                            dv: Some(&mut dv),
                        },
                    );
                    add_into(grad_buf(grads, nodes, *q), &dq);
                    add_into(grad_buf(grads, nodes, *k), &dk);
                    add_into(grad_buf(grads, nodes, *v), &dv);
                } else {
                    let (dq, dk, dv) = disjoint3(grads, nodes, *q, *k, *v);
                    kernels::attention_backward(
                        *dims,
                        qv,
                        kv,
                        vv,
                        probs,
                        *scale,
                        keep.as_deref(),
                        g,
                        AttentionGrads {
                            dq: Some(dq),
                            dk: Some(dk),
                            dv: Some(dv),
                        },
                    );
                }
            }
            Op::Rope {
                x,
                table,
                seq,
                offset,
            } => {
                table.apply(g, grad_buf(grads, nodes, *x), *seq, *offset, true, true);
            }
            Op::Sum { x } => {
                let s = g[0];
                grad_buf(grads, nodes, *x).iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

fn grad_buf<'g, F: Scalar>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> &'g mut [F] {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

/// Adds `src` into the gradient of `v`, taking a copy when it has none yet.
fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, src: &[F]) {
    match &mut grads[v.0] {
        Some(dst) => add_into(dst, src),
        slot @ None => *slot = Some(src.to_vec()),
    }
}

fn accumulate_iter<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, src: impl Iterator<Item = F>) {
    match &mut grads[v.0] {
        Some(dst) => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        slot @ None => *slot = Some(src.collect()),
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-element keep multipliers: zero with probability `p`, else `1/(1-p)`.
/// A uniform `u32` below `p * 2^32` marks a dropped element.
fn dropout_mask<F: Scalar, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<F> {
    let scale = F::of(1.0 / (1.0 - p));
    let threshold = (p * 4_294_967_296.0).round() as u64;
    (0..n)
        .map(|_| {
            if u64::from(rng.next_u32()) < threshold {
                F::zero()
            } else {
                scale
            }
        })
        .collect()
}

/// Three distinct gradient buffers at once, allocating as needed.
fn disjoint3<'g, F: Scalar>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    c: Var,
) -> (&'g mut [F], &'g mut [F], &'g mut [F]) {
    assert!(
        a != b && b != c && a != c,
        "disjoint3 requires distinct nodes"
    );
    for v in [a, b, c] {
        let n = nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
    }
    let [ga, gb, gc] = grads
        .get_disjoint_mut([a.0, b.0, c.0])
        .expect("indices are distinct and in bounds");
    (
        ga.as_deref_mut().unwrap(),
        gb.as_deref_mut().unwrap(),
        gc.as_deref_mut().unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    type Eval<'a> = Mode<'a, ChaCha8Rng>;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf_from(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::<f64>::new();
        let i = leaf(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let m = leaf(&mut tape, &[2, 2], &[1., 2., 3., 4.]);
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);

        let p = leaf(&mut tape, &[2, 2], &[1., 0., 0., 0.]);
        let c = leaf(&mut tape, &[2, 1], &[5., 7.]);
        let y = tape.matmul(p, c).unwrap();
        assert_eq!(tape.value(y), &[5., 0.]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
            "{msg}"
        );
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let table = leaf(&mut tape, &[2, 2], &[1., 1., 2., 2.]);
        let y = tape.embedding(table, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(y), &[2., 2., 1., 1., 2., 2.]);

        let y = tape.embedding(table, &[0, 0, 0]).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[3., 3., 0., 0.]);

        match tape.embedding(table, &[0, 2]) {
            Err(Error::Vocab { id: 2, size: 2 }) => {}
            other => panic!(
                "expected vocabulary error, got {other:?}",
                other = other.map(|_| ())
            ),
        }
    }

    #[test]
    fn relu_flatten_and_bias() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[-1., 0., 2.]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0., 0., 2.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.]);

        let x = leaf(&mut tape, &[2, 2], &[0., 0., 2., 2.]);
        let b = leaf(&mut tape, &[2], &[1., 1.]);
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y), &[1., 1., 3., 3.]);

        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let x = leaf(&mut tape, &[3, 2], &data);
        let flat = tape.reshape(x, &[6]).unwrap();
        for t in 0..3 {
            for j in 0..2 {
                assert_eq!(tape.value(flat)[t * 2 + j], data[t * 2 + j]);
            }
        }
        assert!(tape.reshape(x, &[4]).is_err());
        assert!(tape.add_bias(x, b).is_ok());
        let bad = leaf(&mut tape, &[3], &[0., 0., 0.]);
        assert!(tape.add_bias(x, bad).is_err());
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let g = leaf(&mut tape, &[2], &[1., 1.]);
        let b = leaf(&mut tape, &[2], &[0., 0.]);
        let x = leaf(&mut tape, &[2, 2], &[3., 3., 1., -1.]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        assert_eq!(&out[..2], &[0., 0.]);
        assert!((out[2] - 1.0).abs() < 1e-4 && (out[3] + 1.0).abs() < 1e-4);

        let g3 = leaf(&mut tape, &[3], &[1., 1., 1.]);
        assert!(tape.layer_norm(x, g3, b, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let logits = leaf(&mut tape, &[1, 65], &[0.0; 65]);
        let l = tape.cross_entropy(logits, &[7]).unwrap();
        assert!((tape.value(l)[0] - 65f64.ln()).abs() < 1e-12);
        assert!((tape.value(l)[0] - 4.1744).abs() < 1e-4);

        let mut t32 = Tape::<f32>::new();
        let logits = t32.leaf_from(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let l = t32.cross_entropy(logits, &[0]).unwrap();
        assert!(t32.value(l)[0].is_finite() && t32.value(l)[0].abs() < 1e-6);
        t32.backward(l).unwrap();
        assert!(t32.grad(logits).unwrap().iter().all(|g| g.is_finite()));

        let small = logits_for(&mut tape);
        assert!(matches!(
            tape.cross_entropy(small, &[3]),
            Err(Error::Vocab { id: 3, size: 3 })
        ));
    }

    fn logits_for(tape: &mut Tape<f64>) -> Var {
        leaf(tape, &[1, 3], &[0.1, 0.2, 0.3])
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[4], &[1., 2., 3., 4.]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(x, 0.0, &mut Mode::Train(&mut rng)).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);
        let y = tape.dropout(x, 0.5, &mut Eval::Eval).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);
        assert!(tape.dropout(x, 1.0, &mut Eval::Eval).is_err());
        assert!(tape.dropout(x, -0.1, &mut Eval::Eval).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let x = leaf(&mut tape, &[n], &data);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = tape.dropout(x, 0.1, &mut Mode::Train(&mut rng)).unwrap();
        let out = tape.value(y);
        let zero_frac = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zero_frac - 0.1).abs() <= 0.01, "zero fraction {zero_frac}");
        let mean_in = data.iter().sum::<f64>() / n as f64;
        let mean_out = out.iter().sum::<f64>() / n as f64;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);
    }

    #[test]
    fn attention_single_position_and_uniform_keys() {
        let mut tape = Tape::<f64>::new();
        let q = leaf(&mut tape, &[1, 1, 2], &[0.3, -0.2]);
        let k = leaf(&mut tape, &[1, 1, 2], &[1.5, 0.7]);
        let v = leaf(&mut tape, &[1, 1, 2], &[4., 5.]);
        let y = tape
            .causal_attention(q, k, v, 0.5f64.sqrt(), 0.0, &mut Eval::Eval)
            .unwrap();
        assert_eq!(tape.value(y), &[4., 5.]);

        // Identical keys: row t averages v rows 0..=t.
        let q = leaf(&mut tape, &[1, 3, 1], &[1., -2., 3.]);
        let k = leaf(&mut tape, &[1, 3, 1], &[0.5, 0.5, 0.5]);
        let v = leaf(&mut tape, &[1, 3, 1], &[3., 6., 9.]);
        let y = tape
            .causal_attention(q, k, v, 1.0, 0.0, &mut Eval::Eval)
            .unwrap();
        let out = tape.value(y);
        for (got, want) in out.iter().zip([3.0, 4.5, 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = leaf(&mut tape, &[6, 4], &data); // batch 2, seq 3, 2 heads of 2
        let s = tape.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // head 1 of batch 0, position 2 = row 2, cols 2..4
        assert_eq!(&tape.value(s)[(3 + 2) * 2..(3 + 2) * 2 + 2], &[10., 11.]);
        let m = tape.merge_heads(s, 2, 2).unwrap();
        assert_eq!(tape.value(m), data.as_slice());
        assert!(tape.split_heads(x, 2, 3, 3).is_err());
    }

    #[test]
    fn rope_rejects_odd_dimension() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 2, 3], &[0.; 6]);
        let table = Arc::new(RopeTable::new(2, 3, 10000.0));
        assert!(tape.rope(x, table).is_err());
    }

    #[test]
    fn backward_on_sum_and_unused_params() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 2], &[1., 2., 3., 4.]);
        let unused = leaf(&mut tape, &[3], &[1., 1., 1.]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1., 1.]);
        assert!(tape.grad(unused).is_none());
        assert!(tape.backward(x).is_err());
    }
}

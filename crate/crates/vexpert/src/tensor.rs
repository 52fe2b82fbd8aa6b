//! Dense f64 tensors with reverse-mode autodiff on a linear tape.
//!
//! Tensors are immutable values after creation except for their gradient
//! slot. All graph operations are recorded on a [`Tape`]; one backward
//! traversal visits each recorded operation exactly once, in reverse order.
//! A tape and its tensors stay on one thread for the duration of a step;
//! tensors themselves are cheap to clone (shared storage) and may move
//! between threads.
//!
//! Masking convention: `-inf` is the additive masking sentinel and is a
//! legal value on the wire into `add`/`softmax_lastdim`. `NaN` and `+inf`
//! are rejected by every operation.

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked (all -inf): degenerate attention")]
    DegenerateAttention { row: usize },
    #[error("{op} produced a non-finite value (NaN or +inf)")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("token id {id} out of vocabulary range {vocab}")]
    VocabRange { id: usize, vocab: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. `data.len() == shape.iter().product()`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape product and rejecting NaN/+inf.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                expected: format!("{numel} elements for shape"),
                got: vec![data.len()],
            });
        }
        check_values("Tensor::new", &data)?;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor that may hold `-inf` entries (attention mask sentinel).
    pub fn new_masked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                op: "Tensor::new_masked",
                expected: format!("{numel} elements for shape"),
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TensorError::NonFinite {
                op: "Tensor::new_masked",
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v]).expect("finite scalar")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable access to the underlying values (copy-on-write if shared).
    /// Used by the optimizer between steps, when no tape holds the data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }
}

fn check_values(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        Err(TensorError::NonFinite { op })
    } else {
        Ok(())
    }
}

/// Index of a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Recorded operation: inputs by id, backward rule by variant.
#[derive(Debug)]
enum Op {
    /// out = a @ b (trans_b: b is [.., n, k] and used transposed)
    Matmul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    /// out = a + b; b may have leading dim 1 broadcast over a's leading dim
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Silu { x: TensorId },
    RmsNorm {
        x: TensorId,
        gain: TensorId,
        eps: f64,
    },
    SoftmaxLast { x: TensorId },
    ConcatRows { a: TensorId, b: TensorId },
    SliceRows {
        x: TensorId,
        from: usize,
        to: usize,
    },
    Embed {
        table: TensorId,
        ids: Arc<Vec<usize>>,
    },
    SplitHeads { x: TensorId, heads: usize },
    MergeHeads { x: TensorId },
    Rope {
        x: TensorId,
        positions: Arc<Vec<usize>>,
        theta: f64,
    },
    Sum { x: TensorId },
    CrossEntropy { logits: TensorId, target: usize },
    MaskedCeSum {
        logits: TensorId,
        targets: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    },
    /// Test fixture: silu forward with a deliberately wrong backward rule.
    #[cfg(test)]
    SiluWrongGrad { x: TensorId },
}

struct Step {
    op: Op,
    out: TensorId,
}

/// Linear tape of recorded operations in topological order.
pub struct Tape {
    nodes: Vec<Tensor>,
    steps: Vec<Step>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Register a leaf tensor (shares its storage; no copy).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape: t.shape.clone(),
            data: t.share_data(),
            requires_grad: t.requires_grad,
            grad: None,
        });
        id
    }

    /// Register an owned constant (requires_grad = false).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            grad: None,
            requires_grad: false,
            ..t
        });
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    /// Copy a node out of the graph as a plain tensor (no grad tracking).
    pub fn detach(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.share_data(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        record: Option<Op>,
    ) -> Result<TensorId> {
        check_values(op, &data)?;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: None,
        });
        if requires_grad {
            if let Some(op) = record {
                self.steps.push(Step { op, out: id });
            }
        }
        Ok(id)
    }

    /// Output tolerating `-inf` entries (mask arithmetic).
    fn push_masked(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        record: Option<Op>,
    ) -> Result<TensorId> {
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TensorError::NonFinite { op });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: None,
        });
        if requires_grad {
            if let Some(op) = record {
                self.steps.push(Step { op, out: id });
            }
        }
        Ok(id)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]`.
    /// Leading batch dims must match or be 1.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// `[.., m, k] @ [.., n, k]^T -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatDims::resolve("matmul", &ash, &bsh, trans_b)?;
        let mut out = vec![0.0; dims.batch_out * dims.m * dims.n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..dims.batch_out {
            let ao = dims.a_offset(bi);
            let bo = dims.b_offset(bi);
            let co = bi * dims.m * dims.n;
            if trans_b {
                matmul_nt_slice(
                    &ad[ao..ao + dims.m * dims.k],
                    &bd[bo..bo + dims.n * dims.k],
                    &mut out[co..co + dims.m * dims.n],
                    dims.m,
                    dims.k,
                    dims.n,
                );
            } else {
                matmul_slice(
                    &ad[ao..ao + dims.m * dims.k],
                    &bd[bo..bo + dims.k * dims.n],
                    &mut out[co..co + dims.m * dims.n],
                    dims.m,
                    dims.k,
                    dims.n,
                );
            }
        }
        let rg = self.needs(&[a, b]);
        self.push(
            "matmul",
            dims.out_shape(),
            out,
            rg,
            Some(Op::Matmul { a, b, trans_b }),
        )
    }

    /// Elementwise add. `b` may carry a leading dim of 1 broadcast over
    /// `a`'s leading dim (used for attention masks).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mode = broadcast_mode("add", &ash, &bsh)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = match mode {
            Broadcast::Same => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            Broadcast::RhsChunk { chunk } => {
                let mut v = Vec::with_capacity(ad.len());
                for (i, x) in ad.iter().enumerate() {
                    v.push(x + bd[i % chunk]);
                }
                v
            }
        };
        let rg = self.needs(&[a, b]);
        self.push_masked("add", ash, out, rg, Some(Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash != bsh {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: ash,
                rhs: bsh,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs(&[a, b]);
        self.push("sub", ash, out, rg, Some(Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash != bsh {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(&[a, b]);
        self.push("mul", ash, out, rg, Some(Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.needs(&[x]);
        self.push("scale", sh, out, rg, Some(Op::Scale { x, c }))
    }

    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.needs(&[x]);
        self.push("silu", sh, out, rg, Some(Op::Silu { x }))
    }

    /// Normalize the last dim by 1/sqrt(mean(x^2)+eps), then multiply by gain.
    pub fn rmsnorm(&mut self, x: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or(TensorError::BadShape {
            op: "rmsnorm",
            expected: "rank >= 1".into(),
            got: sh.clone(),
        })?;
        let gsh = self.shape(gain).to_vec();
        if gsh != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: sh,
                rhs: gsh,
            });
        }
        let (xd, gd) = (self.data(x), self.data(gain));
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, v), g) in orow.iter_mut().zip(row).zip(gd) {
                *o = v * inv * g;
            }
        }
        let rg = self.needs(&[x, gain]);
        self.push("rmsnorm", sh, out, rg, Some(Op::RmsNorm { x, gain, eps }))
    }

    /// Row-wise softmax over the last dim with max-subtraction.
    /// `-inf` entries produce exactly 0; a fully `-inf` row is an error.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or(TensorError::BadShape {
            op: "softmax_lastdim",
            expected: "rank >= 1".into(),
            got: sh.clone(),
        })?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (r, (row, orow)) in xd
            .chunks_exact(d)
            .zip(out.chunks_exact_mut(d))
            .enumerate()
        {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateAttention { row: r });
            }
            let mut z = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                // exp(-inf - m) == 0 exactly
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.needs(&[x]);
        self.push("softmax_lastdim", sh, out, rg, Some(Op::SoftmaxLast { x }))
    }

    /// Concatenate along the first dim; trailing dims must match.
    pub fn concat_seq(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != bsh.len() || ash.is_empty() || ash[1..] != bsh[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_seq",
                lhs: ash,
                rhs: bsh,
            });
        }
        let mut sh = ash.clone();
        sh[0] = ash[0] + bsh[0];
        let mut out = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let rg = self.needs(&[a, b]);
        self.push_masked("concat_seq", sh, out, rg, Some(Op::ConcatRows { a, b }))
    }

    /// Split along the first dim at `at`, returning (x[..at], x[at..]).
    pub fn split_seq(&mut self, x: TensorId, at: usize) -> Result<(TensorId, TensorId)> {
        let rows = self.shape(x).first().copied().unwrap_or(0);
        if at > rows {
            return Err(TensorError::BadShape {
                op: "split_seq",
                expected: format!("split index <= {rows}"),
                got: vec![at],
            });
        }
        let head = self.slice_rows(x, 0, at)?;
        let tail = self.slice_rows(x, at, rows)?;
        Ok((head, tail))
    }

    /// Rows `from..to` along the first dim.
    pub fn slice_rows(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let rows = *sh.first().ok_or(TensorError::BadShape {
            op: "slice_rows",
            expected: "rank >= 1".into(),
            got: sh.clone(),
        })?;
        if from > to || to > rows {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: format!("0 <= from <= to <= {rows}"),
                got: vec![from, to],
            });
        }
        let stride: usize = sh[1..].iter().product();
        let mut osh = sh.clone();
        osh[0] = to - from;
        let out = self.data(x)[from * stride..to * stride].to_vec();
        let rg = self.needs(&[x]);
        self.push_masked(
            "slice_rows",
            osh,
            out,
            rg,
            Some(Op::SliceRows { x, from, to }),
        )
    }

    /// Gather rows of `table` by token id: `[V, D] x ids -> [len, D]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embed",
                expected: "rank-2 table".into(),
                got: tsh,
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::VocabRange { id, vocab: v });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        self.push(
            "embed",
            vec![ids.len(), d],
            out,
            rg,
            Some(Op::Embed {
                table,
                ids: Arc::new(ids.to_vec()),
            }),
        )
    }

    /// `[L, H*hd] -> [H, L, hd]`.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 || heads == 0 || sh[1] % heads != 0 {
            return Err(TensorError::BadShape {
                op: "split_heads",
                expected: format!("[L, D] with D divisible by {heads}"),
                got: sh,
            });
        }
        let (l, d) = (sh[0], sh[1]);
        let hd = d / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for h in 0..heads {
            for r in 0..l {
                let src = r * d + h * hd;
                let dst = (h * l + r) * hd;
                out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            "split_heads",
            vec![heads, l, hd],
            out,
            rg,
            Some(Op::SplitHeads { x, heads }),
        )
    }

    /// `[H, L, hd] -> [L, H*hd]`.
    pub fn merge_heads(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 {
            return Err(TensorError::BadShape {
                op: "merge_heads",
                expected: "[H, L, hd]".into(),
                got: sh,
            });
        }
        let (h, l, hd) = (sh[0], sh[1], sh[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for hi in 0..h {
            for r in 0..l {
                let src = (hi * l + r) * hd;
                let dst = r * h * hd + hi * hd;
                out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            "merge_heads",
            vec![l, h * hd],
            out,
            rg,
            Some(Op::MergeHeads { x }),
        )
    }

    /// Rotary embedding on `[H, L, hd]`: rotate each (even, odd) pair of the
    /// last dim by `positions[l] * theta^(-2i/hd)`. Position 0 is identity.
    pub fn rope(&mut self, x: TensorId, positions: &[usize], theta: f64) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[2] % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "rope",
                expected: "[H, L, hd] with even hd".into(),
                got: sh,
            });
        }
        if positions.len() != sh[1] {
            return Err(TensorError::BadShape {
                op: "rope",
                expected: format!("{} positions", sh[1]),
                got: vec![positions.len()],
            });
        }
        let (h, l, hd) = (sh[0], sh[1], sh[2]);
        let table = rope_table(positions, hd, theta);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for hi in 0..h {
            for r in 0..l {
                let base = (hi * l + r) * hd;
                let trow = &table[r * hd..(r + 1) * hd];
                for p in 0..hd / 2 {
                    let (c, s) = (trow[2 * p], trow[2 * p + 1]);
                    let (a, b) = (xd[base + 2 * p], xd[base + 2 * p + 1]);
                    out[base + 2 * p] = a * c - b * s;
                    out[base + 2 * p + 1] = a * s + b * c;
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            "rope",
            sh,
            out,
            rg,
            Some(Op::Rope {
                x,
                positions: Arc::new(positions.to_vec()),
                theta,
            }),
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.needs(&[x]);
        self.push("sum", vec![], vec![s], rg, Some(Op::Sum { x }))
    }

    /// Cross-entropy of a single logits row `[V]` against `target`.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 1 {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "[V] logits row".into(),
                got: sh,
            });
        }
        if target >= sh[0] {
            return Err(TensorError::VocabRange {
                id: target,
                vocab: sh[0],
            });
        }
        let row = self.data(logits);
        let loss = log_sum_exp(row) - row[target];
        let rg = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            rg,
            Some(Op::CrossEntropy { logits, target }),
        )
    }

    /// Sum of per-position cross-entropies over masked positions of
    /// `[L, V]` logits. Targets at unmasked positions are never read.
    /// Returns the scalar node and the number of masked positions.
    pub fn masked_ce_sum(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(TensorId, usize)> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || targets.len() != sh[0] || mask.len() != sh[0] {
            return Err(TensorError::BadShape {
                op: "masked_ce_sum",
                expected: format!("[L, V] logits with {} targets/mask entries", sh[0]),
                got: sh,
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let v = sh[1];
        let ld = self.data(logits);
        let mut total = 0.0;
        for (r, on) in mask.iter().enumerate() {
            if !*on {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::VocabRange { id: t, vocab: v });
            }
            let row = &ld[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[t];
        }
        let rg = self.needs(&[logits]);
        let id = self.push(
            "masked_ce_sum",
            vec![],
            vec![total],
            rg,
            Some(Op::MaskedCeSum {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
            }),
        )?;
        Ok((id, count))
    }

    #[cfg(test)]
    pub(crate) fn silu_wrong_grad(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.needs(&[x]);
        self.push("silu_wrong_grad", sh, out, rg, Some(Op::SiluWrongGrad { x }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss, seeding its gradient with 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse pass with an explicit seed on the scalar loss. Populates the
    /// gradient slot of every `requires_grad` node reached from the loss;
    /// nodes with `requires_grad = false` are never touched.
    pub fn backward_seeded(&mut self, loss: TensorId, seed: f64) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for si in (0..self.steps.len()).rev() {
            let out = self.steps[si].out;
            let Some(gout) = grads[out.0].take() else {
                continue;
            };
            self.backprop_step(si, &gout, &mut grads);
            // Re-install: `out` may itself be a leaf-like node read later.
            grads[out.0] = Some(gout);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    node.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].numel()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    fn backprop_step(&self, si: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.steps[si].op {
            Op::Matmul { a, b, trans_b } => {
                let dims =
                    MatDims::resolve("matmul", self.shape(*a), self.shape(*b), *trans_b).unwrap();
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, |ga| {
                        for bi in 0..dims.batch_out {
                            let go = &gout[bi * m * n..(bi + 1) * m * n];
                            let bo = dims.b_offset(bi);
                            let ga = &mut ga[dims.a_offset(bi)..dims.a_offset(bi) + m * k];
                            if *trans_b {
                                // dA = dC @ B  (B is [n, k])
                                matmul_acc(go, &bd[bo..bo + n * k], ga, m, n, k);
                            } else {
                                // dA = dC @ B^T (B is [k, n])
                                matmul_nt_acc(go, &bd[bo..bo + k * n], ga, m, n, k);
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, |gb| {
                        for bi in 0..dims.batch_out {
                            let go = &gout[bi * m * n..(bi + 1) * m * n];
                            let ao = dims.a_offset(bi);
                            let a_sl = &ad[ao..ao + m * k];
                            let gb = &mut gb[dims.b_offset(bi)..dims.b_offset(bi) + n * k];
                            if *trans_b {
                                // dB = dC^T @ A: dB[j, p] += sum_i go[i, j] * a[i, p]
                                for i in 0..m {
                                    let arow = &a_sl[i * k..(i + 1) * k];
                                    let grow = &go[i * n..(i + 1) * n];
                                    for (j, gj) in grow.iter().enumerate() {
                                        axpy(*gj, arow, &mut gb[j * k..(j + 1) * k]);
                                    }
                                }
                            } else {
                                // dB = A^T @ dC: dB[p, j] += sum_i a[i, p] * go[i, j]
                                for i in 0..m {
                                    let arow = &a_sl[i * k..(i + 1) * k];
                                    let grow = &go[i * n..(i + 1) * n];
                                    for (p, ap) in arow.iter().enumerate() {
                                        axpy(*ap, grow, &mut gb[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
                let blen = self.nodes[b.0].numel();
                self.accumulate(grads, *b, |gb| {
                    for (i, go) in gout.iter().enumerate() {
                        gb[i % blen] += go;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g -= go;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((g, go), y) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += go * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((g, go), x) in gb.iter_mut().zip(gout).zip(ad) {
                        *g += go * x;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, |gx| {
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g += go * c;
                    }
                });
            }
            Op::Silu { x } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((g, go), &v) in gx.iter_mut().zip(gout).zip(xd) {
                        let s = sigmoid(v);
                        *g += go * (s + v * s * (1.0 - s));
                    }
                });
            }
            #[cfg(test)]
            Op::SiluWrongGrad { x } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((g, go), &v) in gx.iter_mut().zip(gout).zip(xd) {
                        *g += go * sigmoid(v); // missing the v*s*(1-s) term
                    }
                });
            }
            Op::RmsNorm { x, gain, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let (xd, gd) = (self.data(*x), self.data(*gain));
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, |gx| {
                        for (r, row) in xd.chunks_exact(d).enumerate() {
                            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                            let inv = 1.0 / (ms + eps).sqrt();
                            let gorow = &gout[r * d..(r + 1) * d];
                            let mut dot = 0.0;
                            for ((go, g), v) in gorow.iter().zip(gd).zip(row) {
                                dot += go * g * v;
                            }
                            let k = inv * inv * inv / d as f64 * dot;
                            let gxrow = &mut gx[r * d..(r + 1) * d];
                            for ((gx, (go, g)), v) in
                                gxrow.iter_mut().zip(gorow.iter().zip(gd)).zip(row)
                            {
                                *gx += go * g * inv - k * v;
                            }
                        }
                    });
                }
                if self.nodes[gain.0].requires_grad {
                    self.accumulate(grads, *gain, |gg| {
                        for (r, row) in xd.chunks_exact(d).enumerate() {
                            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                            let inv = 1.0 / (ms + eps).sqrt();
                            let gorow = &gout[r * d..(r + 1) * d];
                            for ((gg, go), v) in gg.iter_mut().zip(gorow).zip(row) {
                                *gg += go * v * inv;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxLast { x } => {
                let d = *self.shape(*x).last().unwrap();
                let out = self.data(self.steps[si].out);
                self.accumulate(grads, *x, |gx| {
                    for (r, yrow) in out.chunks_exact(d).enumerate() {
                        let gorow = &gout[r * d..(r + 1) * d];
                        let dot: f64 = gorow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        let gxrow = &mut gx[r * d..(r + 1) * d];
                        for ((gx, go), y) in gxrow.iter_mut().zip(gorow).zip(yrow) {
                            *gx += y * (go - dot);
                        }
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let alen = self.nodes[a.0].numel();
                self.accumulate(grads, *a, |ga| {
                    for (g, go) in ga.iter_mut().zip(&gout[..alen]) {
                        *g += go;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (g, go) in gb.iter_mut().zip(&gout[alen..]) {
                        *g += go;
                    }
                });
            }
            Op::SliceRows { x, from, to: _ } => {
                let stride: usize = self.shape(*x)[1..].iter().product();
                let off = from * stride;
                self.accumulate(grads, *x, |gx| {
                    for (g, go) in gx[off..off + gout.len()].iter_mut().zip(gout) {
                        *g += go;
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &gout[r * d..(r + 1) * d];
                        for (g, go) in gt[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *g += go;
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let sh = self.shape(*x);
                let (l, d) = (sh[0], sh[1]);
                let hd = d / heads;
                self.accumulate(grads, *x, |gx| {
                    for h in 0..*heads {
                        for r in 0..l {
                            let src = (h * l + r) * hd;
                            let dst = r * d + h * hd;
                            for (g, go) in
                                gx[dst..dst + hd].iter_mut().zip(&gout[src..src + hd])
                            {
                                *g += go;
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x } => {
                let sh = self.shape(*x);
                let (h, l, hd) = (sh[0], sh[1], sh[2]);
                self.accumulate(grads, *x, |gx| {
                    for hi in 0..h {
                        for r in 0..l {
                            let dst = (hi * l + r) * hd;
                            let src = r * h * hd + hi * hd;
                            for (g, go) in
                                gx[dst..dst + hd].iter_mut().zip(&gout[src..src + hd])
                            {
                                *g += go;
                            }
                        }
                    }
                });
            }
            Op::Rope { x, positions, theta } => {
                let sh = self.shape(*x);
                let (h, l, hd) = (sh[0], sh[1], sh[2]);
                let table = rope_table(positions, hd, *theta);
                self.accumulate(grads, *x, |gx| {
                    for hi in 0..h {
                        for r in 0..l {
                            let base = (hi * l + r) * hd;
                            let trow = &table[r * hd..(r + 1) * hd];
                            for p in 0..hd / 2 {
                                let (c, s) = (trow[2 * p], trow[2 * p + 1]);
                                let (g0, g1) = (gout[base + 2 * p], gout[base + 2 * p + 1]);
                                gx[base + 2 * p] += g0 * c + g1 * s;
                                gx[base + 2 * p + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let go = gout[0];
                self.accumulate(grads, *x, |gx| {
                    for g in gx.iter_mut() {
                        *g += go;
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let row = self.data(*logits);
                let go = gout[0];
                self.accumulate(grads, *logits, |gl| {
                    softmax_minus_onehot_acc(row, *target, go, gl);
                });
            }
            Op::MaskedCeSum {
                logits,
                targets,
                mask,
            } => {
                let v = self.shape(*logits)[1];
                let ld = self.data(*logits);
                let go = gout[0];
                self.accumulate(grads, *logits, |gl| {
                    for (r, on) in mask.iter().enumerate() {
                        if !*on {
                            continue;
                        }
                        softmax_minus_onehot_acc(
                            &ld[r * v..(r + 1) * v],
                            targets[r],
                            go,
                            &mut gl[r * v..(r + 1) * v],
                        );
                    }
                });
            }
        }
    }
}

// ── Numeric helpers ─────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// gl += go * (softmax(row) - onehot(target))
fn softmax_minus_onehot_acc(row: &[f64], target: usize, go: f64, gl: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    for (g, v) in gl.iter_mut().zip(row) {
        *g += go * (v - m).exp() / z;
    }
    gl[target] -= go;
}

/// c[i*n..] += a[i, k-slice] row combinations: C = A[m,k] @ B[k,n], accumulate.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, ap) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(*ap, &b[p * n..(p + 1) * n], crow);
        }
    }
}

fn matmul_slice(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc(a, b, c, m, k, n);
}

/// C = A[m,k] @ B[n,k]^T, overwrite.
fn matmul_nt_slice(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// dA += dC[m,n] @ B[k,n]^T: dA[i,p] = sum_j dC[i,j] * B[p,j].
fn matmul_nt_acc(go: &[f64], b: &[f64], ga: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &go[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for (p, gap) in garow.iter_mut().enumerate() {
            *gap += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn rope_table(positions: &[usize], hd: usize, theta: f64) -> Vec<f64> {
    let mut table = vec![0.0; positions.len() * hd];
    for (r, &pos) in positions.iter().enumerate() {
        for p in 0..hd / 2 {
            let freq = theta.powf(-2.0 * p as f64 / hd as f64);
            let angle = pos as f64 * freq;
            table[r * hd + 2 * p] = angle.cos();
            table[r * hd + 2 * p + 1] = angle.sin();
        }
    }
    table
}

struct MatDims {
    batch_out: usize,
    batch_a: usize,
    batch_b: usize,
    m: usize,
    k: usize,
    n: usize,
    out_rank3: bool,
}

impl MatDims {
    fn resolve(
        op: &'static str,
        ash: &[usize],
        bsh: &[usize],
        trans_b: bool,
    ) -> Result<MatDims> {
        let split = |sh: &[usize]| -> Option<(usize, usize, usize)> {
            match sh.len() {
                2 => Some((1, sh[0], sh[1])),
                3 => Some((sh[0], sh[1], sh[2])),
                _ => None,
            }
        };
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        let (ba, m, k) = split(ash).ok_or_else(mismatch)?;
        let (bb, r0, r1) = split(bsh).ok_or_else(mismatch)?;
        let (kb, n) = if trans_b { (r1, r0) } else { (r0, r1) };
        if k != kb {
            return Err(mismatch());
        }
        if ba != bb && ba != 1 && bb != 1 {
            return Err(mismatch());
        }
        Ok(MatDims {
            batch_out: ba.max(bb),
            batch_a: ba,
            batch_b: bb,
            m,
            k,
            n,
            out_rank3: ash.len() == 3 || bsh.len() == 3,
        })
    }

    fn a_offset(&self, bi: usize) -> usize {
        if self.batch_a == 1 {
            0
        } else {
            bi * self.m * self.k
        }
    }

    fn b_offset(&self, bi: usize) -> usize {
        if self.batch_b == 1 {
            0
        } else {
            bi * self.k * self.n
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.out_rank3 {
            vec![self.batch_out, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn broadcast_mode(op: &'static str, ash: &[usize], bsh: &[usize]) -> Result<Broadcast> {
    if ash == bsh {
        return Ok(Broadcast::Same);
    }
    if ash.len() == bsh.len()
        && !ash.is_empty()
        && bsh[0] == 1
        && ash[1..] == bsh[1..]
    {
        let chunk: usize = bsh.iter().product();
        return Ok(Broadcast::RhsChunk { chunk });
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: ash.to_vec(),
        rhs: bsh.to_vec(),
    })
}

enum Broadcast {
    Same,
    RhsChunk { chunk: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2, 2], vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(vec![2, 3], vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]));
        let c = tape.matmul_nt(a, b).unwrap();
        // row_i . row_j oracles by hand
        let expect = [
            1.0 + 1.0 - 3.0,
            2.0 + 0.0 + 3.0,
            4.0 + 2.5 - 6.0,
            8.0 + 0.0 + 6.0,
        ];
        for (got, want) in tape.data(c).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_position_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new_masked(vec![2], vec![0.0, f64::NEG_INFINITY]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_exponentiation_oracle() {
        // Oracle: direct formula without max-subtraction.
        let xs = [1.0, 2.0, 3.0];
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = xs.iter().map(|v| v.exp() / z).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], xs.to_vec()));
        let y = tape.softmax_lastdim(x).unwrap();
        for (got, want) in tape.data(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new_masked(vec![2, 2], vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY])
                .unwrap(),
        );
        let err = tape.softmax_lastdim(x).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateAttention { row: 1 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![4, 5], (0..20).map(|i| (i as f64) * 0.37 - 3.0).collect()));
        let y = tape.softmax_lastdim(x).unwrap();
        for row in tape.data(y).chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rmsnorm_constant_vector() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![4], vec![2.0; 4]));
        let gain = tape.leaf(&t(vec![4], vec![1.0; 4]));
        let y = tape.rmsnorm(x, gain, 1e-12).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0).abs() < 1e-9);
        }
        // negative constant normalizes to -1
        let xn = tape.leaf(&t(vec![4], vec![-3.0; 4]));
        let yn = tape.rmsnorm(xn, gain, 1e-12).unwrap();
        for v in tape.data(yn) {
            assert!((v + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsnorm_zero_gain_zeroes_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0]));
        let gain = tape.leaf(&t(vec![3], vec![0.0; 3]));
        let y = tape.rmsnorm(x, gain, 1e-6).unwrap();
        assert!(tape.data(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn silu_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn concat_split_round_trip_bit_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(vec![1, 3], vec![7.0, 8.0, 9.0]));
        let c = tape.concat_seq(a, b).unwrap();
        let (h, t2) = tape.split_seq(c, 2).unwrap();
        assert_eq!(tape.data(h), tape.data(a));
        assert_eq!(tape.data(t2), tape.data(b));
        assert_eq!(tape.shape(h), &[2, 3]);
        assert_eq!(tape.shape(t2), &[1, 3]);
    }

    #[test]
    fn concat_mismatched_trailing_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2, 2], vec![0.0; 4]));
        assert!(tape.concat_seq(a, b).is_err());
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(vec![4, 2], vec![0.0; 8]));
        let err = tape.embed(table, &[0, 4]).unwrap_err();
        assert!(matches!(err, TensorError::VocabRange { id: 4, vocab: 4 }));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![4], vec![0.7; 4]));
        for target in 0..4 {
            let l = tape.cross_entropy(logits, target).unwrap();
            assert!((tape.data(l)[0] - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]).with_requires_grad(true));
        let y = tape.silu(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_leaves_frozen_leaves_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]).with_requires_grad(true));
        let w = tape.leaf(&t(vec![2], vec![3.0, 4.0])); // requires_grad = false
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn masked_ce_never_reads_unmasked_targets() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()));
        let mask = [false, true, false];
        // Out-of-vocab ids at unmasked positions must not even be validated.
        let (l1, c1) = tape.masked_ce_sum(logits, &[999, 2, 777], &mask).unwrap();
        let (l2, c2) = tape.masked_ce_sum(logits, &[0, 2, 1], &mask).unwrap();
        assert_eq!(c1, 1);
        assert_eq!(c2, 1);
        assert_eq!(tape.data(l1)[0].to_bits(), tape.data(l2)[0].to_bits());
    }

    #[test]
    fn masked_ce_empty_mask_is_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![2, 2], vec![0.0; 4]));
        let err = tape.masked_ce_sum(logits, &[0, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyMask));
    }

    #[test]
    fn rope_zero_positions_is_identity() {
        let mut tape = Tape::new();
        let x = t(vec![1, 2, 4], vec![0.3, -1.0, 2.0, 0.7, 1.5, 0.1, -0.4, 0.9]);
        let xi = tape.leaf(&x);
        let y = tape.rope(xi, &[0, 0], 10000.0).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut tape = Tape::new();
        let data = vec![0.3, -1.0, 2.0, 0.7, 1.5, 0.1, -0.4, 0.9];
        let x = tape.leaf(&t(vec![1, 2, 4], data.clone()));
        let y = tape.rope(x, &[3, 11], 10000.0).unwrap();
        let yd = tape.data(y);
        for p in 0..4 {
            let n0 = (data[2 * p].powi(2) + data[2 * p + 1].powi(2)).sqrt();
            let n1 = (yd[2 * p].powi(2) + yd[2 * p + 1].powi(2)).sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_dot_depends_only_on_relative_offset() {
        // Oracle: direct evaluation of rotated dot products at two
        // position pairs with equal offset.
        let q = vec![0.4, -0.2, 1.1, 0.6];
        let k = vec![-0.9, 0.3, 0.5, 0.25];
        let dot_at = |pq: usize, pk: usize| -> f64 {
            let mut tape = Tape::new();
            let qi = tape.leaf(&t(vec![1, 1, 4], q.clone()));
            let ki = tape.leaf(&t(vec![1, 1, 4], k.clone()));
            let qr = tape.rope(qi, &[pq], 10000.0).unwrap();
            let kr = tape.rope(ki, &[pk], 10000.0).unwrap();
            tape.data(qr)
                .iter()
                .zip(tape.data(kr))
                .map(|(a, b)| a * b)
                .sum()
        };
        assert!((dot_at(5, 3) - dot_at(7, 5)).abs() < 1e-9);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut tape = Tape::new();
        let x = t(vec![3, 4], (0..12).map(|i| i as f64).collect());
        let xi = tape.leaf(&x);
        let h = tape.split_heads(xi, 2).unwrap();
        assert_eq!(tape.shape(h), &[2, 3, 2]);
        let back = tape.merge_heads(h).unwrap();
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn nan_output_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new_masked(vec![1], vec![f64::NEG_INFINITY]).unwrap());
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        // -inf * 0 = NaN
        let err = tape.mul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn add_broadcasts_leading_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()));
        let b = tape.leaf(&t(vec![1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(
            tape.data(c),
            &[10.0, 21.0, 32.0, 43.0, 14.0, 25.0, 36.0, 47.0]
        );
    }

    #[test]
    fn add_broadcast_gradient_sums_over_chunks() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![0.0; 4]).with_requires_grad(true));
        let b = tape.leaf(&t(vec![1, 2], vec![0.0; 2]).with_requires_grad(true));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }
}

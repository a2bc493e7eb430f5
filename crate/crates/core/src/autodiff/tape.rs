//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node to the tape, so node indices are already a
//! topological order and the backward pass is a single reverse sweep.

use std::rc::Rc;

use crate::error::{FuxiError, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

use super::mask::CausalMask;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel index for masked entries of a bias gather.
pub const MASKED: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        shared_rhs: bool,
    },
    MatMulBt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Vec<f64>>),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    View {
        src: Var,
        offset: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    GatherScalars {
        table: Var,
        idx: Rc<Vec<usize>>,
    },
    AttnScores {
        q: Var,
        k: Var,
        mask: Rc<CausalMask>,
    },
    GatherDot {
        hidden: Var,
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    SampledSoftmax {
        scores: Var,
        weights: Rc<Vec<f64>>,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single forward pass and replays them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> FuxiError {
    FuxiError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a: [..., m, k]` times `b: [k, p]` (shared right-hand side), or
    /// `a: [B, m, k]` times `b: [B, k, p]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (batch, shared_rhs, p) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(shape_err("matmul", ta, tb));
            }
            (1, true, sb[1])
        } else if sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0] && sb[1] == k {
            (sa[0], false, sb[2])
        } else {
            return Err(shape_err("matmul", ta, tb));
        };
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = p;
        let mut out = vec![0.0; out_shape.iter().product()];
        if shared_rhs {
            let rows = ta.numel() / k.max(1);
            if k > 0 {
                gemm_nn(ta.data(), tb.data(), &mut out, rows, k, p);
            }
            let rows_m = rows;
            let op = Op::MatMul {
                a,
                b,
                batch: 1,
                m: rows_m,
                k,
                p,
                shared_rhs,
            };
            let ng = self.ng(&[a, b]);
            return Ok(self.push(Tensor::new(out_shape, out)?, op, ng));
        }
        for bi in 0..batch {
            gemm_nn(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * p..(bi + 1) * k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            p,
            shared_rhs,
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, op, ng))
    }

    /// `a · bᵀ` over the last two axes: `a: [..., m, k]` with `b: [p, k]`,
    /// or `a: [B, m, k]` with `b: [B, p, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (batch, shared_rhs, p, m_eff) = if sb.len() == 2 {
            if sb[1] != k {
                return Err(shape_err("matmul_bt", ta, tb));
            }
            (1, true, sb[0], ta.numel() / k.max(1))
        } else if sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0] && sb[2] == k {
            (sa[0], false, sb[1], m)
        } else {
            return Err(shape_err("matmul_bt", ta, tb));
        };
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = p;
        let mut out = vec![0.0; out_shape.iter().product()];
        for bi in 0..batch {
            let (a_off, b_off, o_off) = if shared_rhs {
                (0, 0, 0)
            } else {
                (bi * m * k, bi * p * k, bi * m * p)
            };
            gemm_nt(
                &ta.data()[a_off..a_off + m_eff * k],
                &tb.data()[b_off..b_off + p * k],
                &mut out[o_off..o_off + m_eff * p],
                m_eff,
                k,
                p,
            );
        }
        let op = Op::MatMulBt {
            a,
            b,
            batch,
            m: m_eff,
            k,
            p,
            shared_rhs,
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, op, ng))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(FuxiError::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Scale(a, c), ng))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Silu(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Relu(a), ng))
    }

    // ----- normalization --------------------------------------------------

    /// Row-wise `x / sqrt(mean(x²) + eps) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(FuxiError::invalid("rms_norm epsilon must be non-negative"));
        }
        let tx = self.value(x);
        let d = tx.last_dim();
        if let Some(g) = gain {
            let tg = self.value(g);
            if tg.numel() != d {
                return Err(shape_err("rms_norm", tx, tg));
            }
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        let gdata = gain.map(|g| self.data(g));
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let denom = (ms + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_rms.push(inv);
            let o = &mut out[r * d..(r + 1) * d];
            match gdata {
                Some(g) => {
                    for ((ov, &xv), &gv) in o.iter_mut().zip(row).zip(g) {
                        *ov = xv * inv * gv;
                    }
                }
                None => {
                    for (ov, &xv) in o.iter_mut().zip(row) {
                        *ov = xv * inv;
                    }
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]) || gain.is_some_and(|g| self.nodes[g.0].needs_grad);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over keys of a `[B, T, T]` score tensor restricted to the
    /// causal mask. Disallowed entries are exactly zero; a row with no
    /// allowed key is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<CausalMask>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.width() || s[2] != mask.width() {
            return Err(FuxiError::Shape {
                op: "masked_softmax",
                lhs: s.to_vec(),
                rhs: vec![mask.batch(), mask.width(), mask.width()],
            });
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Rc<CausalMask>>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let end = match &mask {
                Some(m) => {
                    let b = r / m.width();
                    let i = r % m.width();
                    m.key_end(b, i)
                }
                None => d,
            };
            if end == 0 {
                continue;
            }
            let live = &row[..end];
            let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * d..r * d + end];
            let mut total = 0.0;
            for (ov, &xv) in o.iter_mut().zip(live) {
                *ov = (xv - max).exp();
                total += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= total;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax { x }, ng))
    }

    // ----- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum::<f64>();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(FuxiError::invalid("mean of an empty tensor"));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Contiguous flat window `[offset, offset + prod(shape))` of `src`.
    pub fn view(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = self.data(src);
        if offset + n > data.len() {
            return Err(FuxiError::Shape {
                op: "view",
                lhs: self.shape(src).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), data[offset..offset + n].to_vec())?;
        let ng = self.ng(&[src]);
        Ok(self.push(t, Op::View { src, offset }, ng))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if start + len > d {
            return Err(FuxiError::Shape {
                op: "slice_last",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceLast { x, start }, ng))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| FuxiError::invalid("concat of zero tensors"))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", self.value(first), self.value(p)));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let d = t.last_dim();
                out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), ng))
    }

    // ----- indexing -------------------------------------------------------

    /// Rows of `table` (viewed as `[rows, last_dim]`) selected by `ids`;
    /// output shape is `[ids.len(), last_dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        let d = t.last_dim();
        let rows = t.rows();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            if id >= rows {
                return Err(FuxiError::IdOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(v, Op::GatherRows { table, ids }, ng))
    }

    /// `out[k] = table[idx[k]]`, or 0 where `idx[k] == MASKED`.
    pub fn gather_scalars(&mut self, table: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(FuxiError::Shape {
                op: "gather_scalars",
                lhs: vec![idx.len()],
                rhs: shape.to_vec(),
            });
        }
        let tdata = self.data(table);
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i == MASKED {
                out.push(0.0);
            } else if i < tdata.len() {
                out.push(tdata[i]);
            } else {
                return Err(FuxiError::IdOutOfRange {
                    id: i,
                    vocab: tdata.len(),
                });
            }
        }
        let v = Tensor::new(shape.to_vec(), out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(v, Op::GatherScalars { table, idx }, ng))
    }

    // ----- attention ------------------------------------------------------

    /// `s[b,i,j] = q[b,i]·k[b,j]` on allowed causal pairs, 0 elsewhere.
    pub fn attn_scores(&mut self, q: Var, k: Var, mask: Rc<CausalMask>) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let s = tq.shape();
        if s.len() != 3 || tk.shape() != s || s[0] != mask.batch() || s[1] != mask.width() {
            return Err(shape_err("attn_scores", tq, tk));
        }
        let (bsz, t, dh) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; bsz * t * t];
        for b in 0..bsz {
            for i in 0..t {
                let qi = &tq.data()[(b * t + i) * dh..(b * t + i + 1) * dh];
                let o = &mut out[(b * t + i) * t..(b * t + i + 1) * t];
                for (j, ov) in o.iter_mut().enumerate().take(mask.key_end(b, i)) {
                    *ov = kernels::dot(qi, &tk.data()[(b * t + j) * dh..(b * t + j + 1) * dh]);
                }
            }
        }
        let v = Tensor::new(vec![bsz, t, t], out)?;
        let ng = self.ng(&[q, k]);
        Ok(self.push(v, Op::AttnScores { q, k, mask }, ng))
    }

    // ----- scoring and loss -----------------------------------------------

    /// `out[p, c] = hidden[p] · table[ids[p·C + c]]` with `hidden: [P, d]`.
    pub fn gather_dot(&mut self, hidden: Var, table: Var, ids: Rc<Vec<usize>>, cols: usize) -> Result<Var> {
        let (th, tt) = (self.value(hidden), self.value(table));
        let d = th.last_dim();
        if tt.last_dim() != d {
            return Err(shape_err("gather_dot", th, tt));
        }
        let rows = th.rows();
        if ids.len() != rows * cols {
            return Err(FuxiError::Shape {
                op: "gather_dot",
                lhs: vec![rows, cols],
                rhs: vec![ids.len()],
            });
        }
        let vocab = tt.rows();
        let mut out = vec![0.0; rows * cols];
        for p in 0..rows {
            let h = &th.data()[p * d..(p + 1) * d];
            for c in 0..cols {
                let id = ids[p * cols + c];
                if id >= vocab {
                    return Err(FuxiError::IdOutOfRange { id, vocab });
                }
                out[p * cols + c] = kernels::dot(h, &tt.data()[id * d..(id + 1) * d]);
            }
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        let ng = self.ng(&[hidden, table]);
        Ok(self.push(v, Op::GatherDot { hidden, table, ids }, ng))
    }

    /// Sampled softmax cross-entropy. `scores: [P, 1 + N]` with the positive
    /// in column 0; `weights[p]` scales position `p` (0 masks it out). The
    /// result is the weighted mean of `logsumexp(row) - row[0]`.
    pub fn sampled_softmax_loss(&mut self, scores: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        let ts = self.value(scores);
        if ts.rank() != 2 {
            return Err(FuxiError::invalid(format!(
                "sampled softmax expects [positions, 1 + negatives], got {:?}",
                ts.shape()
            )));
        }
        let (rows, cols) = (ts.shape()[0], ts.shape()[1]);
        if cols < 2 {
            return Err(FuxiError::invalid("sampled softmax needs at least one negative"));
        }
        if weights.len() != rows {
            return Err(FuxiError::Shape {
                op: "sampled_softmax_loss",
                lhs: ts.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(FuxiError::invalid("sampled softmax: every position is masked"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = &ts.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pv, &s) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *pv = (s - max).exp();
                z += *pv;
            }
            for pv in &mut probs[r * cols..(r + 1) * cols] {
                *pv /= z;
            }
            loss += weights[r] * (max + z.ln() - row[0]);
        }
        let v = Tensor::scalar(loss / total_weight);
        let ng = self.ng(&[scores]);
        Ok(self.push(
            v,
            Op::SampledSoftmax {
                scores,
                weights,
                probs,
                total_weight,
            },
            ng,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Afterwards every trainable leaf
    /// holds a gradient (zeros if unreachable). A second call without
    /// [`Tape::reset_grads`] fails with [`FuxiError::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(FuxiError::StaleTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(FuxiError::invalid("loss does not belong to this tape"));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(FuxiError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.set_grad(g)?;
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n])?;
            }
        }
        Ok(())
    }

    /// Clears leaf gradients and re-arms the tape for another backward pass.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.consumed = false;
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs_grad(a) {
                    let ga = grad_buf(grads, a, ad.len());
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * k * p };
                        gemm_nt(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bd[b_off..b_off + k * p],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                }
                if self.needs_grad(b) {
                    let gb = grad_buf(grads, b, bd.len());
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * k * p };
                        gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[b_off..b_off + k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
            }
            &Op::MatMulBt {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            } => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs_grad(a) {
                    let ga = grad_buf(grads, a, ad.len());
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * p * k };
                        gemm_nn(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bd[b_off..b_off + p * k],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                }
                if self.needs_grad(b) {
                    let gb = grad_buf(grads, b, bd.len());
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * p * k };
                        gemm_tn(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &mut gb[b_off..b_off + p * k],
                            m,
                            p,
                            k,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs_grad(v) {
                        let gv = grad_buf(grads, v, g.len());
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs_grad(a) {
                    let bd = self.data(b);
                    let ga = grad_buf(grads, a, g.len());
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * bv;
                    }
                }
                if self.needs_grad(b) {
                    let ad = self.data(a);
                    let gb = grad_buf(grads, b, g.len());
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * av;
                    }
                }
            }
            Op::MulConst(a, c) => {
                let ga = grad_buf(grads, *a, g.len());
                for ((x, &y), &cv) in ga.iter_mut().zip(g).zip(c.iter()) {
                    *x += y * cv;
                }
            }
            &Op::Scale(a, c) => {
                let ga = grad_buf(grads, a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * c;
                }
            }
            &Op::Silu(a) => {
                let ad = self.data(a);
                let ga = grad_buf(grads, a, g.len());
                for ((x, &y), &av) in ga.iter_mut().zip(g).zip(ad) {
                    *x += y * kernels::silu_grad(av);
                }
            }
            &Op::Relu(a) => {
                let ad = self.data(a);
                let ga = grad_buf(grads, a, g.len());
                for ((x, &y), &av) in ga.iter_mut().zip(g).zip(ad) {
                    if av > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = self.data(*x);
                let d = self.value(*x).last_dim();
                let gd = gain.map(|gv| self.data(gv));
                if self.needs_grad(*x) {
                    let gx = grad_buf(grads, *x, xd.len());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // gg = upstream ⊙ gain
                        let mut proj = 0.0;
                        for c in 0..d {
                            let gg = gr[c] * gd.map_or(1.0, |gain| gain[c]);
                            proj += gg * xr[c];
                        }
                        let coef = inv * inv * inv * proj / d as f64;
                        let out_r = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            let gg = gr[c] * gd.map_or(1.0, |gain| gain[c]);
                            out_r[c] += inv * gg - xr[c] * coef;
                        }
                    }
                }
                if let Some(gv) = *gain {
                    if self.needs_grad(gv) {
                        let ggain = grad_buf(grads, gv, d);
                        for (r, &inv) in inv_rms.iter().enumerate() {
                            for c in 0..d {
                                ggain[c] += g[r * d + c] * xd[r * d + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let d = node.value.last_dim();
                let gx = grad_buf(grads, *x, g.len());
                for r in 0..node.value.rows() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inner = kernels::dot(y, gr);
                    for c in 0..d {
                        gx[r * d + c] += y[c] * (gr[c] - inner);
                    }
                }
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                let gx = grad_buf(grads, x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let gx = grad_buf(grads, x, n);
                for v in gx.iter_mut() {
                    *v += g[0] / n as f64;
                }
            }
            &Op::Reshape(x) => {
                let gx = grad_buf(grads, x, g.len());
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
            &Op::View { src, offset } => {
                let n = self.value(src).numel();
                let gs = grad_buf(grads, src, n);
                for (a, &b) in gs[offset..offset + g.len()].iter_mut().zip(g) {
                    *a += b;
                }
            }
            &Op::SliceLast { x, start } => {
                let tx = self.value(x);
                let d = tx.last_dim();
                let len = node.value.last_dim();
                let gx = grad_buf(grads, x, tx.numel());
                for r in 0..tx.rows() {
                    for c in 0..len {
                        gx[r * d + start + c] += g[r * len + c];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let d = tp.last_dim();
                    if self.needs_grad(p) {
                        let gp = grad_buf(grads, p, tp.numel());
                        for r in 0..rows {
                            for c in 0..d {
                                gp[r * d + c] += g[r * width + col + c];
                            }
                        }
                    }
                    col += d;
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let d = tt.last_dim();
                let gt = grad_buf(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
            Op::GatherScalars { table, idx } => {
                let n = self.value(*table).numel();
                let gt = grad_buf(grads, *table, n);
                for (k, &i) in idx.iter().enumerate() {
                    if i != MASKED {
                        gt[i] += g[k];
                    }
                }
            }
            Op::AttnScores { q, k, mask } => {
                let s = self.shape(*q);
                let (bsz, t, dh) = (s[0], s[1], s[2]);
                let (qd, kd) = (self.data(*q), self.data(*k));
                if self.needs_grad(*q) {
                    let gq = grad_buf(grads, *q, qd.len());
                    for b in 0..bsz {
                        for i in 0..t {
                            let gi = &mut gq[(b * t + i) * dh..(b * t + i + 1) * dh];
                            for j in 0..mask.key_end(b, i) {
                                let w = g[(b * t + i) * t + j];
                                kernels::axpy(w, &kd[(b * t + j) * dh..(b * t + j + 1) * dh], gi);
                            }
                        }
                    }
                }
                if self.needs_grad(*k) {
                    let gk = grad_buf(grads, *k, kd.len());
                    for b in 0..bsz {
                        for i in 0..t {
                            let qi = &qd[(b * t + i) * dh..(b * t + i + 1) * dh];
                            for j in 0..mask.key_end(b, i) {
                                let w = g[(b * t + i) * t + j];
                                kernels::axpy(w, qi, &mut gk[(b * t + j) * dh..(b * t + j + 1) * dh]);
                            }
                        }
                    }
                }
            }
            Op::GatherDot { hidden, table, ids } => {
                let (hd, td) = (self.data(*hidden), self.data(*table));
                let d = self.value(*hidden).last_dim();
                let rows = self.value(*hidden).rows();
                let cols = node.value.last_dim();
                if self.needs_grad(*hidden) {
                    let gh = grad_buf(grads, *hidden, hd.len());
                    for p in 0..rows {
                        for c in 0..cols {
                            let id = ids[p * cols + c];
                            kernels::axpy(g[p * cols + c], &td[id * d..(id + 1) * d], &mut gh[p * d..(p + 1) * d]);
                        }
                    }
                }
                if self.needs_grad(*table) {
                    let gt = grad_buf(grads, *table, td.len());
                    for p in 0..rows {
                        for c in 0..cols {
                            let id = ids[p * cols + c];
                            kernels::axpy(g[p * cols + c], &hd[p * d..(p + 1) * d], &mut gt[id * d..(id + 1) * d]);
                        }
                    }
                }
            }
            Op::SampledSoftmax {
                scores,
                weights,
                probs,
                total_weight,
            } => {
                let cols = self.value(*scores).last_dim();
                let gs = grad_buf(grads, *scores, probs.len());
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w / total_weight;
                    for c in 0..cols {
                        let target = if c == 0 { 1.0 } else { 0.0 };
                        gs[r * cols + c] += scale * (probs[r * cols + c] - target);
                    }
                }
            }
        }
    }
}

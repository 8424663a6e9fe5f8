//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates `∂loss/∂node` for every node that depends on a parameter.
//!
//! Besides the usual dense primitives the tape carries a few fused kernels
//! that the structure network needs: blocked multi-head attention, masked
//! cross-entropy, the SO(3) exponential and logarithm on rows of axis-angle
//! vectors / flattened rotation matrices, rigid-frame application, and the
//! smooth ligand surface function.

use crate::geometry::{rodrigues_coefficients, so3_log_unchecked};
use crate::tensor::{gemm, Tensor};
use nalgebra::Matrix3;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-side masking for [`Tape::attention`].
#[derive(Debug, Clone, Default)]
pub struct AttentionMask {
    /// One flag per key row (`blocks·key_len`); `false` keys are ignored.
    pub keys: Option<Vec<bool>>,
    /// One flag per (query, key) pair within each block
    /// (`blocks·query_len·key_len`), row-major.
    pub pairs: Option<Vec<bool>>,
}

/// Shape of a blocked multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub blocks: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    AddCol { a: Var, col: Var },
    MulRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    LayerNorm { a: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    GroupSumRows { a: Var, group: usize },
    Reshape(Var),
    SumCols(Var),
    SumAll(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    So3Exp(Var),
    So3Log(Var),
    RotMul { a: Var, b: Var, transpose_a: bool },
    FrameApply { rot: Var, trans: Var, points: Var, inverse: bool },
    Surface { points: Var, ligand: Vec<[f64; 3]>, rho: f64 },
    PointDistances { points: Var, targets: Vec<[f64; 3]> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // ---- dense primitives ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            tracked,
        )
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension");
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(
            av.rows(),
            av.cols(),
            bv.rows(),
            1.0,
            (av.data(), av.cols(), 1),
            (bv.data(), 1, bv.cols()),
            0.0,
            (out.data_mut(), bv.rows(), 1),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            tracked,
        )
    }

    fn zip_values(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{name} shape");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_values(a, b, "add", |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_values(a, b, "sub", |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_values(a, b, "mul", |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(out, Op::AddRow { a, row }, tracked)
    }

    /// Adds an R×1 column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows(), 1), cv.shape(), "add_col shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o += c);
        }
        let tracked = self.tracked(a) || self.tracked(col);
        self.push(out, Op::AddCol { a, col }, tracked)
    }

    /// Multiplies every row of `a` elementwise by a 1×C row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "mul_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(out, Op::MulRow { a, row }, tracked)
    }

    /// Scales row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows(), 1), cv.shape(), "mul_col shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= c);
        }
        let tracked = self.tracked(a) || self.tracked(col);
        self.push(out, Op::MulCol { a, col }, tracked)
    }

    /// Multiplies rows by a constant per-row factor (masks, normalizers).
    pub fn mask_rows(&mut self, a: Var, factors: &[f64]) -> Var {
        let col = self.constant(Tensor::column(factors));
        self.mul_col(a, col)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, s), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let tracked = self.tracked(a);
        self.push(value, Op::AddScalar(a), tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let c = av.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let tracked = self.tracked(a);
        self.push(out, Op::LayerNorm { a, eps }, tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows cols");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols range");
        let out = Tensor::from_fn(av.rows(), end - start, |r, c| av.get(r, start + c));
        let tracked = self.tracked(a);
        self.push(out, Op::SliceCols { a, start }, tracked)
    }

    /// Row `i` of the result is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::from_vec(index.len(), av.cols(), data);
        let tracked = self.tracked(a);
        self.push(
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            tracked,
        )
    }

    /// Sums consecutive runs of `group` rows.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows().is_multiple_of(group), "group_sum_rows size");
        let mut out = Tensor::zeros(av.rows() / group, av.cols());
        for r in 0..av.rows() {
            let g = r / group;
            for (o, x) in out.row_mut(g).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let tracked = self.tracked(a);
        self.push(out, Op::GroupSumRows { a, group }, tracked)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let tracked = self.tracked(a);
        self.push(out, Op::Reshape(a), tracked)
    }

    /// R×C → R×1 row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        let tracked = self.tracked(a);
        self.push(out, Op::SumCols(a), tracked)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), tracked)
    }

    // ---- fused kernels ---------------------------------------------------

    /// Blocked multi-head attention.
    ///
    /// `q` is `(blocks·query_len) × (heads·dk)`, `k` is `(blocks·key_len) ×
    /// (heads·dk)`, `v` is `(blocks·key_len) × (heads·dv)`; the optional
    /// additive `bias` is `(blocks·query_len·key_len) × heads`. Queries whose
    /// keys are all masked produce zero rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: AttentionShape,
        mask: &AttentionMask,
    ) -> Var {
        let AttentionShape {
            blocks,
            query_len: lq,
            key_len: lk,
            heads,
            scale,
        } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.rows(), blocks * lq, "attention q rows");
        assert_eq!(kv.rows(), blocks * lk, "attention k rows");
        assert_eq!(vv.rows(), blocks * lk, "attention v rows");
        assert_eq!(qv.cols(), kv.cols(), "attention q/k width");
        assert!(qv.cols() % heads == 0 && vv.cols() % heads == 0, "attention head split");
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        if let Some(b) = bias {
            assert_eq!(self.value(b).shape(), (blocks * lq * lk, heads), "attention bias");
        }
        if let Some(keys) = &mask.keys {
            assert_eq!(keys.len(), blocks * lk, "attention key mask");
        }
        if let Some(pairs) = &mask.pairs {
            assert_eq!(pairs.len(), blocks * lq * lk, "attention pair mask");
        }
        let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
        let mut probs = vec![0.0; blocks * heads * lq * lk];
        let mut out = Tensor::zeros(blocks * lq, heads * dv);
        let mut scores = vec![0.0; lq * lk];
        for b in 0..blocks {
            for h in 0..heads {
                gemm(
                    lq,
                    dk,
                    lk,
                    scale,
                    (&qv.data()[b * lq * qc + h * dk..], qc, 1),
                    (&kv.data()[b * lk * kc + h * dk..], 1, kc),
                    0.0,
                    (&mut scores, lk, 1),
                );
                let p = &mut probs[(b * heads + h) * lq * lk..][..lq * lk];
                for i in 0..lq {
                    let srow = &mut scores[i * lk..(i + 1) * lk];
                    if let Some(bv) = bias {
                        let bias_t = self.value(bv);
                        for (j, s) in srow.iter_mut().enumerate() {
                            *s += bias_t.get((b * lq + i) * lk + j, h);
                        }
                    }
                    let allowed = |j: usize| {
                        mask.keys.as_ref().is_none_or(|m| m[b * lk + j])
                            && mask.pairs.as_ref().is_none_or(|m| m[(b * lq + i) * lk + j])
                    };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in srow.iter().enumerate() {
                        if allowed(j) && *s > max {
                            max = *s;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut p[i * lk..(i + 1) * lk];
                    let mut total = 0.0;
                    for j in 0..lk {
                        if allowed(j) {
                            let e = (srow[j] - max).exp();
                            prow[j] = e;
                            total += e;
                        }
                    }
                    prow.iter_mut().for_each(|x| *x /= total);
                }
                gemm(
                    lq,
                    lk,
                    dv,
                    1.0,
                    (p, lk, 1),
                    (&vv.data()[b * lk * vc + h * dv..], vc, 1),
                    0.0,
                    (&mut out.data_mut()[b * lq * heads * dv + h * dv..], heads * dv, 1),
                );
            }
        }
        let tracked = self.tracked(q)
            || self.tracked(k)
            || self.tracked(v)
            || bias.is_some_and(|b| self.tracked(b));
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                probs,
            },
            tracked,
        )
    }

    /// Σ_i weights[i] · (−log softmax(logits[i])[targets[i]]) as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy targets");
        assert_eq!(lv.rows(), weights.len(), "cross_entropy weights");
        let k = lv.cols();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_total = total.ln() + max;
            for c in 0..k {
                probs[r * k + c] = (row[c] - log_total).exp();
            }
            if weights[r] != 0.0 {
                assert!(targets[r] < k, "cross_entropy target out of range");
                loss += weights[r] * (log_total - row[targets[r]]);
            }
        }
        let tracked = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            tracked,
        )
    }

    /// Rows of axis-angle vectors (R×3) to rows of row-major rotations (R×9).
    pub fn so3_exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 3, "so3_exp expects R×3");
        let mut out = Tensor::zeros(av.rows(), 9);
        for r in 0..av.rows() {
            let v = nalgebra::Vector3::from_column_slice(av.row(r));
            let m = crate::geometry::so3_exp(&v);
            write_mat(out.row_mut(r), m.matrix());
        }
        let tracked = self.tracked(a);
        self.push(out, Op::So3Exp(a), tracked)
    }

    /// Rows of row-major rotations (R×9) to axis-angle rows (R×3).
    pub fn so3_log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 9, "so3_log expects R×9");
        let mut out = Tensor::zeros(av.rows(), 3);
        for r in 0..av.rows() {
            let v = so3_log_unchecked(&read_mat(av.row(r)));
            out.row_mut(r).copy_from_slice(v.as_slice());
        }
        let tracked = self.tracked(a);
        self.push(out, Op::So3Log(a), tracked)
    }

    /// Row-wise 3×3 products `a·b` (or `aᵀ·b`) of R×9 rotation rows.
    pub fn rot_mul(&mut self, a: Var, b: Var, transpose_a: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rot_mul shape");
        assert_eq!(av.cols(), 9, "rot_mul expects R×9");
        let mut out = Tensor::zeros(av.rows(), 9);
        for r in 0..av.rows() {
            let mut ma = read_mat(av.row(r));
            if transpose_a {
                ma = ma.transpose();
            }
            write_mat(out.row_mut(r), &(ma * read_mat(bv.row(r))));
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            out,
            Op::RotMul {
                a,
                b,
                transpose_a,
            },
            tracked,
        )
    }

    /// Applies per-row frames to packed points: `rot` is R×9, `trans` R×3 and
    /// `points` R×(3K). Forward maps p ↦ rot·p + trans; inverse maps
    /// p ↦ rotᵀ·(p − trans).
    pub fn frame_apply(&mut self, rot: Var, trans: Var, points: Var, inverse: bool) -> Var {
        let (rv, tv, pv) = (self.value(rot), self.value(trans), self.value(points));
        assert_eq!(rv.cols(), 9, "frame_apply rot");
        assert_eq!(tv.cols(), 3, "frame_apply trans");
        assert!(pv.cols() % 3 == 0, "frame_apply points");
        let rows = pv.rows();
        assert!(rv.rows() == rows && tv.rows() == rows, "frame_apply rows");
        let mut out = Tensor::zeros(rows, pv.cols());
        for r in 0..rows {
            let m = read_mat(rv.row(r));
            let x = nalgebra::Vector3::from_column_slice(tv.row(r));
            for (p_in, p_out) in pv.row(r).chunks(3).zip(out.row_mut(r).chunks_mut(3)) {
                let p = nalgebra::Vector3::from_column_slice(p_in);
                let q = if inverse {
                    m.transpose() * (p - x)
                } else {
                    m * p + x
                };
                p_out.copy_from_slice(q.as_slice());
            }
        }
        let tracked = self.tracked(rot) || self.tracked(trans) || self.tracked(points);
        self.push(
            out,
            Op::FrameApply {
                rot,
                trans,
                points,
                inverse,
            },
            tracked,
        )
    }

    /// Smooth ligand surface value S(a) = −ρ log Σ_j exp(−|a − a_j|²/ρ) for
    /// each row of an R×3 point matrix; evaluated with a max shift.
    pub fn surface(&mut self, points: Var, ligand: &[[f64; 3]], rho: f64) -> Var {
        let pv = self.value(points);
        assert_eq!(pv.cols(), 3, "surface expects R×3");
        assert!(!ligand.is_empty(), "surface needs ligand atoms");
        let out = Tensor::from_fn(pv.rows(), 1, |r, _| {
            surface_value_with_weights(pv.row(r), ligand, rho, None)
        });
        let tracked = self.tracked(points);
        self.push(
            out,
            Op::Surface {
                points,
                ligand: ligand.to_vec(),
                rho,
            },
            tracked,
        )
    }

    /// R×3 points against M fixed targets: R×M Euclidean distances.
    pub fn point_distances(&mut self, points: Var, targets: &[[f64; 3]]) -> Var {
        let pv = self.value(points);
        assert_eq!(pv.cols(), 3, "point_distances expects R×3");
        let out = Tensor::from_fn(pv.rows(), targets.len(), |r, j| {
            let p = pv.row(r);
            let t = &targets[j];
            ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt()
        });
        let tracked = self.tracked(points);
        self.push(
            out,
            Op::PointDistances {
                points,
                targets: targets.to_vec(),
            },
            tracked,
        )
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut Tensor),
    ) {
        if !self.tracked(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(r, c));
        f(t);
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = g.shape();
                let k = av.cols();
                self.accumulate_with(grads, *a, |ga| {
                    // transpose_b: C = A·Bᵀ ⇒ dA = dC·B; else dA = dC·Bᵀ
                    let b_view = if *transpose_b {
                        (bv.data(), bv.cols(), 1)
                    } else {
                        (bv.data(), 1, bv.cols())
                    };
                    gemm(m, n, k, 1.0, (g.data(), n, 1), b_view, 1.0, (ga.data_mut(), k, 1));
                });
                self.accumulate_with(grads, *b, |gb| {
                    if *transpose_b {
                        // dB (n×k) = dCᵀ·A
                        gemm(n, m, k, 1.0, (g.data(), 1, n), (av.data(), k, 1), 1.0, (gb.data_mut(), k, 1));
                    } else {
                        // dB (k×n) = Aᵀ·dC
                        gemm(k, m, n, 1.0, (av.data(), 1, k), (g.data(), n, 1), 1.0, (gb.data_mut(), n, 1));
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::AddCol { a, col } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *col, |gc| {
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                });
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for ((o, x), s) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                            *o += x * s;
                        }
                    }
                });
                self.accumulate_with(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for ((o, x), s) in gr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += x * s;
                        }
                    }
                });
            }
            Op::MulCol { a, col } => {
                let (av, cv) = (self.value(*a), self.value(*col));
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let s = cv.data()[r];
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += x * s;
                        }
                    }
                });
                self.accumulate_with(grads, *col, |gc| {
                    for r in 0..g.rows() {
                        gc.data_mut()[r] +=
                            g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, g.clone().reshaped(r, c));
            }
            Op::Silu(a) => self.unary_backward(grads, *a, &node.value, g, |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Sigmoid(a) => self.unary_backward(grads, *a, &node.value, g, |_, y| y * (1.0 - y)),
            Op::Tanh(a) => self.unary_backward(grads, *a, &node.value, g, |_, y| 1.0 - y * y),
            Op::Relu(a) => self.unary_backward(grads, *a, &node.value, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Square(a) => self.unary_backward(grads, *a, &node.value, g, |x, _| 2.0 * x),
            Op::Sqrt(a) => self.unary_backward(grads, *a, &node.value, g, |_, y| 0.5 / y),
            Op::Softplus(a) => self.unary_backward(grads, *a, &node.value, g, |x, _| sigmoid(x)),
            Op::LayerNorm { a, eps } => {
                let av = self.value(*a);
                let y = &node.value;
                let c = av.cols() as f64;
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let row = av.row(r);
                        let mean = row.iter().sum::<f64>() / c;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.iter().sum::<f64>() / c;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gi - g_mean - yi * gy_mean);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let start = offset;
                    self.accumulate_with(grads, *p, |gp| {
                        for row in 0..r {
                            for (o, x) in gp.row_mut(row).iter_mut().zip(&g.row(row)[start..start + c]) {
                                *o += x;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let start = offset;
                    self.accumulate_with(grads, *p, |gp| {
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[start * c..(start + r) * c]) {
                            *o += x;
                        }
                    });
                    offset += r;
                }
            }
            Op::SliceCols { a, start } => {
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, x) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                self.accumulate_with(grads, *a, |ga| {
                    for (r, &src) in index.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::GroupSumRows { a, group } => {
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..ga.rows() {
                        let src = g.row(r / group).to_vec();
                        for (o, x) in ga.row_mut(r).iter_mut().zip(&src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..ga.rows() {
                        let s = g.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|o| *o += s);
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g.scalar_value();
                self.accumulate_with(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += s));
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *bias, shape, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = g.scalar_value();
                self.accumulate_with(grads, *logits, |gl| {
                    let k = gl.cols();
                    for r in 0..gl.rows() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            gl.data_mut()[r * k + c] += s * w * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::So3Exp(a) => {
                let av = self.value(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..av.rows() {
                        let d = so3_exp_vjp(av.row(r), &read_mat(g.row(r)));
                        for (o, x) in ga.row_mut(r).iter_mut().zip(d) {
                            *o += x;
                        }
                    }
                });
            }
            Op::So3Log(a) => {
                let av = self.value(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..av.rows() {
                        let d = so3_log_vjp(&read_mat(av.row(r)), g.row(r));
                        for (o, x) in ga.row_mut(r).iter_mut().zip(d.transpose().as_slice()) {
                            // nalgebra is column-major; transposing first yields row-major order.
                            *o += x;
                        }
                    }
                });
            }
            Op::RotMul {
                a,
                b,
                transpose_a,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let gm = read_mat(g.row(r));
                        let mb = read_mat(bv.row(r));
                        let d = if *transpose_a {
                            mb * gm.transpose()
                        } else {
                            gm * mb.transpose()
                        };
                        add_mat(ga.row_mut(r), &d);
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        let gm = read_mat(g.row(r));
                        let ma = read_mat(av.row(r));
                        let d = if *transpose_a { ma * gm } else { ma.transpose() * gm };
                        add_mat(gb.row_mut(r), &d);
                    }
                });
            }
            Op::FrameApply {
                rot,
                trans,
                points,
                inverse,
            } => {
                let (rv, tv, pv) = (self.value(*rot), self.value(*trans), self.value(*points));
                let rows = pv.rows();
                let mut g_rot = Tensor::zeros(rows, 9);
                let mut g_trans = Tensor::zeros(rows, 3);
                let mut g_pts = Tensor::zeros(rows, pv.cols());
                for r in 0..rows {
                    let m = read_mat(rv.row(r));
                    let x = nalgebra::Vector3::from_column_slice(tv.row(r));
                    let mut dm = Matrix3::zeros();
                    let mut dx = nalgebra::Vector3::zeros();
                    for (c, (p_in, go)) in pv.row(r).chunks(3).zip(g.row(r).chunks(3)).enumerate() {
                        let p = nalgebra::Vector3::from_column_slice(p_in);
                        let gv = nalgebra::Vector3::from_column_slice(go);
                        let dp = if *inverse {
                            // out = mᵀ(p − x)
                            dm += (p - x) * gv.transpose();
                            let back = m * gv;
                            dx -= back;
                            back
                        } else {
                            dm += gv * p.transpose();
                            dx += gv;
                            m.transpose() * gv
                        };
                        g_pts.row_mut(r)[3 * c..3 * c + 3].copy_from_slice(dp.as_slice());
                    }
                    write_mat(g_rot.row_mut(r), &dm);
                    g_trans.row_mut(r).copy_from_slice(dx.as_slice());
                }
                self.accumulate(grads, *rot, g_rot);
                self.accumulate(grads, *trans, g_trans);
                self.accumulate(grads, *points, g_pts);
            }
            Op::Surface {
                points,
                ligand,
                rho,
            } => {
                let pv = self.value(*points);
                self.accumulate_with(grads, *points, |gp| {
                    let mut weights = vec![0.0; ligand.len()];
                    for r in 0..pv.rows() {
                        let p = pv.row(r);
                        surface_value_with_weights(p, ligand, *rho, Some(&mut weights));
                        let s = g.data()[r];
                        for (w, a) in weights.iter().zip(ligand) {
                            for d in 0..3 {
                                gp.row_mut(r)[d] += s * 2.0 * w * (p[d] - a[d]);
                            }
                        }
                    }
                });
            }
            Op::PointDistances { points, targets } => {
                let pv = self.value(*points);
                let dist = &node.value;
                self.accumulate_with(grads, *points, |gp| {
                    for r in 0..pv.rows() {
                        for (j, t) in targets.iter().enumerate() {
                            let d = dist.get(r, j);
                            if d == 0.0 {
                                continue;
                            }
                            let s = g.get(r, j) / d;
                            for c in 0..3 {
                                gp.row_mut(r)[c] += s * (pv.get(r, c) - t[c]);
                            }
                        }
                    }
                });
            }
        }
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        y: &Tensor,
        g: &Tensor,
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let av = self.value(a);
        self.accumulate_with(grads, a, |ga| {
            for (((o, gi), x), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(y.data()) {
                *o += gi * deriv(*x, *yi);
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: &AttentionShape,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let AttentionShape {
            blocks,
            query_len: lq,
            key_len: lk,
            heads,
            scale,
        } = *shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
        let dk = qc / heads;
        let dv = vc / heads;
        let oc = heads * dv;
        let mut gq = Tensor::zeros(qv.rows(), qc);
        let mut gk = Tensor::zeros(kv.rows(), kc);
        let mut gv = Tensor::zeros(vv.rows(), vc);
        let mut gbias = bias.map(|_| Tensor::zeros(blocks * lq * lk, heads));
        let mut dp = vec![0.0; lq * lk];
        for b in 0..blocks {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * lq * lk..][..lq * lk];
                let g_off = b * lq * oc + h * dv;
                // dP = dO · Vᵀ
                gemm(
                    lq,
                    dv,
                    lk,
                    1.0,
                    (&g.data()[g_off..], oc, 1),
                    (&vv.data()[b * lk * vc + h * dv..], 1, vc),
                    0.0,
                    (&mut dp, lk, 1),
                );
                // dV += Pᵀ · dO
                gemm(
                    lk,
                    lq,
                    dv,
                    1.0,
                    (p, 1, lk),
                    (&g.data()[g_off..], oc, 1),
                    1.0,
                    (&mut gv.data_mut()[b * lk * vc + h * dv..], vc, 1),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..lq {
                    let prow = &p[i * lk..(i + 1) * lk];
                    let drow = &mut dp[i * lk..(i + 1) * lk];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (d, pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                if let Some(gb) = gbias.as_mut() {
                    for i in 0..lq {
                        for j in 0..lk {
                            let idx = ((b * lq + i) * lk + j) * heads + h;
                            gb.data_mut()[idx] += dp[i * lk + j];
                        }
                    }
                }
                // dQ += scale · dS · K
                gemm(
                    lq,
                    lk,
                    dk,
                    scale,
                    (&dp, lk, 1),
                    (&kv.data()[b * lk * kc + h * dk..], kc, 1),
                    1.0,
                    (&mut gq.data_mut()[b * lq * qc + h * dk..], qc, 1),
                );
                // dK += scale · dSᵀ · Q
                gemm(
                    lk,
                    lq,
                    dk,
                    scale,
                    (&dp, 1, lk),
                    (&qv.data()[b * lq * qc + h * dk..], qc, 1),
                    1.0,
                    (&mut gk.data_mut()[b * lk * kc + h * dk..], kc, 1),
                );
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
        if let (Some(b), Some(gb)) = (bias, gbias) {
            self.accumulate(grads, b, gb);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn read_mat(row: &[f64]) -> Matrix3<f64> {
    Matrix3::new(
        row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8],
    )
}

fn write_mat(row: &mut [f64], m: &Matrix3<f64>) {
    for a in 0..3 {
        for b in 0..3 {
            row[3 * a + b] = m[(a, b)];
        }
    }
}

fn add_mat(row: &mut [f64], m: &Matrix3<f64>) {
    for a in 0..3 {
        for b in 0..3 {
            row[3 * a + b] += m[(a, b)];
        }
    }
}

/// Surface value at `p`; optionally writes the softmax weights of the atoms.
pub(crate) fn surface_value_with_weights(
    p: &[f64],
    ligand: &[[f64; 3]],
    rho: f64,
    weights: Option<&mut [f64]>,
) -> f64 {
    let exps: Vec<f64> = ligand
        .iter()
        .map(|a| -((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2) + (p[2] - a[2]).powi(2)) / rho)
        .collect();
    let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = exps.iter().map(|e| (e - max).exp()).sum();
    if let Some(w) = weights {
        for (wi, e) in w.iter_mut().zip(&exps) {
            *wi = (e - max).exp() / total;
        }
    }
    -rho * (total.ln() + max)
}

/// d(sin θ/θ)/d(θ²) and d((1−cos θ)/θ²)/d(θ²).
fn rodrigues_derivatives(s: f64) -> (f64, f64) {
    if s < 1e-3 {
        (
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        )
    } else {
        let th = s.sqrt();
        let (sin, cos) = th.sin_cos();
        (
            (th * cos - sin) / (2.0 * th * s),
            (th * sin - 2.0 * (1.0 - cos)) / (2.0 * s * s),
        )
    }
}

fn frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Vector-Jacobian product of the exponential map at `v` for upstream `g`.
fn so3_exp_vjp(v: &[f64], g: &Matrix3<f64>) -> [f64; 3] {
    let vec = nalgebra::Vector3::from_column_slice(v);
    let s = vec.norm_squared();
    let (a, b) = rodrigues_coefficients(s);
    let (da, db) = rodrigues_derivatives(s);
    let k = crate::geometry::hat(&vec);
    let k2 = k * k;
    let gk = frob(g, &k);
    let gk2 = frob(g, &k2);
    std::array::from_fn(|i| {
        let e = crate::geometry::hat(&nalgebra::Vector3::ith(i, 1.0));
        da * 2.0 * v[i] * gk + a * frob(g, &e) + db * 2.0 * v[i] * gk2 + b * frob(g, &(e * k + k * e))
    })
}

/// Vector-Jacobian product of the logarithm at `m` for upstream `g` (3-vector).
///
/// Differentiates the kernel formula v = f(θ)·w with w = (m − mᵀ)^∨,
/// θ = atan2(|w|/2, (tr m − 1)/2) and f(θ) = θ / (2 sin θ), so the result is
/// exact for arbitrary 3×3 inputs, not only for rotations.
fn so3_log_vjp(m: &Matrix3<f64>, g: &[f64]) -> Matrix3<f64> {
    let w = nalgebra::Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let raw_cos = 0.5 * (m.trace() - 1.0);
    let cos = raw_cos.clamp(-1.0, 1.0);
    let norm_w = w.norm();
    let sin = 0.5 * norm_w;
    let theta = sin.atan2(cos);
    let (f, df) = if theta < 1e-3 {
        let t2 = theta * theta;
        (0.5 + t2 / 12.0, theta / 6.0 + 7.0 * theta * t2 / 360.0)
    } else {
        let st = theta.sin();
        if st < 1e-9 {
            return Matrix3::zeros();
        }
        (
            theta / (2.0 * st),
            (st - theta * theta.cos()) / (2.0 * st * st),
        )
    };
    let gv = nalgebra::Vector3::from_column_slice(g);
    let alpha = gv.dot(&w) * df;
    let radius_sq = sin * sin + cos * cos;
    let mut u = gv * f;
    if norm_w > 0.0 && radius_sq > 0.0 {
        u += w * (alpha * cos / radius_sq * 0.5 / norm_w);
    }
    let mut d = Matrix3::zeros();
    d[(2, 1)] += u[0];
    d[(1, 2)] -= u[0];
    d[(0, 2)] += u[1];
    d[(2, 0)] -= u[1];
    d[(1, 0)] += u[2];
    d[(0, 1)] -= u[2];
    if raw_cos.abs() < 1.0 && radius_sq > 0.0 {
        let diag = -alpha * sin / radius_sq * 0.5;
        for i in 0..3 {
            d[(i, i)] += diag;
        }
    }
    d
}

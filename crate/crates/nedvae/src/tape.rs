//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the
//! tape in reverse. The op set is exactly what the encoders, decoders and
//! loss terms need — no broadcasting rules beyond the few fixed patterns
//! below. Shape mismatches are contract violations and panic; non-finite
//! values are runtime conditions and surface as [`TapeError::Numeric`] with
//! the offending op named.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(pub(crate) usize);

#[derive(Error, Debug, Clone)]
pub enum TapeError {
    #[error("non-scalar loss: backward expects shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {op} (node {node})")]
    Numeric { op: &'static str, node: usize },
    #[error("non-finite gradient flowing into {op} (node {node})")]
    NumericGrad { op: &'static str, node: usize },
}

enum Op<T: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    AddN(Vec<VarId>),
    Scale(VarId, T),
    AddScalar(VarId, T),
    MatMul(VarId, VarId),
    /// Broadcast-add a `[c]` vector over the last axis of a rank-2/3 tensor.
    AddLastBroadcast(VarId, VarId),
    LeakyRelu(VarId, T),
    Sigmoid(VarId),
    Exp(VarId),
    Ln(VarId),
    Square(VarId),
    Clamp(VarId, T, T),
    SumAll(VarId),
    /// Row sums of a rank-2 tensor: `[m, n] -> [m]`.
    SumCols(VarId),
    /// Column means of a rank-2 tensor: `[m, n] -> [n]`.
    MeanRows(VarId),
    RepeatRows(VarId, usize),
    ConcatCols(VarId, VarId),
    SliceCols(VarId, usize, usize),
    SliceRows(VarId, usize, usize),
    /// `[n, m, c] -> [n, c]`, summing over the middle axis.
    RowSum3d(VarId),
    /// `[n, m, c] -> [m, c]`, summing over the first axis.
    ColSum3d(VarId),
    /// `out[i][j] = p[i] + q[j]` for `p, q: [n, c]`.
    OuterSum(VarId, VarId),
    Transpose12(VarId),
    Reshape(VarId),
    StackRows(Vec<VarId>),
    /// Pairwise diagonal-Gaussian log densities;
    /// `out[i][j][d] = log N(z[i][d]; mu[j][d], exp(logvar[j][d]))`.
    PairwiseGaussLl(VarId, VarId, VarId),
    /// `[b, b, l] -> [b, b]`, summing the last axis over `[s, e)`.
    SumLastRange(VarId, usize, usize),
    /// Log-sum-exp over the second axis of a rank-2 tensor: `[m, n] -> [m]`.
    LogSumExpCols(VarId),
    Diag(VarId),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    label: &'static str,
}

/// Gradients produced by a backward pass, indexed by [`VarId`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: VarId) -> Option<&Tensor<T>> {
        self.adjoints[v.0].as_ref()
    }

    /// Gradient for `v`, materializing zeros when the loss never touched it.
    pub fn get_or_zeros(&self, v: VarId, shape: &[usize]) -> Tensor<T> {
        match self.adjoints[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    numeric_error: Option<TapeError>,
}

const LN_2PI: f64 = 1.8378770664093453;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            numeric_error: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite value observed during forward evaluation, if any.
    pub fn numeric_error(&self) -> Option<&TapeError> {
        self.numeric_error.as_ref()
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that participates in differentiation (parameters, probes).
    pub fn var(&mut self, value: Tensor<T>) -> VarId {
        self.push("leaf", Op::Leaf, value, true)
    }

    /// Leaf treated as a constant (data, masks, noise draws).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push("const", Op::Leaf, value, false)
    }

    fn push(&mut self, label: &'static str, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> VarId {
        if self.numeric_error.is_none() && !value.all_finite() {
            self.numeric_error = Some(TapeError::Numeric {
                op: label,
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        // label kept for error traces
            label,
        });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise and scalar ops -------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.requires(&[a, b]);
        self.push("add", Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.requires(&[a, b]);
        self.push("sub", Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.requires(&[a, b]);
        self.push("mul", Op::Mul(a, b), out, rg)
    }

    pub fn add_n(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "add_n: empty term list");
        let shape = self.nodes[ids[0].0].value.shape().to_vec();
        let mut data = vec![T::ZERO; shape.iter().product()];
        for v in ids {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape(), &shape[..], "add_n: shape mismatch");
            for (d, &x) in data.iter_mut().zip(t.data()) {
                *d += x;
            }
        }
        let rg = self.requires(ids);
        self.push("add_n", Op::AddN(ids.to_vec()), Tensor::new(shape, data), rg)
    }

    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.requires(&[a]);
        self.push("scale", Op::Scale(a, c), out, rg)
    }

    pub fn add_scalar(&mut self, a: VarId, c: T) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v + c);
        let rg = self.requires(&[a]);
        self.push("add_scalar", Op::AddScalar(a, c), out, rg)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: T) -> VarId {
        let out = self.nodes[a.0].value.map(|v| if v > T::ZERO { v } else { v * slope });
        let rg = self.requires(&[a]);
        self.push("leaky_relu", Op::LeakyRelu(a, slope), out, rg)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.map(|v| T::ONE / (T::ONE + (-v).exp()));
        let rg = self.requires(&[a]);
        self.push("sigmoid", Op::Sigmoid(a), out, rg)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v.exp());
        let rg = self.requires(&[a]);
        self.push("exp", Op::Exp(a), out, rg)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v.ln());
        let rg = self.requires(&[a]);
        self.push("ln", Op::Ln(a), out, rg)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v * v);
        let rg = self.requires(&[a]);
        self.push("square", Op::Square(a), out, rg)
    }

    /// Clamp values to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: VarId, lo: T, hi: T) -> VarId {
        let out = self.nodes[a.0].value.map(|v| v.maximum(lo).minimum(hi));
        let rg = self.requires(&[a]);
        self.push("clamp", Op::Clamp(a, lo, hi), out, rg)
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product. A rank-1 lhs `[k]` is treated as `[1, k]` and the
    /// result flattened back to rank 1.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rank(), 2, "matmul: rhs must be rank 2");
        let vec_lhs = va.rank() == 1;
        let (m, k) = if vec_lhs {
            (1, va.shape()[0])
        } else {
            assert_eq!(va.rank(), 2, "matmul: lhs must be rank 1 or 2");
            (va.shape()[0], va.shape()[1])
        };
        assert_eq!(k, vb.shape()[0], "matmul: inner dimensions disagree");
        let n = vb.shape()[1];
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let shape = if vec_lhs { vec![n] } else { vec![m, n] };
        let rg = self.requires(&[a, b]);
        self.push("matmul", Op::MatMul(a, b), Tensor::new(shape, out), rg)
    }

    /// Add a `[c]` bias over the last axis of a rank-1/2/3 tensor.
    pub fn add_last_broadcast(&mut self, a: VarId, bias: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.rank(), 1, "add_last_broadcast: bias must be rank 1");
        let c = vb.shape()[0];
        assert_eq!(
            *va.shape().last().expect("add_last_broadcast: scalar input"),
            c,
            "add_last_broadcast: last axis mismatch"
        );
        let bdat = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % c])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.requires(&[a, bias]);
        self.push("add_last_broadcast", Op::AddLastBroadcast(a, bias), out, rg)
    }

    // ---- reductions and shaping -----------------------------------------

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let mut s = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let rg = self.requires(&[a]);
        self.push("sum_all", Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn sum_cols(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "sum_cols: rank-2 input required");
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![T::ZERO; m];
        for i in 0..m {
            for j in 0..n {
                out[i] += va.data()[i * n + j];
            }
        }
        let rg = self.requires(&[a]);
        self.push("sum_cols", Op::SumCols(a), Tensor::vector(out), rg)
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "mean_rows: rank-2 input required");
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert!(m > 0, "mean_rows: zero rows");
        let inv = T::from_f64(1.0 / m as f64);
        let mut out = vec![T::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += va.data()[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.requires(&[a]);
        self.push("mean_rows", Op::MeanRows(a), Tensor::vector(out), rg)
    }

    /// Replicate a `[c]` vector into `[rows, c]`.
    pub fn repeat_rows(&mut self, a: VarId, rows: usize) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 1, "repeat_rows: rank-1 input required");
        let c = va.shape()[0];
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(va.data());
        }
        let rg = self.requires(&[a]);
        self.push(
            "repeat_rows",
            Op::RepeatRows(a, rows),
            Tensor::new(vec![rows, c], data),
            rg,
        )
    }

    /// Concatenate along the last axis (rank-1 or rank-2 inputs).
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), vb.rank(), "concat_cols: rank mismatch");
        let out = match va.rank() {
            1 => {
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::vector(data)
            }
            2 => {
                assert_eq!(va.shape()[0], vb.shape()[0], "concat_cols: row mismatch");
                let (m, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut data = Vec::with_capacity(m * (ca + cb));
                for i in 0..m {
                    data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
                }
                Tensor::new(vec![m, ca + cb], data)
            }
            r => panic!("concat_cols: unsupported rank {r}"),
        };
        let rg = self.requires(&[a, b]);
        self.push("concat_cols", Op::ConcatCols(a, b), out, rg)
    }

    /// Slice `[s, e)` of the last axis (rank-1 or rank-2 inputs).
    pub fn slice_cols(&mut self, a: VarId, s: usize, e: usize) -> VarId {
        let va = &self.nodes[a.0].value;
        let out = match va.rank() {
            1 => {
                assert!(e <= va.shape()[0] && s <= e, "slice_cols: out of range");
                Tensor::vector(va.data()[s..e].to_vec())
            }
            2 => {
                let (m, c) = (va.shape()[0], va.shape()[1]);
                assert!(e <= c && s <= e, "slice_cols: out of range");
                let mut data = Vec::with_capacity(m * (e - s));
                for i in 0..m {
                    data.extend_from_slice(&va.data()[i * c + s..i * c + e]);
                }
                Tensor::new(vec![m, e - s], data)
            }
            r => panic!("slice_cols: unsupported rank {r}"),
        };
        let rg = self.requires(&[a]);
        self.push("slice_cols", Op::SliceCols(a, s, e), out, rg)
    }

    /// Slice rows `[s, e)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: VarId, s: usize, e: usize) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "slice_rows: rank-2 input required");
        let (m, c) = (va.shape()[0], va.shape()[1]);
        assert!(e <= m && s <= e, "slice_rows: out of range");
        let data = va.data()[s * c..e * c].to_vec();
        let rg = self.requires(&[a]);
        self.push(
            "slice_rows",
            Op::SliceRows(a, s, e),
            Tensor::new(vec![e - s, c], data),
            rg,
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            va.len(),
            "reshape: element count mismatch"
        );
        let out = Tensor::new(shape, va.data().to_vec());
        let rg = self.requires(&[a]);
        self.push("reshape", Op::Reshape(a), out, rg)
    }

    pub fn stack_rows(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "stack_rows: empty input");
        let c = self.nodes[ids[0].0].value.len();
        let mut data = Vec::with_capacity(ids.len() * c);
        for v in ids {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.rank(), 1, "stack_rows: rank-1 inputs required");
            assert_eq!(t.len(), c, "stack_rows: length mismatch");
            data.extend_from_slice(t.data());
        }
        let rg = self.requires(ids);
        self.push(
            "stack_rows",
            Op::StackRows(ids.to_vec()),
            Tensor::new(vec![ids.len(), c], data),
            rg,
        )
    }

    // ---- edge-tensor ops -------------------------------------------------

    pub fn row_sum_3d(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 3, "row_sum_3d: rank-3 input required");
        let (n, m, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n {
            for j in 0..m {
                for ch in 0..c {
                    out[i * c + ch] += va.data()[(i * m + j) * c + ch];
                }
            }
        }
        let rg = self.requires(&[a]);
        self.push("row_sum_3d", Op::RowSum3d(a), Tensor::new(vec![n, c], out), rg)
    }

    pub fn col_sum_3d(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 3, "col_sum_3d: rank-3 input required");
        let (n, m, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut out = vec![T::ZERO; m * c];
        for i in 0..n {
            for j in 0..m {
                for ch in 0..c {
                    out[j * c + ch] += va.data()[(i * m + j) * c + ch];
                }
            }
        }
        let rg = self.requires(&[a]);
        self.push("col_sum_3d", Op::ColSum3d(a), Tensor::new(vec![m, c], out), rg)
    }

    pub fn outer_sum(&mut self, p: VarId, q: VarId) -> VarId {
        let (vp, vq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        assert_eq!(vp.rank(), 2, "outer_sum: rank-2 inputs required");
        assert_eq!(vp.shape(), vq.shape(), "outer_sum: shape mismatch");
        let (n, c) = (vp.shape()[0], vp.shape()[1]);
        let mut out = vec![T::ZERO; n * n * c];
        for i in 0..n {
            for j in 0..n {
                for ch in 0..c {
                    out[(i * n + j) * c + ch] = vp.data()[i * c + ch] + vq.data()[j * c + ch];
                }
            }
        }
        let rg = self.requires(&[p, q]);
        self.push(
            "outer_sum",
            Op::OuterSum(p, q),
            Tensor::new(vec![n, n, c], out),
            rg,
        )
    }

    /// Swap the first two axes of a square rank-3 tensor.
    pub fn transpose12(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 3, "transpose12: rank-3 input required");
        let (n, m, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(n, m, "transpose12: square first axes required");
        let mut out = vec![T::ZERO; n * n * c];
        for i in 0..n {
            for j in 0..n {
                for ch in 0..c {
                    out[(j * n + i) * c + ch] = va.data()[(i * n + j) * c + ch];
                }
            }
        }
        let rg = self.requires(&[a]);
        self.push(
            "transpose12",
            Op::Transpose12(a),
            Tensor::new(vec![n, n, c], out),
            rg,
        )
    }

    // ---- density estimation ops -------------------------------------------

    /// `out[i][j][d] = log N(z[i][d]; mu[j][d], exp(logvar[j][d]))` for
    /// `z, mu, logvar: [b, l]`.
    pub fn pairwise_gauss_ll(&mut self, z: VarId, mu: VarId, logvar: VarId) -> VarId {
        let (vz, vm, vl) = (
            &self.nodes[z.0].value,
            &self.nodes[mu.0].value,
            &self.nodes[logvar.0].value,
        );
        assert_eq!(vz.rank(), 2, "pairwise_gauss_ll: rank-2 inputs required");
        assert_eq!(vz.shape(), vm.shape(), "pairwise_gauss_ll: shape mismatch");
        assert_eq!(vz.shape(), vl.shape(), "pairwise_gauss_ll: shape mismatch");
        let (b, l) = (vz.shape()[0], vz.shape()[1]);
        let half = T::from_f64(0.5);
        let ln2pi = T::from_f64(LN_2PI);
        let mut out = vec![T::ZERO; b * b * l];
        for i in 0..b {
            for j in 0..b {
                for d in 0..l {
                    let diff = vz.data()[i * l + d] - vm.data()[j * l + d];
                    let lv = vl.data()[j * l + d];
                    out[(i * b + j) * l + d] = -half * (diff * diff * (-lv).exp() + lv + ln2pi);
                }
            }
        }
        let rg = self.requires(&[z, mu, logvar]);
        self.push(
            "pairwise_gauss_ll",
            Op::PairwiseGaussLl(z, mu, logvar),
            Tensor::new(vec![b, b, l], out),
            rg,
        )
    }

    pub fn sum_last_range(&mut self, a: VarId, s: usize, e: usize) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 3, "sum_last_range: rank-3 input required");
        let (n, m, l) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert!(e <= l && s < e, "sum_last_range: invalid range");
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                for d in s..e {
                    out[i * m + j] += va.data()[(i * m + j) * l + d];
                }
            }
        }
        let rg = self.requires(&[a]);
        self.push(
            "sum_last_range",
            Op::SumLastRange(a, s, e),
            Tensor::new(vec![n, m], out),
            rg,
        )
    }

    /// Numerically stable log-sum-exp over the second axis: `[m, n] -> [m]`.
    pub fn logsumexp_cols(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "logsumexp_cols: rank-2 input required");
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert!(n > 0, "logsumexp_cols: empty rows");
        let mut out = vec![T::ZERO; m];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut s = T::ZERO;
            for &v in row.iter() {
                s += (v - mx).exp();
            }
            out[i] = mx + s.ln();
        }
        let rg = self.requires(&[a]);
        self.push("logsumexp_cols", Op::LogSumExpCols(a), Tensor::vector(out), rg)
    }

    pub fn diag(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "diag: rank-2 input required");
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert_eq!(m, n, "diag: square input required");
        let out = (0..m).map(|i| va.data()[i * n + i]).collect();
        let rg = self.requires(&[a]);
        self.push("diag", Op::Diag(a), Tensor::vector(out), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>, TapeError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1] {
            return Err(TapeError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(T::ONE))])
    }

    /// Reverse pass seeded with explicit adjoints on arbitrary nodes. Used by
    /// the trainer to chain a batch-level tape into per-sample tapes.
    pub fn backward_seeded(&self, seeds: &[(VarId, Tensor<T>)]) -> Result<Gradients<T>, TapeError> {
        if let Some(err) = &self.numeric_error {
            return Err(err.clone());
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.nodes[v.0].value.shape(),
                "backward seed shape mismatch"
            );
            accumulate(&mut adj[v.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(out_grad) = adj[idx].take() else {
                continue;
            };
            if !out_grad.all_finite() {
                return Err(TapeError::NumericGrad {
                    op: node.label,
                    node: idx,
                });
            }
            self.propagate(idx, &out_grad, &mut adj);
            adj[idx] = Some(out_grad);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let needs = |v: VarId| self.nodes[v.0].requires_grad;
        let send = |v: VarId, t: Tensor<T>, adj: &mut [Option<Tensor<T>>]| {
            accumulate(&mut adj[v.0], t);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, g.clone(), adj);
                }
                if needs(*b) {
                    send(*b, g.clone(), adj);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    send(*a, g.clone(), adj);
                }
                if needs(*b) {
                    send(*b, g.map(|v| -v), adj);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = &self.nodes[b.0].value;
                    let data = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
                if needs(*b) {
                    let va = &self.nodes[a.0].value;
                    let data = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::AddN(ids) => {
                for v in ids {
                    if needs(*v) {
                        send(*v, g.clone(), adj);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = *c;
                    send(*a, g.map(|v| v * c), adj);
                }
            }
            Op::AddScalar(a, _) => {
                if needs(*a) {
                    send(*a, g.clone(), adj);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let vec_lhs = va.rank() == 1;
                let (m, k) = if vec_lhs {
                    (1, va.shape()[0])
                } else {
                    (va.shape()[0], va.shape()[1])
                };
                let n = vb.shape()[1];
                if needs(*a) {
                    // dA = G @ B^T
                    let mut da = vec![T::ZERO; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gij * vb.data()[p * n + j];
                            }
                        }
                    }
                    let shape = if vec_lhs { vec![k] } else { vec![m, k] };
                    send(*a, Tensor::new(shape, da), adj);
                }
                if needs(*b) {
                    // dB = A^T @ G
                    let mut db = vec![T::ZERO; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                    send(*b, Tensor::new(vec![k, n], db), adj);
                }
            }
            Op::AddLastBroadcast(a, bias) => {
                if needs(*a) {
                    send(*a, g.clone(), adj);
                }
                if needs(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut db = vec![T::ZERO; c];
                    for (i, &x) in g.data().iter().enumerate() {
                        db[i % c] += x;
                    }
                    send(*bias, Tensor::vector(db), adj);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let slope = *slope;
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gd, &x)| if x > T::ZERO { gd } else { gd * slope })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gd, &s)| gd * s * (T::ONE - s))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let out = &node.value;
                    let data = g.data().iter().zip(out.data()).map(|(&gd, &e)| gd * e).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::Ln(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let data = g.data().iter().zip(va.data()).map(|(&gd, &x)| gd / x).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::Square(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let two = T::from_f64(2.0);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gd, &x)| gd * two * x)
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gd, &x)| if x > lo && x < hi { gd } else { T::ZERO })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data), adj);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let s = g.item();
                    send(*a, Tensor::filled(va.shape().to_vec(), s), adj);
                }
            }
            Op::SumCols(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.shape()[0], va.shape()[1]);
                    let mut da = vec![T::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g.data()[i];
                        }
                    }
                    send(*a, Tensor::new(vec![m, n], da), adj);
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.shape()[0], va.shape()[1]);
                    let inv = T::from_f64(1.0 / m as f64);
                    let mut da = vec![T::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g.data()[j] * inv;
                        }
                    }
                    send(*a, Tensor::new(vec![m, n], da), adj);
                }
            }
            Op::RepeatRows(a, rows) => {
                if needs(*a) {
                    let c = self.nodes[a.0].value.len();
                    let mut da = vec![T::ZERO; c];
                    for r in 0..*rows {
                        for j in 0..c {
                            da[j] += g.data()[r * c + j];
                        }
                    }
                    send(*a, Tensor::vector(da), adj);
                }
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                match va.rank() {
                    1 => {
                        let ca = va.len();
                        if needs(*a) {
                            send(*a, Tensor::vector(g.data()[..ca].to_vec()), adj);
                        }
                        if needs(*b) {
                            send(*b, Tensor::vector(g.data()[ca..].to_vec()), adj);
                        }
                    }
                    2 => {
                        let (m, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                        let c = ca + cb;
                        if needs(*a) {
                            let mut da = Vec::with_capacity(m * ca);
                            for i in 0..m {
                                da.extend_from_slice(&g.data()[i * c..i * c + ca]);
                            }
                            send(*a, Tensor::new(vec![m, ca], da), adj);
                        }
                        if needs(*b) {
                            let mut db = Vec::with_capacity(m * cb);
                            for i in 0..m {
                                db.extend_from_slice(&g.data()[i * c + ca..(i + 1) * c]);
                            }
                            send(*b, Tensor::new(vec![m, cb], db), adj);
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::SliceCols(a, s, e) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.shape().to_vec());
                    match va.rank() {
                        1 => {
                            da.data_mut()[*s..*e].copy_from_slice(g.data());
                        }
                        2 => {
                            let (m, c) = (va.shape()[0], va.shape()[1]);
                            let w = e - s;
                            for i in 0..m {
                                da.data_mut()[i * c + s..i * c + e]
                                    .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                            }
                        }
                        _ => unreachable!(),
                    }
                    send(*a, da, adj);
                }
            }
            Op::SliceRows(a, s, e) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let c = va.shape()[1];
                    let mut da = Tensor::zeros(va.shape().to_vec());
                    da.data_mut()[s * c..e * c].copy_from_slice(g.data());
                    send(*a, da, adj);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    send(*a, Tensor::new(va.shape().to_vec(), g.data().to_vec()), adj);
                }
            }
            Op::StackRows(ids) => {
                let c = self.nodes[ids[0].0].value.len();
                for (r, v) in ids.iter().enumerate() {
                    if needs(*v) {
                        send(*v, Tensor::vector(g.data()[r * c..(r + 1) * c].to_vec()), adj);
                    }
                }
            }
            Op::RowSum3d(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (n, m, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut da = vec![T::ZERO; n * m * c];
                    for i in 0..n {
                        for j in 0..m {
                            for ch in 0..c {
                                da[(i * m + j) * c + ch] = g.data()[i * c + ch];
                            }
                        }
                    }
                    send(*a, Tensor::new(vec![n, m, c], da), adj);
                }
            }
            Op::ColSum3d(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (n, m, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut da = vec![T::ZERO; n * m * c];
                    for i in 0..n {
                        for j in 0..m {
                            for ch in 0..c {
                                da[(i * m + j) * c + ch] = g.data()[j * c + ch];
                            }
                        }
                    }
                    send(*a, Tensor::new(vec![n, m, c], da), adj);
                }
            }
            Op::OuterSum(p, q) => {
                let n = self.nodes[p.0].value.shape()[0];
                let c = self.nodes[p.0].value.shape()[1];
                if needs(*p) {
                    let mut dp = vec![T::ZERO; n * c];
                    for i in 0..n {
                        for j in 0..n {
                            for ch in 0..c {
                                dp[i * c + ch] += g.data()[(i * n + j) * c + ch];
                            }
                        }
                    }
                    send(*p, Tensor::new(vec![n, c], dp), adj);
                }
                if needs(*q) {
                    let mut dq = vec![T::ZERO; n * c];
                    for i in 0..n {
                        for j in 0..n {
                            for ch in 0..c {
                                dq[j * c + ch] += g.data()[(i * n + j) * c + ch];
                            }
                        }
                    }
                    send(*q, Tensor::new(vec![n, c], dq), adj);
                }
            }
            Op::Transpose12(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (n, c) = (va.shape()[0], va.shape()[2]);
                    let mut da = vec![T::ZERO; n * n * c];
                    for i in 0..n {
                        for j in 0..n {
                            for ch in 0..c {
                                da[(i * n + j) * c + ch] = g.data()[(j * n + i) * c + ch];
                            }
                        }
                    }
                    send(*a, Tensor::new(va.shape().to_vec(), da), adj);
                }
            }
            Op::PairwiseGaussLl(z, mu, logvar) => {
                let (vz, vm, vl) = (
                    &self.nodes[z.0].value,
                    &self.nodes[mu.0].value,
                    &self.nodes[logvar.0].value,
                );
                let (b, l) = (vz.shape()[0], vz.shape()[1]);
                let half = T::from_f64(0.5);
                let mut dz = vec![T::ZERO; b * l];
                let mut dm = vec![T::ZERO; b * l];
                let mut dl = vec![T::ZERO; b * l];
                for i in 0..b {
                    for j in 0..b {
                        for d in 0..l {
                            let gd = g.data()[(i * b + j) * l + d];
                            if gd == T::ZERO {
                                continue;
                            }
                            let diff = vz.data()[i * l + d] - vm.data()[j * l + d];
                            let inv_var = (-vl.data()[j * l + d]).exp();
                            // d ll / d z_id = -(z - mu) / var
                            dz[i * l + d] += gd * (-diff * inv_var);
                            // d ll / d mu_jd = (z - mu) / var
                            dm[j * l + d] += gd * (diff * inv_var);
                            // d ll / d lv_jd = ((z - mu)^2 / var - 1) / 2
                            dl[j * l + d] += gd * half * (diff * diff * inv_var - T::ONE);
                        }
                    }
                }
                if needs(*z) {
                    send(*z, Tensor::new(vec![b, l], dz), adj);
                }
                if needs(*mu) {
                    send(*mu, Tensor::new(vec![b, l], dm), adj);
                }
                if needs(*logvar) {
                    send(*logvar, Tensor::new(vec![b, l], dl), adj);
                }
            }
            Op::SumLastRange(a, s, e) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (n, m, l) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut da = vec![T::ZERO; n * m * l];
                    for i in 0..n {
                        for j in 0..m {
                            let gd = g.data()[i * m + j];
                            for d in *s..*e {
                                da[(i * m + j) * l + d] = gd;
                            }
                        }
                    }
                    send(*a, Tensor::new(vec![n, m, l], da), adj);
                }
            }
            Op::LogSumExpCols(a) => {
                if needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.shape()[0], va.shape()[1]);
                    let out = &node.value;
                    let mut da = vec![T::ZERO; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        let oi = out.data()[i];
                        for j in 0..n {
                            // softmax weights: exp(a_ij - lse_i)
                            da[i * n + j] = gi * (va.data()[i * n + j] - oi).exp();
                        }
                    }
                    send(*a, Tensor::new(vec![m, n], da), adj);
                }
            }
            Op::Diag(a) => {
                if needs(*a) {
                    let n = self.nodes[a.0].value.shape()[0];
                    let mut da = vec![T::ZERO; n * n];
                    for i in 0..n {
                        da[i * n + i] = g.data()[i];
                    }
                    send(*a, Tensor::new(vec![n, n], da), adj);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        None => *slot = Some(t),
        Some(existing) => {
            assert_eq!(existing.shape(), t.shape(), "adjoint shape mismatch");
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

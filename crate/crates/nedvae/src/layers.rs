//! Layer catalog shared by every encoder and decoder: dense layers, the
//! normalized-adjacency graph convolution, and the edge convolution /
//! deconvolution family built from row+column aggregation.

use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of the leaky ReLU used in all hidden layers.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

pub fn activate<T: Scalar>(tape: &mut Tape<T>, x: VarId, act: Activation) -> VarId {
    match act {
        Activation::Identity => x,
        Activation::LeakyRelu => tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE)),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Fully connected layer: `act(x W + b)`. `x` may be `[din]` or `[m, din]`.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: VarId, w: VarId, b: VarId, act: Activation) -> VarId {
    let xw = tape.matmul(x, w);
    let pre = tape.add_last_broadcast(xw, b);
    activate(tape, pre, act)
}

/// Symmetrically normalized adjacency with self-loops from the first edge
/// channel: `D^{-1/2} (A + I) D^{-1/2}` where `A = E[:, :, 0]`.
pub fn normalized_adjacency<T: Scalar>(edge_attr: &Tensor<T>) -> Tensor<T> {
    assert_eq!(edge_attr.rank(), 3, "normalized_adjacency: rank-3 edge tensor");
    let n = edge_attr.shape()[0];
    assert_eq!(n, edge_attr.shape()[1], "normalized_adjacency: square tensor");
    let mut a_hat = Tensor::<T>::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { T::ONE } else { edge_attr.at3(i, j, 0) };
            a_hat.set2(i, j, v);
        }
    }
    // Row sums are >= 1 thanks to the self-loop, so the rsqrt is safe.
    let mut d_inv_sqrt = vec![T::ZERO; n];
    for i in 0..n {
        let mut s = T::ZERO;
        for j in 0..n {
            s += a_hat.at2(i, j);
        }
        d_inv_sqrt[i] = T::ONE / s.sqrt();
    }
    let mut out = Tensor::<T>::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set2(i, j, d_inv_sqrt[i] * a_hat.at2(i, j) * d_inv_sqrt[j]);
        }
    }
    out
}

/// Graph convolution: `act(Â_norm H W)` with a precomputed normalized
/// adjacency (`norm_adj` is data, not a differentiable input).
pub fn graph_conv<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    norm_adj: VarId,
    w: VarId,
    act: Activation,
) -> VarId {
    assert_eq!(
        tape.shape(norm_adj)[0],
        tape.shape(h)[0],
        "graph_conv: node counts disagree"
    );
    let agg = tape.matmul(norm_adj, h);
    let pre = tape.matmul(agg, w);
    activate(tape, pre, act)
}

/// Edge-to-edge convolution. Aggregates each edge's row (outgoing) and
/// column (incoming) neighborhoods:
/// `out[i][j] = act(sum_k H[i][k] W_r + sum_k H[k][j] W_c + b)`.
pub fn edge_to_edge_conv<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    w_row: VarId,
    w_col: VarId,
    b: VarId,
    act: Activation,
) -> VarId {
    let r = tape.row_sum_3d(h);
    let c = tape.col_sum_3d(h);
    let p = tape.matmul(r, w_row);
    let q = tape.matmul(c, w_col);
    let o = tape.outer_sum(p, q);
    let pre = tape.add_last_broadcast(o, b);
    activate(tape, pre, act)
}

/// Edge-to-node pooling: `node_i = act(sum_j (H[i][j] + H[j][i]) / 2 W + b)`.
pub fn edge_to_node_pool<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    w: VarId,
    b: VarId,
    act: Activation,
) -> VarId {
    let r = tape.row_sum_3d(h);
    let c = tape.col_sum_3d(h);
    let s = tape.add(r, c);
    let half = tape.scale(s, T::from_f64(0.5));
    dense(tape, half, w, b, act)
}

/// Node-to-edge deconvolution: `out[i][j] = act([U[i]; U[j]] W + b)`.
/// `w` stacks the two halves: rows `[0, c_in)` weight the first endpoint,
/// rows `[c_in, 2 c_in)` the second.
pub fn node_to_edge_deconv<T: Scalar>(
    tape: &mut Tape<T>,
    u: VarId,
    w: VarId,
    b: VarId,
    act: Activation,
) -> VarId {
    let c_in = tape.shape(u)[1];
    assert_eq!(
        tape.shape(w)[0],
        2 * c_in,
        "node_to_edge_deconv: weight rows must be 2*c_in"
    );
    let w_top = tape.slice_rows(w, 0, c_in);
    let w_bot = tape.slice_rows(w, c_in, 2 * c_in);
    let p = tape.matmul(u, w_top);
    let q = tape.matmul(u, w_bot);
    let o = tape.outer_sum(p, q);
    let pre = tape.add_last_broadcast(o, b);
    activate(tape, pre, act)
}

/// Edge-to-edge deconvolution: every hidden edge feature contributes to the
/// edges sharing one of its endpoints. Same contract as [`edge_to_edge_conv`].
pub fn edge_to_edge_deconv<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    w_row: VarId,
    w_col: VarId,
    b: VarId,
    act: Activation,
) -> VarId {
    edge_to_edge_conv(tape, h, w_row, w_col, b, act)
}

/// Row-wise 1-D deconvolution: each row mapped independently through the
/// same filter, `out[i] = act(H[i] W + b)`.
pub fn row_deconv1d<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    w: VarId,
    b: VarId,
    act: Activation,
) -> VarId {
    dense(tape, h, w, b, act)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v)
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = tape.var(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.var(Tensor::vector(vec![0.0, 0.0]));
        let y = dense(&mut tape, x, w, b, Activation::Identity);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn dense_leaky_relu_negative_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![-1.0]));
        let w = tape.var(t2(1, 1, vec![1.0]));
        let b = tape.var(Tensor::vector(vec![0.0]));
        let y = dense(&mut tape, x, w, b, Activation::LeakyRelu);
        assert!((tape.value(y).data()[0] - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let y = activate(&mut tape, x, Activation::Sigmoid);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn graph_conv_two_node_hand_value() {
        // A = [[0,1],[1,0]], H = I, W = I, identity activation.
        // A_hat = ones(2,2), degrees 2 -> normalized entries all 1/2.
        let mut tape = Tape::<f64>::new();
        let e = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]);
        let nadj = tape.constant(normalized_adjacency(&e));
        let h = tape.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let w = tape.var(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let y = graph_conv(&mut tape, h, nadj, w, Activation::Identity);
        for &v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_conv_empty_graph_reduces_to_dense_path() {
        let mut tape = Tape::<f64>::new();
        let e = Tensor::<f64>::zeros(vec![3, 3, 1]);
        let nadj = normalized_adjacency(&e);
        // A_hat = I, degrees 1 -> normalized adjacency is exactly I.
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(nadj.at2(i, j), expect);
            }
        }
        let nadj = tape.constant(nadj);
        let h = tape.constant(t2(3, 2, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.9]));
        let w = tape.var(t2(2, 2, vec![1.0, 2.0, -1.0, 0.5]));
        let y = graph_conv(&mut tape, h, nadj, w, Activation::Identity);
        let hw = tape.matmul(h, w);
        assert_eq!(tape.value(y).data(), tape.value(hw).data());
    }

    #[test]
    fn edge_to_edge_conv_hand_value() {
        // N=2, c=1, H = [[0,1],[1,0]], W_r = W_c = 1, b = 0.
        // out[0][1] = (H[0][0]+H[0][1]) + (H[0][1]+H[1][1]) = 1 + 1 = 2.
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]));
        let wr = tape.var(t2(1, 1, vec![1.0]));
        let wc = tape.var(t2(1, 1, vec![1.0]));
        let b = tape.var(Tensor::vector(vec![0.0]));
        let y = edge_to_edge_conv(&mut tape, h, wr, wc, b, Activation::Identity);
        assert_eq!(tape.value(y).at3(0, 1, 0), 2.0);
    }

    #[test]
    fn edge_to_edge_conv_zero_input_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::<f64>::zeros(vec![3, 3, 2]));
        let wr = tape.var(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let wc = tape.var(t2(2, 2, vec![0.5, 0.1, -1.0, 2.0]));
        let b = tape.var(Tensor::vector(vec![0.7, -0.2]));
        let y = edge_to_edge_conv(&mut tape, h, wr, wc, b, Activation::Identity);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(tape.value(y).at3(i, j, 0), 0.7);
                assert_eq!(tape.value(y).at3(i, j, 1), -0.2);
            }
        }
    }

    #[test]
    fn edge_to_node_pool_symmetric_ones() {
        // H all-ones symmetric, W = I: node features equal N pre-activation.
        let n = 4;
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::filled(vec![n, n, 1], 1.0));
        let w = tape.var(t2(1, 1, vec![1.0]));
        let b = tape.var(Tensor::vector(vec![0.0]));
        let y = edge_to_node_pool(&mut tape, h, w, b, Activation::Identity);
        for &v in tape.value(y).data() {
            assert_eq!(v, n as f64);
        }
    }

    #[test]
    fn node_to_edge_deconv_hand_value() {
        // U = [1, 2], W = [1; 1] (stacked halves), b = 0:
        // out[0][1] = [U[0]; U[1]] . [1, 1] = 1 + 2 = 3.
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(t2(2, 1, vec![1.0, 2.0]));
        let w = tape.var(t2(2, 1, vec![1.0, 1.0]));
        let b = tape.var(Tensor::vector(vec![0.0]));
        let y = node_to_edge_deconv(&mut tape, u, w, b, Activation::Identity);
        assert_eq!(tape.value(y).at3(0, 1, 0), 3.0);
    }

    #[test]
    fn node_to_edge_deconv_identical_rows_identical_edges() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(t2(3, 2, vec![0.4, -0.3, 0.4, -0.3, 0.4, -0.3]));
        let w = tape.var(Tensor::<f64>::rand_uniform(
            vec![4, 2],
            0.5,
            &mut seeded(3),
        ));
        let b = tape.var(Tensor::vector(vec![0.1, 0.2]));
        let y = node_to_edge_deconv(&mut tape, u, w, b, Activation::LeakyRelu);
        let v = tape.value(y);
        let first = (v.at3(0, 0, 0), v.at3(0, 0, 1));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!((v.at3(i, j, 0), v.at3(i, j, 1)), first);
            }
        }
    }

    #[test]
    fn row_deconv_single_row_is_dense() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(t2(1, 3, vec![0.1, 0.2, 0.3]));
        let w = tape.var(t2(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = tape.var(Tensor::vector(vec![0.0, 0.0]));
        let y = row_deconv1d(&mut tape, h, w, b, Activation::Identity);
        assert!((tape.value(y).at2(0, 0) - 0.4).abs() < 1e-12);
        assert!((tape.value(y).at2(0, 1) - 0.5).abs() < 1e-12);
    }

    fn seeded(s: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(s)
    }
}

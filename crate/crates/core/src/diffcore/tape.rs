//! Reverse-mode automatic differentiation over a recorded graph of
//! dense-matrix operations.
//!
//! The tape is eager: every op computes its value when pushed. Nodes are
//! batched (whole ray batches per node), so a training step records a
//! few hundred nodes rather than millions of scalar ops. `backward`
//! walks the node list once in reverse and accumulates gradients.

use crate::diffcore::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Per-ray sample layout for the fused volume-rendering node.
///
/// Sample rows are grouped by ray: ray `r` owns inside rows
/// `offsets_in[r]..offsets_in[r+1]` and outside rows
/// `offsets_out[r]..offsets_out[r+1]`, both in ascending-t order, with
/// every inside sample in front of every outside sample.
#[derive(Debug, Clone)]
pub struct RayLayout {
    pub offsets_in: Vec<usize>,
    pub offsets_out: Vec<usize>,
    pub dt_in: Vec<f64>,
    pub dt_out: Vec<f64>,
    /// Winner flag per inside sample; outside samples always count as
    /// background.
    pub fg_win: Vec<bool>,
}

impl RayLayout {
    pub fn num_rays(&self) -> usize {
        self.offsets_in.len() - 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// (m,n) + broadcast (1,n)
    AddRowBroadcast(NodeId, NodeId),
    /// (m,n) * broadcast (1,1)
    MulScalarBroadcast(NodeId, NodeId),
    Relu(NodeId),
    /// step(x), the a.e. derivative of relu; its own derivative is 0 a.e.
    ReluDeriv(NodeId),
    /// softplus with sharpness: ln(1+exp(beta x))/beta
    Softplus(NodeId, f64),
    /// sigmoid(beta x), the derivative of `Softplus`
    SoftplusDeriv(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// mask ? a : b, elementwise over equal shapes
    Select(std::sync::Arc<Vec<bool>>, NodeId, NodeId),
    /// Per-cluster mean of a column vector. `labels[i]` indexes into the
    /// present-cluster list; output row j is the mean over rows with
    /// labels[i] == j.
    ClusterMean {
        input: NodeId,
        labels: std::sync::Arc<Vec<u32>>,
        counts: std::sync::Arc<Vec<usize>>,
    },
    /// Fused alpha compositing over per-ray sample runs. Inputs are
    /// inside densities (n_in,1), inside colors (n_in,3), outside
    /// densities (n_out,1), outside colors (n_out,3). Output is (rays,5):
    /// columns [C_r, C_g, C_b, W, W_f].
    CompositeRays {
        sigma_in: NodeId,
        col_in: NodeId,
        sigma_out: NodeId,
        col_out: NodeId,
        layout: std::sync::Arc<RayLayout>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::MulScalarBroadcast(..) => "mul_scalar_broadcast",
            Op::Relu(..) => "relu",
            Op::ReluDeriv(..) => "relu_deriv",
            Op::Softplus(..) => "softplus",
            Op::SoftplusDeriv(..) => "softplus_deriv",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Select(..) => "select",
            Op::ClusterMean { .. } => "cluster_mean",
            Op::CompositeRays { .. } => "composite_rays",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node id. Nodes off the
/// compute path have no entry.
#[derive(Debug)]
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.g[id.0].as_ref()
    }

    /// Gradient of a leaf, densified to its shape if it was off-path.
    pub fn dense(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.g[id.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

// Softplus with a fast path: for |beta*x| > 34 the smooth form equals
// relu(x) below f64 resolution, and evaluating it would just burn an exp.
pub(crate) fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 34.0 {
        x
    } else if bx < -34.0 {
        0.0
    } else {
        bx.exp().ln_1p() / beta
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_same(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_same(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_same(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (out, n) = {
            let av = self.value(a);
            let rv = self.value(row);
            assert_eq!(rv.rows(), 1, "broadcast row must be (1,n)");
            assert_eq!(av.cols(), rv.cols(), "broadcast width mismatch");
            let mut out = av.clone();
            let n = out.cols();
            for r in 0..out.rows() {
                let row_slice = &mut out.data_mut()[r * n..(r + 1) * n];
                for (o, &b) in row_slice.iter_mut().zip(rv.data()) {
                    *o += b;
                }
            }
            (out, n)
        };
        let _ = n;
        self.push(Op::AddRowBroadcast(a, row), out)
    }

    pub fn mul_scalar_broadcast(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scalar broadcast expects (1,1)");
        let c = sv.item();
        let v = self.value(a).map(|x| x * c);
        self.push(Op::MulScalarBroadcast(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn relu_deriv(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::ReluDeriv(a), v)
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.value(a).map(|x| softplus(x, beta));
        self.push(Op::Softplus(a, beta), v)
    }

    pub fn softplus_deriv(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.value(a).map(|x| sigmoid(beta * x));
        self.push(Op::SoftplusDeriv(a, beta), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Natural log; callers clamp the input into a positive range first.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean of empty tensor");
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s / n))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = t.shape();
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            out.push(t.data()[r * n..(r + 1) * n].iter().sum());
        }
        self.push(Op::RowSum(a), Tensor::from_vec(m, 1, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut col0 = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..rows {
                let src = &t.data()[r * w..(r + 1) * w];
                out.data_mut()[r * total + col0..r * total + col0 + w].copy_from_slice(src);
            }
            col0 += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(a);
        let (m, n) = t.shape();
        assert!(start < end && end <= n, "slice {}..{} out of {} cols", start, end, n);
        let w = end - start;
        let mut out = Tensor::zeros(m, w);
        for r in 0..m {
            out.data_mut()[r * w..(r + 1) * w].copy_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        self.push(Op::SliceCols(a, start, end), out)
    }

    /// Elementwise `mask ? a : b`. The mask is data, not a differentiable
    /// input: gradients route only to the selected branch.
    pub fn select(&mut self, mask: Vec<bool>, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        av.check_same_shape(bv, "select").unwrap();
        assert_eq!(mask.len(), av.len(), "select mask length");
        let mut out = bv.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[i] = av.data()[i];
            }
        }
        self.push(Op::Select(std::sync::Arc::new(mask), a, b), out)
    }

    /// Mean of `input` (m,1) per cluster label. `labels[i]` must be a
    /// dense index into the present-cluster list (0..k), or `u32::MAX`
    /// for rows excluded from every cluster. Returns (k,1).
    pub fn cluster_mean(&mut self, input: NodeId, labels: Vec<u32>, num_clusters: usize) -> NodeId {
        let t = self.value(input);
        assert_eq!(t.cols(), 1, "cluster_mean expects a column vector");
        assert_eq!(labels.len(), t.rows(), "cluster_mean label count");
        let mut sums = vec![0.0; num_clusters];
        let mut counts = vec![0usize; num_clusters];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            sums[l as usize] += t.data()[i];
            counts[l as usize] += 1;
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            assert!(c > 0, "cluster with no members");
            *s /= c as f64;
        }
        let v = Tensor::from_vec(num_clusters, 1, sums);
        self.push(
            Op::ClusterMean {
                input,
                labels: std::sync::Arc::new(labels),
                counts: std::sync::Arc::new(counts),
            },
            v,
        )
    }

    /// Fused discrete volume rendering: alpha_i = 1 - exp(-sigma_i dt_i),
    /// T_i = prod_{j<i}(1 - alpha_j), C = sum T a c, W = sum T a,
    /// W_f = sum T a [fg]. Output (rays, 5) = [C_rgb, W, W_f].
    pub fn composite_rays(
        &mut self,
        sigma_in: NodeId,
        col_in: NodeId,
        sigma_out: NodeId,
        col_out: NodeId,
        layout: RayLayout,
    ) -> NodeId {
        let out = {
            let si = self.value(sigma_in);
            let so = self.value(sigma_out);
            let ci = self.value(col_in);
            let co = self.value(col_out);
            assert_eq!(si.cols(), 1);
            assert_eq!(so.cols(), 1);
            assert_eq!(ci.cols(), 3);
            assert_eq!(co.cols(), 3);
            assert_eq!(*layout.offsets_in.last().unwrap(), si.rows());
            assert_eq!(*layout.offsets_out.last().unwrap(), so.rows());
            assert_eq!(layout.fg_win.len(), si.rows());

            let rays = layout.num_rays();
            let mut out = Tensor::zeros(rays, 5);
            for r in 0..rays {
                let mut t_acc = 1.0;
                let mut c = [0.0f64; 3];
                let mut wf = 0.0;
                let mut wb = 0.0;
                {
                    // split accumulators; W = W_f + W_b holds bit-exactly
                    let mut visit = |sigma: f64, col: &[f64], dt: f64, fg: bool| {
                        let alpha = 1.0 - (-sigma * dt).exp();
                        let ta = t_acc * alpha;
                        c[0] += ta * col[0];
                        c[1] += ta * col[1];
                        c[2] += ta * col[2];
                        if fg {
                            wf += ta;
                        } else {
                            wb += ta;
                        }
                        t_acc *= 1.0 - alpha;
                    };
                    for i in layout.offsets_in[r]..layout.offsets_in[r + 1] {
                        visit(si.data()[i], ci.row(i), layout.dt_in[i], layout.fg_win[i]);
                    }
                    for i in layout.offsets_out[r]..layout.offsets_out[r + 1] {
                        visit(so.data()[i], co.row(i), layout.dt_out[i], false);
                    }
                }
                out.set(r, 0, c[0]);
                out.set(r, 1, c[1]);
                out.set(r, 2, c[2]);
                out.set(r, 3, wf + wb);
                out.set(r, 4, wf);
            }
            out
        };
        self.push(
            Op::CompositeRays {
                sigma_in,
                col_in,
                sigma_out,
                col_out,
                layout: std::sync::Arc::new(layout),
            },
            out,
        )
    }

    /// Reverse pass from a scalar loss node. Errors if the loss is not
    /// finite, naming the first non-finite intermediate.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let lt = self.value(loss);
        assert_eq!(lt.shape(), (1, 1), "backward expects a scalar loss");
        if !lt.item().is_finite() {
            let culprit = self
                .nodes
                .iter()
                .find(|n| !n.value.is_finite())
                .map(|n| n.op.name())
                .unwrap_or("loss");
            return Err(Error::numeric(
                culprit,
                format!("non-finite loss {}", lt.item()),
            ));
        }

        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = g[idx].take() else { continue };
            self.backprop_node(idx, &dout, &mut g);
            g[idx] = Some(dout);
        }
        Ok(Grads { g })
    }

    fn backprop_node(&self, idx: usize, dout: &Tensor, g: &mut Vec<Option<Tensor>>) {
        fn acc(g: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor) {
            match &mut g[id.0] {
                Some(t) => {
                    debug_assert_eq!(t.shape(), delta.shape());
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, dout.clone());
                acc(g, *b, dout.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, dout.clone());
                acc(g, *b, dout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = zip_same(dout, self.value(*b), |d, y| d * y);
                let db = zip_same(dout, self.value(*a), |d, x| d * x);
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::Scale(a, c) => acc(g, *a, dout.map(|x| x * c)),
            Op::AddScalar(a, _) => acc(g, *a, dout.clone()),
            Op::MatMul(a, b) => {
                let da = tensor::matmul_a_bt(dout, self.value(*b));
                let db = tensor::matmul_at_b(self.value(*a), dout);
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::AddRowBroadcast(a, row) => {
                acc(g, *a, dout.clone());
                let n = dout.cols();
                let mut drow = vec![0.0; n];
                for r in 0..dout.rows() {
                    tensor::axpy(1.0, dout.row(r), &mut drow);
                }
                acc(g, *row, Tensor::from_vec(1, n, drow));
            }
            Op::MulScalarBroadcast(a, s) => {
                let c = self.value(*s).item();
                acc(g, *a, dout.map(|x| x * c));
                let ds: f64 = dout
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(d, x)| d * x)
                    .sum();
                acc(g, *s, Tensor::scalar(ds));
            }
            Op::Relu(a) => {
                let da = zip_same(dout, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                acc(g, *a, da);
            }
            Op::ReluDeriv(_) => {} // derivative of a step function is 0 a.e.
            Op::Softplus(a, beta) => {
                let beta = *beta;
                let da = zip_same(dout, self.value(*a), |d, x| d * sigmoid(beta * x));
                acc(g, *a, da);
            }
            Op::SoftplusDeriv(a, beta) => {
                let beta = *beta;
                let da = zip_same(dout, self.value(*a), |d, x| {
                    let s = sigmoid(beta * x);
                    d * beta * s * (1.0 - s)
                });
                acc(g, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = zip_same(dout, &node.value, |d, s| d * s * (1.0 - s));
                acc(g, *a, da);
            }
            Op::Exp(a) => {
                let da = zip_same(dout, &node.value, |d, e| d * e);
                acc(g, *a, da);
            }
            Op::Ln(a) => {
                let da = zip_same(dout, self.value(*a), |d, x| d / x);
                acc(g, *a, da);
            }
            Op::Sqrt(a) => {
                let da = zip_same(dout, &node.value, |d, s| d / (2.0 * s.max(1e-12)));
                acc(g, *a, da);
            }
            Op::Square(a) => {
                let da = zip_same(dout, self.value(*a), |d, x| d * 2.0 * x);
                acc(g, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let da = zip_same(dout, self.value(*a), |d, x| {
                    if x >= lo && x <= hi {
                        d
                    } else {
                        0.0
                    }
                });
                acc(g, *a, da);
            }
            Op::SumAll(a) => {
                let d = dout.item();
                let (m, n) = self.value(*a).shape();
                acc(g, *a, Tensor::from_vec(m, n, vec![d; m * n]));
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let d = dout.item() / t.len() as f64;
                let (m, n) = t.shape();
                acc(g, *a, Tensor::from_vec(m, n, vec![d; m * n]));
            }
            Op::RowSum(a) => {
                let (m, n) = self.value(*a).shape();
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    let d = dout.data()[r];
                    for v in da.row_mut(r) {
                        *v = d;
                    }
                }
                acc(g, *a, da);
            }
            Op::ConcatCols(parts) => {
                let rows = dout.rows();
                let total = dout.cols();
                let mut col0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Tensor::zeros(rows, w);
                    for r in 0..rows {
                        dp.row_mut(r)
                            .copy_from_slice(&dout.data()[r * total + col0..r * total + col0 + w]);
                    }
                    acc(g, p, dp);
                    col0 += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.value(*a).shape();
                let w = end - start;
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    da.data_mut()[r * n + start..r * n + end]
                        .copy_from_slice(&dout.data()[r * w..(r + 1) * w]);
                }
                acc(g, *a, da);
            }
            Op::Select(mask, a, b) => {
                let (m, n) = dout.shape();
                let mut da = Tensor::zeros(m, n);
                let mut db = Tensor::zeros(m, n);
                for (i, &sel) in mask.iter().enumerate() {
                    if sel {
                        da.data_mut()[i] = dout.data()[i];
                    } else {
                        db.data_mut()[i] = dout.data()[i];
                    }
                }
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::ClusterMean {
                input,
                labels,
                counts,
            } => {
                let m = labels.len();
                let mut da = Tensor::zeros(m, 1);
                for (i, &l) in labels.iter().enumerate() {
                    if l == u32::MAX {
                        continue;
                    }
                    da.data_mut()[i] = dout.data()[l as usize] / counts[l as usize] as f64;
                }
                acc(g, *input, da);
            }
            Op::CompositeRays {
                sigma_in,
                col_in,
                sigma_out,
                col_out,
                layout,
            } => {
                let (dsi, dci, dso, dco) =
                    self.composite_backward(*sigma_in, *col_in, *sigma_out, *col_out, layout, dout);
                acc(g, *sigma_in, dsi);
                acc(g, *col_in, dci);
                acc(g, *sigma_out, dso);
                acc(g, *col_out, dco);
            }
        }
    }

    /// Backward of the fused compositor. For objective L with per-ray
    /// upstream gradients (dC, dW, dWf), write e_i = dC.c_i + dW + dWf [fg_i].
    /// Then dL/dalpha_i = T_i (e_i - U_i) where U_i restarts transmittance
    /// after i: U_i = alpha_{i+1} e_{i+1} + (1-alpha_{i+1}) U_{i+1}. This
    /// form avoids dividing by (1 - alpha), which underflows for opaque
    /// samples.
    fn composite_backward(
        &self,
        sigma_in: NodeId,
        col_in: NodeId,
        sigma_out: NodeId,
        col_out: NodeId,
        layout: &RayLayout,
        dout: &Tensor,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let si = self.value(sigma_in);
        let so = self.value(sigma_out);
        let ci = self.value(col_in);
        let co = self.value(col_out);
        let n_in = si.rows();
        let n_out = so.rows();
        let mut dsi = Tensor::zeros(n_in, 1);
        let mut dci = Tensor::zeros(n_in, 3);
        let mut dso = Tensor::zeros(n_out, 1);
        let mut dco = Tensor::zeros(n_out, 3);

        // scratch reused across rays
        let mut alphas: Vec<f64> = Vec::new();
        let mut trans: Vec<f64> = Vec::new();
        let mut emis: Vec<f64> = Vec::new();
        let mut suffix: Vec<f64> = Vec::new();

        for r in 0..layout.num_rays() {
            let dray = dout.row(r);
            let dc = [dray[0], dray[1], dray[2]];
            let dw = dray[3];
            let dwf = dray[4];

            let in_range = layout.offsets_in[r]..layout.offsets_in[r + 1];
            let out_range = layout.offsets_out[r]..layout.offsets_out[r + 1];
            let n_samples = in_range.len() + out_range.len();
            alphas.clear();
            trans.clear();
            emis.clear();

            let mut t_acc = 1.0;
            for i in in_range.clone() {
                let alpha = 1.0 - (-si.data()[i] * layout.dt_in[i]).exp();
                let col = ci.row(i);
                let e = dc[0] * col[0]
                    + dc[1] * col[1]
                    + dc[2] * col[2]
                    + dw
                    + if layout.fg_win[i] { dwf } else { 0.0 };
                alphas.push(alpha);
                trans.push(t_acc);
                emis.push(e);
                t_acc *= 1.0 - alpha;
            }
            for i in out_range.clone() {
                let alpha = 1.0 - (-so.data()[i] * layout.dt_out[i]).exp();
                let col = co.row(i);
                let e = dc[0] * col[0] + dc[1] * col[1] + dc[2] * col[2] + dw;
                alphas.push(alpha);
                trans.push(t_acc);
                emis.push(e);
                t_acc *= 1.0 - alpha;
            }

            suffix.clear();
            suffix.resize(n_samples, 0.0);
            for i in (0..n_samples.saturating_sub(1)).rev() {
                suffix[i] = alphas[i + 1] * emis[i + 1] + (1.0 - alphas[i + 1]) * suffix[i + 1];
            }

            let mut k = 0;
            for i in in_range.clone() {
                let dalpha = trans[k] * (emis[k] - suffix[k]);
                dsi.data_mut()[i] = dalpha * layout.dt_in[i] * (1.0 - alphas[k]);
                let ta = trans[k] * alphas[k];
                let drow = dci.row_mut(i);
                drow[0] = ta * dc[0];
                drow[1] = ta * dc[1];
                drow[2] = ta * dc[2];
                k += 1;
            }
            for i in out_range.clone() {
                let dalpha = trans[k] * (emis[k] - suffix[k]);
                dso.data_mut()[i] = dalpha * layout.dt_out[i] * (1.0 - alphas[k]);
                let ta = trans[k] * alphas[k];
                let drow = dco.row_mut(i);
                drow[0] = ta * dc[0];
                drow[1] = ta * dc[1];
                drow[2] = ta * dc[2];
                k += 1;
            }
        }
        (dsi, dci, dso, dco)
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.check_same_shape(b, "elementwise op").unwrap();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::fd_check;

    #[test]
    fn square_gradient_at_three() {
        // d(p^2)/dp = 2p
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(p);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(2.0));
        let c = tape.scalar(7.0);
        let y = tape.square(c);
        let g = tape.backward(y).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.dense(&tape, p).item(), 0.0);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(-1.0));
        let l = tape.ln(p); // ln(-1) = NaN
        let err = tape.backward(l).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("ln"), "got: {msg}");
    }

    #[test]
    fn elementwise_and_matmul_gradients_match_fd() {
        let inputs = vec![
            Tensor::from_fn(3, 4, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.41),
            Tensor::from_fn(4, 2, |r, c| 0.1 * (r as f64 + 1.0) + 0.07 * (c as f64) - 0.3),
        ];
        fd_check(&inputs, 1e-6, 1e-8, |tape, leaves| {
            let h = tape.matmul(leaves[0], leaves[1]);
            let s = tape.sigmoid(h);
            let sp = tape.softplus(s, 3.0);
            let e = tape.exp(sp);
            tape.mean_all(e)
        });
    }

    #[test]
    fn broadcast_select_concat_gradients_match_fd() {
        let inputs = vec![
            Tensor::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.11 - 0.6),
            Tensor::from_vec(1, 3, vec![0.2, -0.4, 0.3]),
            Tensor::from_fn(5, 3, |r, c| (r as f64) * 0.05 - (c as f64) * 0.02 + 0.1),
            Tensor::scalar(0.7),
        ];
        let mask: Vec<bool> = (0..15).map(|i| i % 3 == 0).collect();
        fd_check(&inputs, 1e-6, 1e-8, move |tape, leaves| {
            let a = tape.add_row_broadcast(leaves[0], leaves[1]);
            let sel = tape.select(mask.clone(), a, leaves[2]);
            let scaled = tape.mul_scalar_broadcast(sel, leaves[3]);
            let cat = tape.concat_cols(&[scaled, leaves[2]]);
            let sl = tape.slice_cols(cat, 1, 5);
            let sq = tape.square(sl);
            let rs = tape.row_sum(sq);
            tape.sum_all(rs)
        });
    }

    #[test]
    fn cluster_mean_gradient_matches_fd() {
        let inputs = vec![Tensor::from_vec(6, 1, vec![0.2, 0.9, 0.4, 0.7, 0.1, 0.5])];
        let labels = vec![0u32, 1, 0, 2, 1, 2];
        fd_check(&inputs, 1e-6, 1e-9, move |tape, leaves| {
            let g = tape.cluster_mean(leaves[0], labels.clone(), 3);
            let sq = tape.square(g);
            tape.sum_all(sq)
        });
    }

    #[test]
    fn composite_rays_gradient_matches_fd() {
        // 2 rays, 3 inside + 2 outside each
        let layout = RayLayout {
            offsets_in: vec![0, 3, 6],
            offsets_out: vec![0, 2, 4],
            dt_in: vec![0.1, 0.15, 0.2, 0.12, 0.1, 0.3],
            dt_out: vec![0.5, 0.4, 0.2, 0.6],
            fg_win: vec![true, false, true, false, true, true],
        };
        let inputs = vec![
            Tensor::from_vec(6, 1, vec![0.5, 2.0, 0.1, 3.0, 0.0, 1.2]),
            Tensor::from_fn(6, 3, |r, c| ((r * 3 + c) % 7) as f64 / 7.0),
            Tensor::from_vec(4, 1, vec![0.8, 0.2, 1.5, 0.05]),
            Tensor::from_fn(4, 3, |r, c| ((r + c * 2) % 5) as f64 / 5.0),
        ];
        fd_check(&inputs, 1e-6, 1e-9, move |tape, leaves| {
            let out =
                tape.composite_rays(leaves[0], leaves[1], leaves[2], leaves[3], layout.clone());
            // weight the five output columns differently so every path is covered
            let w = tape.leaf(Tensor::from_vec(5, 1, vec![0.9, -0.3, 0.5, 1.7, -0.8]));
            let prod = tape.matmul(out, w);
            tape.sum_all(prod)
        });
    }

    #[test]
    fn composite_rays_opaque_sample_does_not_blow_up() {
        // sigma*dt = 60 makes (1 - alpha) underflow-adjacent; the
        // division-free backward must stay finite.
        let layout = RayLayout {
            offsets_in: vec![0, 2],
            offsets_out: vec![0, 1],
            dt_in: vec![1.0, 1.0],
            dt_out: vec![1.0],
            fg_win: vec![true, false],
        };
        let mut tape = Tape::new();
        let si = tape.leaf(Tensor::from_vec(2, 1, vec![60.0, 1.0]));
        let ci = tape.leaf(Tensor::from_fn(2, 3, |_, _| 0.5));
        let so = tape.leaf(Tensor::from_vec(1, 1, vec![0.7]));
        let co = tape.leaf(Tensor::from_fn(1, 3, |_, _| 0.25));
        let out = tape.composite_rays(si, ci, so, co, layout);
        let s = tape.sum_all(out);
        let g = tape.backward(s).unwrap();
        assert!(g.get(si).unwrap().is_finite());
        // W for the opaque ray
        assert!((tape.value(out).get(0, 3) - 1.0).abs() < 1e-9);
    }
}

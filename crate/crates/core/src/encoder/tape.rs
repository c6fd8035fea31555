//! Minimal reverse-mode autodiff over dense matrices.
//!
//! A [`Tape`] records one forward computation. Every node keeps its value;
//! [`Tape::backward`] walks the nodes in reverse, accumulating adjoints and
//! emitting gradients for the parameter leaves.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type NodeId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

enum Op {
    Constant,
    /// Leaf holding a copy of trainable tensor `index`.
    Param(usize),
    /// Rows of trainable tensor `table` selected by `ids`.
    Gather { table: usize, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    /// `alpha * a · bᵀ`
    MatMulBt(NodeId, NodeId, f64),
    Add(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Columns { x: NodeId, start: usize },
    ConcatColumns(Vec<NodeId>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct TapeGrads {
    /// `(tensor index, gradient)` for every parameter leaf, in tape order.
    pub dense: Vec<(usize, Array2<f64>)>,
    /// `(table index, row id, gradient row)` for gathered rows.
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Array2<f64> {
        std::mem::take(&mut self.nodes[id].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, index: usize, value: &Array2<f64>) -> NodeId {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn gather(&mut self, table: usize, table_value: &Array2<f64>, ids: &[usize]) -> NodeId {
        let mut out = Array2::zeros((ids.len(), table_value.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&table_value.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let mut v = self.value(a).dot(&self.value(b).t());
        if alpha != 1.0 {
            v *= alpha;
        }
        self.push(v, Op::MatMulBt(a, b, alpha))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise layer normalisation with `1 × d` gain and bias nodes.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let inv = 1.0 / (var + eps).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let out = &normed * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn columns(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::Columns { x, start })
    }

    pub fn concat_columns(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts match");
        self.push(v, Op::ConcatColumns(parts.to_vec()))
    }

    /// Back-propagates the given output adjoints through the whole tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<f64>)>) -> TapeGrads {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut adj[id], g);
        }
        let mut out = TapeGrads::default();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => out.dense.push((*index, g)),
                Op::Gather { table, ids } => {
                    for (row, &tok) in g.rows().into_iter().zip(ids) {
                        out.rows.push((*table, tok, row.to_vec()));
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut adj[*a], ga);
                    accumulate(&mut adj[*b], gb);
                }
                Op::MatMulBt(a, b, alpha) => {
                    let mut ga = g.dot(self.value(*b));
                    let mut gb = g.t().dot(self.value(*a));
                    if *alpha != 1.0 {
                        ga *= *alpha;
                        gb *= *alpha;
                    }
                    accumulate(&mut adj[*a], ga);
                    accumulate(&mut adj[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[*a], g.clone());
                    accumulate(&mut adj[*b], g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    Zip::from(gx.rows_mut()).and(y.rows()).for_each(|mut gr, yr| {
                        let dot = gr.dot(&yr);
                        Zip::from(&mut gr).and(&yr).for_each(|g, &y| *g = y * (*g - dot));
                    });
                    accumulate(&mut adj[*x], gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    accumulate(&mut adj[*x], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    let d = normed.ncols() as f64;
                    let g_bias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_gain = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut gx = &g * gain_v;
                    for ((mut dn, n), &inv) in gx.rows_mut().into_iter().zip(normed.rows()).zip(inv_std) {
                        let mean_dn = dn.sum() / d;
                        let mean_dn_n = dn.dot(&n) / d;
                        Zip::from(&mut dn)
                            .and(&n)
                            .for_each(|v, &n| *v = inv * (*v - mean_dn - n * mean_dn_n));
                    }
                    accumulate(&mut adj[*x], gx);
                    accumulate(&mut adj[*gain], g_gain);
                    accumulate(&mut adj[*bias], g_bias);
                }
                Op::Columns { x, start } => {
                    let src = self.value(*x);
                    let slot = adj[*x].get_or_insert_with(|| Array2::zeros(src.raw_dim()));
                    let w = g.ncols();
                    let mut view = slot.slice_mut(s![.., *start..*start + w]);
                    view += &g;
                }
                Op::ConcatColumns(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let part = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut adj[p], part);
                        start += w;
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

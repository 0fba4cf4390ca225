//! Connectivity graphs and the two-layer graph-attention encoder.
//!
//! Each layer computes, for node `p` with neighborhood `N(p)` (nodes with
//! positive adjacency, including the self-loop),
//!
//! ```text
//! z_q    = W h_q
//! e_pq   = relu(m_src · z_p + m_dst · z_q)
//! a_pq   = softmax_{q ∈ N(p)} e_pq
//! h'_p   = relu(Σ_q a_pq z_q)
//! ```
//!
//! and the graph embedding is the mean of the last layer's node embeddings.
//! Attention uses the neighborhood structure only; edge strengths reach the
//! network through the connection-profile node features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Absolute tolerance on `|c_ij - c_ji|` accepted by [`build_graph`].
pub const CORRELATION_SYMMETRY_TOL: f64 = 1e-6;
const RANGE_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityGraph {
    adjacency: Matrix,
    attributes: Matrix,
    neighbors: Vec<Vec<usize>>,
}

impl ConnectivityGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    /// Symmetric nonnegative adjacency with unit diagonal.
    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    /// Connection profiles, one row per node.
    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    /// Attention neighborhood of node `p` in increasing order; always contains `p`.
    pub fn neighbors(&self, p: usize) -> &[usize] {
        &self.neighbors[p]
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`. Adjacency
    /// rows and columns are permuted; attribute rows are permuted while the
    /// feature coordinates keep their meaning.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<ConnectivityGraph> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidInput(format!(
                "permutation of length {} is not a permutation of {n} nodes",
                perm.len()
            )));
        }
        let adjacency = Matrix::from_fn(n, n, |i, j| self.adjacency[(perm[i], perm[j])]);
        let attributes = self.attributes.select_rows(perm);
        Ok(ConnectivityGraph {
            neighbors: neighborhoods(&adjacency),
            adjacency,
            attributes,
        })
    }
}

fn neighborhoods(adjacency: &Matrix) -> Vec<Vec<usize>> {
    (0..adjacency.rows())
        .map(|p| {
            adjacency
                .row(p)
                .iter()
                .enumerate()
                .filter(|&(q, &w)| w > 0.0 || q == p)
                .map(|(q, _)| q)
                .collect()
        })
        .collect()
}

/// Builds a graph from a correlation matrix: anticorrelations are set to 0,
/// node attributes are the thresholded rows, and every node gets a self-loop.
pub fn build_graph(corr: &Matrix) -> Result<ConnectivityGraph> {
    if !corr.is_square() || corr.rows() == 0 {
        return Err(Error::InvalidInput(format!(
            "correlation matrix must be square and nonempty, got {}x{}",
            corr.rows(),
            corr.cols()
        )));
    }
    let n = corr.rows();
    for i in 0..n {
        for j in 0..n {
            let c = corr[(i, j)];
            if !c.is_finite() || !(-1.0 - RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&c) {
                return Err(Error::InvalidInput(format!(
                    "correlation entry ({i}, {j}) = {c} is outside [-1, 1]"
                )));
            }
            if j > i && (c - corr[(j, i)]).abs() > CORRELATION_SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "correlation matrix is not symmetric at ({i}, {j}): {c} vs {}",
                    corr[(j, i)]
                )));
            }
        }
    }
    let attributes = corr.map(|c| c.clamp(0.0, 1.0));
    let mut adjacency = Matrix::from_fn(n, n, |i, j| {
        0.5 * (attributes[(i, j)] + attributes[(j, i)])
    });
    for i in 0..n {
        adjacency[(i, i)] = 1.0;
    }
    Ok(ConnectivityGraph {
        neighbors: neighborhoods(&adjacency),
        adjacency,
        attributes,
    })
}

/// Trainable weights of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    /// `in_dim × out_dim`.
    pub weight: Matrix,
    /// `1 × 2·out_dim`: the first half scores the receiving node, the second
    /// half the neighbor.
    pub attention: Matrix,
}

impl GatLayerParams {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        GatLayerParams {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            attention: Matrix::zeros(1, self.attention.cols()),
        }
    }
}

/// Parameters of the whole encoder; the same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<GatLayerParams>,
}

impl EncoderParams {
    /// Glorot-uniform initialization for layers `dims[0] → dims[1] → ...`.
    pub fn glorot(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let lim_w = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-lim_w..lim_w));
                let lim_a = (6.0 / (2 * fan_out + 1) as f64).sqrt();
                let attention = Matrix::from_fn(1, 2 * fan_out, |_, _| rng.gen_range(-lim_a..lim_a));
                GatLayerParams { weight, attention }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self.layers.iter().map(GatLayerParams::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, GatLayerParams::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, GatLayerParams::out_dim)
    }

    /// Weight and attention tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.attention])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.attention])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("encoder has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.attention.rows() != 1 || l.attention.cols() != 2 * l.out_dim() {
                return Err(Error::shape(
                    "attention vector",
                    format!("1x{}", 2 * l.out_dim()),
                    format!("{}x{} in layer {k}", l.attention.rows(), l.attention.cols()),
                ));
            }
            if k > 0 && l.in_dim() != self.layers[k - 1].out_dim() {
                return Err(Error::shape(
                    "layer chaining",
                    self.layers[k - 1].out_dim(),
                    format!("input dim {} in layer {k}", l.in_dim()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GraphEmbedding {
    /// Last-layer node embeddings, `V × r`.
    pub nodes: Matrix,
    /// Mean of `nodes` over rows.
    pub pooled: Vec<f64>,
    /// Dense `V × V` attention matrix per layer.
    pub attention: Vec<Matrix>,
}

/// Forward intermediates of one layer, kept for the backward pass.
#[derive(Clone, Debug)]
struct LayerTape {
    input: Matrix,
    z: Matrix,
    /// Raw scores `e_pq` aligned with the neighbor lists.
    scores: Vec<Vec<f64>>,
    /// Attention weights aligned with the neighbor lists.
    weights: Vec<Vec<f64>>,
    pre: Matrix,
    output: Matrix,
}

impl LayerTape {
    fn dense_attention(&self, graph: &ConnectivityGraph) -> Matrix {
        let n = graph.node_count();
        let mut a = Matrix::zeros(n, n);
        for p in 0..n {
            for (&q, &w) in graph.neighbors(p).iter().zip(&self.weights[p]) {
                a[(p, q)] = w;
            }
        }
        a
    }
}

/// Recorded forward pass through the encoder for one graph.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    layers: Vec<LayerTape>,
    pooled: Vec<f64>,
}

impl EncoderTape {
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    pub fn embedding(&self, graph: &ConnectivityGraph) -> GraphEmbedding {
        GraphEmbedding {
            nodes: self.layers.last().map(|l| l.output.clone()).unwrap_or_else(|| Matrix::zeros(0, 0)),
            pooled: self.pooled.clone(),
            attention: self.layers.iter().map(|l| l.dense_attention(graph)).collect(),
        }
    }
}

fn layer_forward(layer: &GatLayerParams, graph: &ConnectivityGraph, input: &Matrix) -> Result<LayerTape> {
    let n = graph.node_count();
    if input.rows() != n || input.cols() != layer.in_dim() {
        return Err(Error::shape(
            "gat_layer input",
            format!("{n}x{}", layer.in_dim()),
            format!("{}x{}", input.rows(), input.cols()),
        ));
    }
    let out_dim = layer.out_dim();
    let z = input.matmul(&layer.weight);
    let (m_src, m_dst) = layer.attention.as_slice().split_at(out_dim);
    let src: Vec<f64> = (0..n).map(|p| dot(z.row(p), m_src)).collect();
    let dst: Vec<f64> = (0..n).map(|q| dot(z.row(q), m_dst)).collect();

    let mut scores = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut pre = Matrix::zeros(n, out_dim);
    for p in 0..n {
        let nbrs = graph.neighbors(p);
        let e: Vec<f64> = nbrs.iter().map(|&q| src[p] + dst[q]).collect();
        let max = e.iter().fold(0.0_f64, |m, &x| m.max(x.max(0.0)));
        let mut w: Vec<f64> = e.iter().map(|&x| (x.max(0.0) - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let row = pre.row_mut(p);
        for (&q, &a) in nbrs.iter().zip(&w) {
            for (o, &zq) in row.iter_mut().zip(z.row(q)) {
                *o += a * zq;
            }
        }
        scores.push(e);
        weights.push(w);
    }
    let output = pre.map(|x| x.max(0.0));
    Ok(LayerTape {
        input: input.clone(),
        z,
        scores,
        weights,
        pre,
        output,
    })
}

/// Gradients of one layer given `d_out = ∂L/∂output`. Returns the parameter
/// gradient and `∂L/∂input`.
fn layer_backward(
    layer: &GatLayerParams,
    graph: &ConnectivityGraph,
    tape: &LayerTape,
    d_out: &Matrix,
    need_input_grad: bool,
) -> (GatLayerParams, Option<Matrix>) {
    let n = graph.node_count();
    let out_dim = layer.out_dim();
    let (m_src, m_dst) = layer.attention.as_slice().split_at(out_dim);

    let mut d_pre = d_out.clone();
    for (g, &x) in d_pre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }

    let mut d_z = Matrix::zeros(n, out_dim);
    let mut d_src = vec![0.0; n];
    let mut d_dst = vec![0.0; n];
    for p in 0..n {
        let nbrs = graph.neighbors(p);
        let gp = d_pre.row(p);
        if gp.iter().all(|&g| g == 0.0) {
            continue;
        }
        let w = &tape.weights[p];
        let da: Vec<f64> = nbrs.iter().map(|&q| dot(gp, tape.z.row(q))).collect();
        for (&q, &a) in nbrs.iter().zip(w) {
            for (o, &g) in d_z.row_mut(q).iter_mut().zip(gp) {
                *o += a * g;
            }
        }
        let weighted: f64 = w.iter().zip(&da).map(|(a, d)| a * d).sum();
        for (k, &q) in nbrs.iter().enumerate() {
            if tape.scores[p][k] <= 0.0 {
                continue;
            }
            let de = w[k] * (da[k] - weighted);
            d_src[p] += de;
            d_dst[q] += de;
        }
    }

    let mut d_attention = Matrix::zeros(1, 2 * out_dim);
    {
        let (ga_src, ga_dst) = d_attention.as_mut_slice().split_at_mut(out_dim);
        for p in 0..n {
            let zp = tape.z.row(p);
            if d_src[p] != 0.0 {
                for (g, &z) in ga_src.iter_mut().zip(zp) {
                    *g += d_src[p] * z;
                }
            }
            if d_dst[p] != 0.0 {
                for (g, &z) in ga_dst.iter_mut().zip(zp) {
                    *g += d_dst[p] * z;
                }
            }
            let row = d_z.row_mut(p);
            for ((o, &ms), &md) in row.iter_mut().zip(m_src).zip(m_dst) {
                *o += d_src[p] * ms + d_dst[p] * md;
            }
        }
    }

    let d_weight = tape.input.t_matmul(&d_z);
    let d_input = need_input_grad.then(|| d_z.matmul_t(&layer.weight));
    (
        GatLayerParams {
            weight: d_weight,
            attention: d_attention,
        },
        d_input,
    )
}

/// One attention layer: returns node outputs and the dense attention matrix.
pub fn gat_layer(
    layer: &GatLayerParams,
    graph: &ConnectivityGraph,
    input: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if layer.attention.cols() != 2 * layer.out_dim() {
        return Err(Error::shape(
            "attention vector",
            2 * layer.out_dim(),
            layer.attention.cols(),
        ));
    }
    let tape = layer_forward(layer, graph, input)?;
    let attention = tape.dense_attention(graph);
    Ok((tape.output, attention))
}

/// Forward pass that records the intermediates needed by [`backward`].
pub fn forward(params: &EncoderParams, graph: &ConnectivityGraph) -> Result<EncoderTape> {
    params.validate()?;
    if graph.attributes().cols() != params.input_dim() {
        return Err(Error::shape(
            "encoder input",
            format!("{} node features", params.input_dim()),
            graph.attributes().cols(),
        ));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut h = graph.attributes().clone();
    for layer in &params.layers {
        let tape = layer_forward(layer, graph, &h)?;
        h = tape.output.clone();
        layers.push(tape);
    }
    let pooled = h.column_means();
    Ok(EncoderTape { layers, pooled })
}

/// Reverse pass from `∂L/∂h_G` to parameter gradients.
pub fn backward(
    params: &EncoderParams,
    graph: &ConnectivityGraph,
    tape: &EncoderTape,
    upstream: &[f64],
) -> Result<EncoderParams> {
    if upstream.len() != params.output_dim() {
        return Err(Error::shape(
            "encode_graph_vjp upstream",
            params.output_dim(),
            upstream.len(),
        ));
    }
    let n = graph.node_count();
    let inv_n = 1.0 / n as f64;
    let mut d_h = Matrix::from_fn(n, upstream.len(), |_, j| upstream[j] * inv_n);
    let mut grads: Vec<GatLayerParams> = Vec::with_capacity(params.layers.len());
    for (k, (layer, lt)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let (g, d_in) = layer_backward(layer, graph, lt, &d_h, k > 0);
        grads.push(g);
        if let Some(d) = d_in {
            d_h = d;
        }
    }
    grads.reverse();
    Ok(EncoderParams { layers: grads })
}

/// Encodes one graph: attention layers followed by mean pooling.
pub fn encode_graph(params: &EncoderParams, graph: &ConnectivityGraph) -> Result<GraphEmbedding> {
    let tape = forward(params, graph)?;
    Ok(tape.embedding(graph))
}

/// Gradient of `upstreamᵀ h_G` with respect to every encoder parameter.
pub fn encode_graph_vjp(
    params: &EncoderParams,
    graph: &ConnectivityGraph,
    upstream: &[f64],
) -> Result<EncoderParams> {
    let tape = forward(params, graph)?;
    backward(params, graph, &tape, upstream)
}

//! Decoupled spatio-temporal encoders and the query generator.
//!
//! The temporal encoder collapses each node's input window with a
//! convolution; the spatial encoder propagates time-flattened features one
//! hop over the row-normalized graph and projects them. Both outputs are
//! concatenated and fused into the context-aware query by a stack of
//! residual feed-forward layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, FwdCtx, Ffn, LayerNorm, Linear, Param};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

/// Sensor graph: node count plus a dense nonnegative adjacency.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    num_nodes: usize,
    adjacency: Vec<f64>,
}

impl GraphSpec {
    pub fn new(num_nodes: usize, adjacency: Vec<f64>) -> Result<Self> {
        if adjacency.len() != num_nodes * num_nodes {
            return Err(Error::contract(
                "GraphSpec::new",
                format!(
                    "adjacency has {} entries, expected {}x{}",
                    adjacency.len(),
                    num_nodes,
                    num_nodes
                ),
            ));
        }
        if let Some(w) = adjacency.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::contract(
                "GraphSpec::new",
                format!("adjacency weights must be finite and nonnegative, found {w}"),
            ));
        }
        Ok(GraphSpec {
            num_nodes,
            adjacency,
        })
    }

    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![0.0; num_nodes * num_nodes];
        for &(src, dst, w) in edges {
            if src >= num_nodes || dst >= num_nodes {
                return Err(Error::data(format!(
                    "edge ({src},{dst}) out of range for {num_nodes} nodes"
                )));
            }
            adjacency[src * num_nodes + dst] = w;
        }
        GraphSpec::new(num_nodes, adjacency)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// Row-normalized propagation matrix over A plus a unit self-loop.
    /// The unit loop is added on top of whatever diagonal A already carries,
    /// so every row sums to at least 1 and normalization never divides by
    /// zero.
    pub fn propagation_matrix<S: Scalar>(&self) -> Vec<S> {
        let n = self.num_nodes;
        let mut p = vec![S::zero(); n * n];
        for i in 0..n {
            let mut row_sum = 1.0;
            for j in 0..n {
                row_sum += self.adjacency[i * n + j];
            }
            for j in 0..n {
                let mut w = self.adjacency[i * n + j];
                if i == j {
                    w += 1.0;
                }
                p[i * n + j] = S::of(w / row_sum);
            }
        }
        p
    }
}

/// Temporal convolution flavor. The default collapses the whole
/// (input_len, d_in) plane in one kernel; the dilated variant runs a 1D
/// kernel over time and averages the surviving positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalConvKind {
    Conv2d,
    Conv1dDilated { kernel: usize, dilation: usize },
}

/// Decoupled embeddings plus the fused query for one batch.
pub struct QueryBatch<S: Scalar> {
    pub e_sp: Tensor<S>,
    pub e_tp: Tensor<S>,
    pub q_st: Tensor<S>,
}

/// Per-node convolution over the input window: (B,L,N,D_in) -> (B,N,D_tp).
pub struct TemporalEncoder<S: Scalar> {
    kind: TemporalConvKind,
    input_len: usize,
    d_in: usize,
    d_tp: usize,
    kernel: Param<S>,
    bias: Param<S>,
    norm: Option<LayerNorm<S>>,
}

impl<S: Scalar> TemporalEncoder<S> {
    pub fn new(
        name: &str,
        input_len: usize,
        d_in: usize,
        d_tp: usize,
        kind: TemporalConvKind,
        with_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (kernel_shape, fan_in) = match kind {
            TemporalConvKind::Conv2d => (vec![d_tp, 1, input_len, d_in], input_len * d_in),
            TemporalConvKind::Conv1dDilated { kernel, dilation } => {
                let extent = dilation * (kernel - 1) + 1;
                if kernel == 0 || dilation == 0 || extent > input_len {
                    return Err(Error::config(format!(
                        "conv1d kernel {kernel} with dilation {dilation} does not fit input_len {input_len}"
                    )));
                }
                (vec![d_tp, d_in, kernel], d_in * kernel)
            }
        };
        let n: usize = kernel_shape.iter().product();
        let kernel = Param::new(
            format!("{name}.kernel"),
            kaiming_normal(rng, fan_in, n),
            &kernel_shape,
            true,
        )?;
        let bias = Param::new(format!("{name}.bias"), vec![S::zero(); d_tp], &[d_tp], true)?;
        let norm = if with_norm {
            Some(LayerNorm::new(&format!("{name}.norm"), d_tp, true)?)
        } else {
            None
        };
        Ok(TemporalEncoder {
            kind,
            input_len,
            d_in,
            d_tp,
            kernel,
            bias,
            norm,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.d_tp
    }

    pub fn kernel(&self) -> &Param<S> {
        &self.kernel
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.input_len || shape[3] != self.d_in {
            return Err(Error::contract(
                "TemporalEncoder::forward",
                format!(
                    "expected (B,{},N,{}), got {:?}",
                    self.input_len, self.d_in, shape
                ),
            ));
        }
        let (b, l, n, d_in) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = match self.kind {
            TemporalConvKind::Conv2d => {
                // (B,L,N,D) -> (B,N,L,D) -> (B*N, 1, L, D); the kernel spans
                // the whole plane so the conv output is one value per channel.
                let per_node = x
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[b * n, 1, l, d_in])?;
                let y = per_node.conv2d(&self.kernel.value(), Some(&self.bias.value()), (1, 1), (0, 0))?;
                debug_assert_eq!(y.shape(), &[b * n, self.d_tp, 1, 1]);
                y.reshape(&[b, n, self.d_tp])?
            }
            TemporalConvKind::Conv1dDilated { dilation, .. } => {
                // (B,L,N,D) -> (B,N,D,L) -> (B*N, D, L); average over the
                // positions that survive the dilated valid convolution.
                let per_node = x
                    .permute(&[0, 2, 3, 1])?
                    .reshape(&[b * n, d_in, l])?;
                let y = per_node.conv1d(&self.kernel.value(), Some(&self.bias.value()), 1, dilation)?;
                y.mean_axis(2)?.reshape(&[b, n, self.d_tp])?
            }
        };
        match &self.norm {
            Some(norm) => norm.forward(&flat),
            None => Ok(flat),
        }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = vec![self.kernel.clone(), self.bias.clone()];
        if let Some(norm) = &self.norm {
            p.extend(norm.params());
        }
        p
    }
}

/// One-hop graph propagation of time-flattened features plus a linear map:
/// (B,L,N,D_in) -> (B,N,D_sp).
pub struct SpatialEncoder<S: Scalar> {
    prop: Tensor<S>,
    num_nodes: usize,
    input_len: usize,
    d_in: usize,
    linear: Linear<S>,
    norm: Option<LayerNorm<S>>,
}

impl<S: Scalar> SpatialEncoder<S> {
    pub fn new(
        name: &str,
        graph: &GraphSpec,
        input_len: usize,
        d_in: usize,
        d_sp: usize,
        with_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        let prop = Tensor::constant(graph.propagation_matrix::<S>(), &[n, n])?;
        let linear = Linear::new(&format!("{name}.linear"), input_len * d_in, d_sp, true, true, rng)?;
        let norm = if with_norm {
            Some(LayerNorm::new(&format!("{name}.norm"), d_sp, true)?)
        } else {
            None
        };
        Ok(SpatialEncoder {
            prop,
            num_nodes: n,
            input_len,
            d_in,
            linear,
            norm,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 4
            || shape[1] != self.input_len
            || shape[2] != self.num_nodes
            || shape[3] != self.d_in
        {
            return Err(Error::contract(
                "SpatialEncoder::forward",
                format!(
                    "expected (B,{},{},{}), got {:?}",
                    self.input_len, self.num_nodes, self.d_in, shape
                ),
            ));
        }
        let (b, l, n, d_in) = (shape[0], shape[1], shape[2], shape[3]);
        // (B,L,N,D) -> (B,N,L*D), propagate over nodes, then project.
        let flat = x.permute(&[0, 2, 1, 3])?.reshape(&[b, n, l * d_in])?;
        let propagated = self.prop.matmul(&flat)?;
        let projected = self.linear.forward(&propagated)?;
        match &self.norm {
            Some(norm) => norm.forward(&projected),
            None => Ok(projected),
        }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.linear.params();
        if let Some(norm) = &self.norm {
            p.extend(norm.params());
        }
        p
    }
}

struct QueryFusionLayer<S: Scalar> {
    ffn: Ffn<S>,
    norm: LayerNorm<S>,
}

/// Fuses decoupled embeddings into the query: concat -> Linear_Q -> stacked
/// residual layers LayerNorm(x + FFN(x)).
pub struct QueryGenerator<S: Scalar> {
    linear_q: Linear<S>,
    layers: Vec<QueryFusionLayer<S>>,
}

impl<S: Scalar> QueryGenerator<S> {
    pub fn new(
        name: &str,
        d_sp: usize,
        d_tp: usize,
        d_q: usize,
        generator_layers: usize,
        mlp_ratio: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let linear_q = Linear::new(&format!("{name}.linear_q"), d_sp + d_tp, d_q, true, true, rng)?;
        let mut layers = Vec::with_capacity(generator_layers);
        for i in 0..generator_layers {
            layers.push(QueryFusionLayer {
                ffn: Ffn::new(&format!("{name}.layer{i}.ffn"), d_q, mlp_ratio, dropout, true, rng)?,
                norm: LayerNorm::new(&format!("{name}.layer{i}.norm"), d_q, true)?,
            });
        }
        Ok(QueryGenerator { linear_q, layers })
    }

    pub fn out_dim(&self) -> usize {
        self.linear_q.out_dim()
    }

    pub fn forward(&self, e_sp: &Tensor<S>, e_tp: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        if e_sp.rank() != 3 || e_tp.rank() != 3 || e_sp.shape()[..2] != e_tp.shape()[..2] {
            return Err(Error::shape("generate_query", e_sp.shape(), e_tp.shape()));
        }
        let merged = concat(&[e_sp, e_tp], -1)?;
        let mut q = self.linear_q.forward(&merged)?;
        for layer in &self.layers {
            let branch = layer.ffn.forward(&q, ctx)?;
            q = layer.norm.forward(&q.add(&branch)?)?;
        }
        Ok(q)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.linear_q.params();
        for layer in &self.layers {
            p.extend(layer.ffn.params());
            p.extend(layer.norm.params());
        }
        p
    }
}

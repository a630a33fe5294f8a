//! Full forecasting model: decoupled encoders, query generation,
//! retrieval and fusion, and the prediction stage, assembled from one
//! configuration.
//!
//! The forward pass takes the pattern banks as read-only arguments so a
//! single model can run with live banks during training, frozen banks at
//! evaluation, or no banks at all. Ablation modes rewire the fused
//! features without touching parameter construction, so the same seed
//! yields bitwise-identical weights across modes.

use rand_chacha::ChaCha8Rng;

use crate::config::{OutputType, RunConfig};
use crate::encoder::{GraphSpec, QueryGenerator, SpatialEncoder, TemporalConvKind, TemporalEncoder};
use crate::error::Result;
use crate::fusion::{CrossFusion, RetrievalBatch, Retriever};
use crate::nn::{FwdCtx, Param};
use crate::predictor::{Backbone, MlpBackbone, Predictor};
use crate::scalar::Scalar;
use crate::store::MemoryBank;
use crate::tensor::{concat, Tensor};

/// Everything one forward pass produces beyond the prediction: the
/// training loop feeds encodings into the banks, queries into the
/// relevance window, and retrieval hits into momentum updates.
pub struct ForwardOut<S: Scalar> {
    /// (B, H, N, D_out)
    pub prediction: Tensor<S>,
    /// (B, N, D_q)
    pub query: Tensor<S>,
    /// (B, N, D_q/2)
    pub e_sp: Tensor<S>,
    /// (B, N, D_q/2)
    pub e_tp: Tensor<S>,
    /// (B, N, D_r); present whenever retrieval ran.
    pub projected: Option<Tensor<S>>,
    pub spatial_hits: Option<RetrievalBatch<S>>,
    pub temporal_hits: Option<RetrievalBatch<S>>,
    /// True when no retrieved pattern reached the predictor.
    pub query_only: bool,
}

/// The assembled model.
pub struct Rast<S: Scalar> {
    temporal: TemporalEncoder<S>,
    spatial: SpatialEncoder<S>,
    generator: QueryGenerator<S>,
    retriever: Retriever<S>,
    fusion: CrossFusion<S>,
    predictor: Predictor<S>,
    output_type: OutputType,
    query_dim: usize,
    retrieval_dim: usize,
}

impl<S: Scalar> std::fmt::Debug for Rast<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rast")
            .field("output_type", &self.output_type)
            .field("query_dim", &self.query_dim)
            .field("retrieval_dim", &self.retrieval_dim)
            .field("params", &self.params().len())
            .finish()
    }
}

impl<S: Scalar> Rast<S> {
    /// Builds the model with the default trainable MLP backbone.
    pub fn new(cfg: &RunConfig, graph: &GraphSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::Mlp(MlpBackbone::new(
            "predictor.mlp",
            cfg.query_dim + cfg.retrieval_dim,
            cfg.query_dim,
            cfg.mlp_ratio,
            cfg.dropout,
            cfg.frozen_backbone,
            rng,
        )?);
        Self::with_backbone(cfg, graph, backbone, rng)
    }

    /// Builds the model around a caller-supplied backbone.
    pub fn with_backbone(
        cfg: &RunConfig,
        graph: &GraphSpec,
        backbone: Backbone<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d_half = cfg.decoupled_dim();
        let temporal = TemporalEncoder::new(
            "temporal",
            cfg.input_len,
            cfg.d_input,
            d_half,
            TemporalConvKind::Conv2d,
            true,
            rng,
        )?;
        let spatial = SpatialEncoder::new("spatial", graph, cfg.input_len, cfg.d_input, d_half, true, rng)?;
        let generator = QueryGenerator::new(
            "query",
            d_half,
            d_half,
            cfg.query_dim,
            cfg.generator_layers,
            cfg.mlp_ratio,
            cfg.dropout,
            rng,
        )?;
        let retriever = Retriever::new("retriever", cfg.query_dim, cfg.retrieval_dim, cfg.top_k, rng)?;
        let fusion = CrossFusion::new("fusion", cfg.retrieval_dim, cfg.n_heads, cfg.attn_dropout, rng)?;
        let predictor = Predictor::new(
            "predictor",
            cfg.query_dim + cfg.retrieval_dim,
            cfg.retrieval_dim,
            cfg.output_len,
            cfg.d_output,
            cfg.mlp_ratio,
            cfg.dropout,
            backbone,
            rng,
        )?;
        Ok(Rast {
            temporal,
            spatial,
            generator,
            retriever,
            fusion,
            predictor,
            output_type: cfg.output_type,
            query_dim: cfg.query_dim,
            retrieval_dim: cfg.retrieval_dim,
        })
    }

    pub fn output_type(&self) -> OutputType {
        self.output_type
    }

    pub fn backbone(&self) -> &Backbone<S> {
        self.predictor.backbone()
    }

    /// `x` is (B, L, N, D_in); banks are searched read-only when given.
    /// Without banks, or in query-only mode, the fused features degrade
    /// to the zero-padded query.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        banks: Option<(&MemoryBank<S>, &MemoryBank<S>)>,
        ctx: &mut FwdCtx,
    ) -> Result<ForwardOut<S>> {
        let e_tp = self.temporal.forward(x)?;
        let e_sp = self.spatial.forward(x)?;
        let q_st = self.generator.forward(&e_sp, &e_tp, ctx)?;
        let qshape = q_st.shape().to_vec();
        let (b, n) = (qshape[0], qshape[1]);

        let wants_retrieval = self.output_type != OutputType::QueryOnly;
        let mut projected = None;
        let mut spatial_hits = None;
        let mut temporal_hits = None;
        let degraded_h_f = |q: &Tensor<S>| {
            let zero_r = Tensor::zeros(&[b, n, self.retrieval_dim]);
            if self.output_type == OutputType::RetrievalOnly {
                let zero_q = Tensor::zeros(&[b, n, self.query_dim]);
                concat(&[&zero_q, &zero_r], -1)
            } else {
                concat(&[q, &zero_r], -1)
            }
        };
        let searchable = match banks {
            // A non-finite projection cannot be searched; degrade instead
            // of handing poisoned vectors to the store.
            Some(pair) if wants_retrieval => {
                let proj = self.retriever.project(&q_st)?;
                proj.all_finite().then(|| (pair, proj))
            }
            _ => None,
        };
        let (h_f, query_only) = match searchable {
            Some(((sp_bank, tp_bank), proj)) => {
                let sp = self.retriever.retrieve(&proj, sp_bank)?;
                let tp = self.retriever.retrieve(&proj, tp_bank)?;
                let fused = self.fusion.forward(&q_st, &proj, &sp, &tp, ctx)?;
                let degraded = fused.query_only;
                let h_f = if self.output_type == OutputType::RetrievalOnly {
                    let zero_q = Tensor::zeros(&[b, n, self.query_dim]);
                    concat(&[&zero_q, &fused.r_f], -1)?
                } else {
                    fused.h_f
                };
                projected = Some(proj);
                spatial_hits = Some(sp);
                temporal_hits = Some(tp);
                (h_f, degraded)
            }
            None => (degraded_h_f(&q_st)?, true),
        };

        let zero_backbone = self.output_type == OutputType::NoMlp;
        let prediction = self.predictor.forward(&h_f, zero_backbone, ctx)?;
        Ok(ForwardOut {
            prediction,
            query: q_st,
            e_sp,
            e_tp,
            projected,
            spatial_hits,
            temporal_hits,
            query_only,
        })
    }

    /// All parameters in a fixed construction order; names are unique and
    /// stable, which checkpointing relies on.
    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.temporal.params();
        p.extend(self.spatial.params());
        p.extend(self.generator.params());
        p.extend(self.retriever.params());
        p.extend(self.fusion.params());
        p.extend(self.predictor.params());
        p
    }

    pub fn trainable_params(&self) -> Vec<Param<S>> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }
}

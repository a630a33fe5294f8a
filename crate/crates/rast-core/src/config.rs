//! Run configuration: every model, store, and training knob with its
//! default, plus validation of the cross-field constraints. Unknown keys
//! are rejected so typos fail loudly instead of silently using defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Dtype;

/// Ablation switch for the forward path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputType {
    /// Query and fused retrieval both feed the predictor.
    Full,
    /// Retrieval disabled: the fused features are the query zero-padded.
    QueryOnly,
    /// Query zeroed out: only the fused retrieval reaches the predictor.
    RetrievalOnly,
    /// Backbone output zeroed: only the enhancement branch feeds the head.
    NoMlp,
}

impl OutputType {
    pub fn name(self) -> &'static str {
        match self {
            OutputType::Full => "full",
            OutputType::QueryOnly => "query_only",
            OutputType::RetrievalOnly => "retrieval_only",
            OutputType::NoMlp => "no_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(OutputType::Full),
            "query_only" => Ok(OutputType::QueryOnly),
            "retrieval_only" => Ok(OutputType::RetrievalOnly),
            "no_mlp" => Ok(OutputType::NoMlp),
            other => Err(Error::config(format!(
                "unknown output_type {other:?}; expected full, query_only, retrieval_only, or no_mlp"
            ))),
        }
    }
}

/// Numeric width the run computes in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Index flavor used at bank rebuild time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Ivf,
}

/// Lifecycle knobs of the two pattern banks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub capacity: usize,
    pub decay_epochs: u32,
    pub prune_threshold: f64,
    pub blend_threshold: f64,
    pub lru_capacity: usize,
    pub recent_query_cap: usize,
    pub kmeans_iters: usize,
    pub index: IndexKind,
    /// Coarse cell count; defaults to ceil(sqrt(entries)) when absent.
    pub n_list: Option<usize>,
    /// Cells scanned per query; defaults to ceil(n_list / 4) when absent.
    pub n_probe: Option<usize>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            capacity: 1000,
            decay_epochs: 50,
            prune_threshold: 0.3,
            blend_threshold: 0.5,
            lru_capacity: 1024,
            recent_query_cap: 4096,
            kmeans_iters: 25,
            index: IndexKind::Ivf,
            n_list: None,
            n_probe: None,
        }
    }
}

impl StoreConfig {
    pub fn policy(&self) -> crate::store::StorePolicy {
        crate::store::StorePolicy {
            capacity: self.capacity,
            decay_epochs: self.decay_epochs,
            prune_threshold: self.prune_threshold,
            blend_threshold: self.blend_threshold,
            lru_capacity: self.lru_capacity,
            recent_query_cap: self.recent_query_cap,
            kmeans_iters: self.kmeans_iters,
        }
    }

    pub fn index_choice(&self) -> crate::store::IndexChoice {
        match self.index {
            IndexKind::Flat => crate::store::IndexChoice::Flat,
            IndexKind::Ivf => crate::store::IndexChoice::Ivf,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("store.capacity must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::config("store.prune_threshold must lie in [0, 1]"));
        }
        if self.blend_threshold < 0.0 {
            return Err(Error::config("store.blend_threshold must be >= 0"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::config("store.kmeans_iters must be >= 1"));
        }
        if self.n_list == Some(0) {
            return Err(Error::config("store.n_list must be >= 1 when set"));
        }
        if self.n_probe == Some(0) {
            return Err(Error::config("store.n_probe must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Full run configuration. Field defaults reproduce the reference
/// training setup; `validate` enforces the cross-field constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Data windowing.
    pub input_len: usize,
    pub output_len: usize,
    pub d_input: usize,
    pub d_output: usize,
    pub null_val: f64,
    pub split: [f64; 3],

    // Model widths.
    pub query_dim: usize,
    pub retrieval_dim: usize,
    pub generator_layers: usize,
    pub decoupled_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub output_type: OutputType,
    pub frozen_backbone: bool,

    // Retrieval.
    pub top_k: usize,
    pub tau: f64,
    pub lambda_div: f64,
    pub update_interval: usize,
    pub store: StoreConfig,

    // Optimization.
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub eps: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warm_epochs: usize,
    pub cl_epochs: usize,
    pub max_norm: f64,
    pub patience: usize,

    // Run environment.
    pub seed: u64,
    pub precision: Precision,
    pub use_amp: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_len: 12,
            output_len: 12,
            d_input: 3,
            d_output: 1,
            null_val: 0.0,
            split: [0.7, 0.1, 0.2],

            query_dim: 256,
            retrieval_dim: 128,
            generator_layers: 3,
            decoupled_layers: 1,
            n_heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.1,
            attn_dropout: 0.1,
            output_type: OutputType::Full,
            frozen_backbone: false,

            top_k: 5,
            tau: 0.1,
            lambda_div: 0.5,
            update_interval: 10,
            store: StoreConfig::default(),

            batch_size: 32,
            lr: 0.002,
            max_epochs: 300,
            weight_decay: 1e-5,
            eps: 1e-8,
            milestones: vec![1, 30, 38, 46, 54, 62, 70, 80],
            gamma: 0.5,
            warm_epochs: 30,
            cl_epochs: 3,
            max_norm: 5.0,
            patience: 30,

            seed: 1,
            precision: Precision::F32,
            use_amp: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(Error::config("input_len and output_len must be >= 1"));
        }
        if self.d_input == 0 || self.d_output == 0 {
            return Err(Error::config("d_input and d_output must be >= 1"));
        }
        if !self.null_val.is_finite() {
            return Err(Error::config("null_val must be finite"));
        }
        let split_sum: f64 = self.split.iter().sum();
        if (split_sum - 1.0).abs() > 1e-9 || self.split.iter().any(|r| *r <= 0.0) {
            return Err(Error::config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        if self.query_dim != 2 * self.retrieval_dim {
            return Err(Error::config(format!(
                "query_dim ({}) must equal 2 * retrieval_dim ({}): the decoupled embeddings \
                 each take half the query width and bank vectors take the retrieval width",
                self.query_dim, self.retrieval_dim
            )));
        }
        if self.retrieval_dim == 0 {
            return Err(Error::config("retrieval_dim must be >= 1"));
        }
        if self.n_heads == 0 || self.retrieval_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "n_heads ({}) must divide retrieval_dim ({})",
                self.n_heads, self.retrieval_dim
            )));
        }
        if self.decoupled_layers != 1 {
            return Err(Error::config(
                "decoupled_layers currently supports exactly 1 encoder layer per dimension",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.lambda_div < 0.0 {
            return Err(Error::config("lambda_div must be >= 0"));
        }
        if self.update_interval == 0 {
            return Err(Error::config("update_interval must be >= 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1"));
        }
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return Err(Error::config("lr and eps must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("milestones must be strictly increasing"));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }
        if self.cl_epochs == 0 {
            return Err(Error::config("cl_epochs must be >= 1"));
        }
        if self.max_norm <= 0.0 {
            return Err(Error::config("max_norm must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.use_amp {
            return Err(Error::config(
                "use_amp is not supported by this implementation; set it to false",
            ));
        }
        self.store.validate()
    }

    /// Width of each decoupled embedding; the two halves concatenate to
    /// the query width.
    pub fn decoupled_dim(&self) -> usize {
        self.query_dim / 2
    }
}

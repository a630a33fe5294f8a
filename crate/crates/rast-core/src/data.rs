//! Dataset plumbing: the STB on-disk format, adjacency lists, seeded
//! synthetic generators, and the windowed bundle that feeds training.
//!
//! Normalization is z-score per channel, fitted only on time steps
//! covered by training inputs, so statistics cannot leak from the
//! validation or test ranges. Entries equal to `null_val` pass through
//! normalization verbatim: the sentinel survives into batches, where the
//! masked loss and metrics exclude it. A real value can only collide with
//! the sentinel if it normalizes exactly to it, which the offset
//! synthetic corpora avoid.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::GraphSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First line of an STB file, as JSON. The payload that follows is
/// row-major (T, N, D_in) little-endian f32.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StbHeader {
    pub version: u32,
    pub t: usize,
    pub n: usize,
    pub d_in: usize,
    pub channels: Vec<String>,
    pub null_val: f64,
}

/// A loaded or generated series before windowing.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub header: StbHeader,
    /// Row-major (T, N, D_in).
    pub values: Vec<f64>,
    /// Provenance string echoed into run manifests.
    pub source: String,
}

pub const STB_VERSION: u32 = 1;

/// Reads an STB file: one JSON header line, newline, f32 payload.
pub fn load_stb(path: &Path) -> Result<RawSeries> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len(), "missing header line"))?;
    let header: StbHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format(0, format!("bad header JSON: {e}")))?;
    if header.version != STB_VERSION {
        return Err(Error::format(
            0,
            format!("unsupported version {} (expected {STB_VERSION})", header.version),
        ));
    }
    if header.t == 0 || header.n == 0 || header.d_in == 0 {
        return Err(Error::format(0, "t, n, and d_in must all be >= 1"));
    }
    if header.channels.len() != header.d_in {
        return Err(Error::format(
            0,
            format!(
                "header lists {} channel names for d_in {}",
                header.channels.len(),
                header.d_in
            ),
        ));
    }
    let payload = &bytes[newline + 1..];
    let expected = header.t * header.n * header.d_in * 4;
    if payload.len() != expected {
        return Err(Error::format(
            newline + 1,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(expected / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            let (t, rest) = (i / (header.n * header.d_in), i % (header.n * header.d_in));
            return Err(Error::data(format!(
                "non-finite value at flat index {i} (t={t}, node={}, channel={})",
                rest / header.d_in,
                rest % header.d_in
            )));
        }
        values.push(v);
    }
    Ok(RawSeries {
        header,
        values,
        source: path.display().to_string(),
    })
}

/// Writes an STB file; values are cast to f32 for the payload.
pub fn save_stb(path: &Path, header: &StbHeader, values: &[f64]) -> Result<()> {
    let expected = header.t * header.n * header.d_in;
    if values.len() != expected {
        return Err(Error::contract(
            "save_stb",
            format!("{} values for a {expected}-element header", values.len()),
        ));
    }
    let mut bytes = serde_json::to_vec(header).map_err(|e| Error::data(e.to_string()))?;
    bytes.push(b'\n');
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses an edge-list CSV of `src,dst,weight` lines into a graph over
/// `num_nodes` nodes. Blank lines and lines starting with `#` are skipped.
pub fn load_adjacency_csv(path: &Path, num_nodes: usize) -> Result<GraphSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "adjacency line {}: expected src,dst,weight, got {line:?}",
                lineno + 1
            )));
        }
        let parse_node = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::data(format!("adjacency line {}: bad {what} {s:?}", lineno + 1)))
        };
        let src = parse_node(fields[0], "source")?;
        let dst = parse_node(fields[1], "destination")?;
        let weight: f64 = fields[2]
            .parse()
            .map_err(|_| Error::data(format!("adjacency line {}: bad weight {:?}", lineno + 1, fields[2])))?;
        if src >= num_nodes || dst >= num_nodes {
            return Err(Error::data(format!(
                "adjacency line {}: node out of range for {num_nodes} nodes",
                lineno + 1
            )));
        }
        edges.push((src, dst, weight));
    }
    GraphSpec::from_edges(num_nodes, &edges)
}

/// Bidirectional ring over `n` nodes, the default graph for synthetic
/// series.
pub fn ring_graph(n: usize) -> Result<GraphSpec> {
    let mut adj = vec![0.0; n * n];
    if n > 1 {
        for i in 0..n {
            adj[i * n + (i + 1) % n] = 1.0;
            adj[((i + 1) % n) * n + i] = 1.0;
        }
    }
    GraphSpec::new(n, adj)
}

/// Built-in generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Per-node phase-shifted sinusoids; noiseless, easily overfit.
    Sine,
    /// Nodes alternate between two periodic regimes at seeded switch
    /// times, with small observation noise; past regimes recur, so
    /// retrieved history carries signal.
    RegimeSwitch,
    /// Pure random walk; nothing to retrieve.
    RandomWalk,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SyntheticKind::Sine),
            "regime-switch" | "regime_switch" => Ok(SyntheticKind::RegimeSwitch),
            "random-walk" | "random_walk" => Ok(SyntheticKind::RandomWalk),
            other => Err(Error::data(format!(
                "unknown synthetic kind {other:?}; expected sine, regime-switch, or random-walk"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Sine => "sine",
            SyntheticKind::RegimeSwitch => "regime-switch",
            SyntheticKind::RandomWalk => "random-walk",
        }
    }
}

/// Parsed form of a `synthetic:<kind>[:k=v,...]` data spec.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub t: usize,
    pub d_in: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Parses the part after `synthetic:`, e.g. `sine:n=8,t=512,seed=3`.
    /// Keys: n (nodes, default 8), t (steps, default 512), d (channels,
    /// default 1), seed (default 1).
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind_str, rest) = match spec.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (spec, None),
        };
        let mut out = SyntheticSpec {
            kind: SyntheticKind::parse(kind_str)?,
            n: 8,
            t: 512,
            d_in: 1,
            seed: 1,
        };
        if let Some(rest) = rest {
            for pair in rest.split(',').filter(|p| !p.is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::data(format!("synthetic spec: expected key=value, got {pair:?}")))?;
                let parsed: u64 = value
                    .parse()
                    .map_err(|_| Error::data(format!("synthetic spec: bad value for {key}: {value:?}")))?;
                match key {
                    "n" => out.n = parsed as usize,
                    "t" => out.t = parsed as usize,
                    "d" => out.d_in = parsed as usize,
                    "seed" => out.seed = parsed,
                    other => {
                        return Err(Error::data(format!("synthetic spec: unknown key {other:?}")))
                    }
                }
            }
        }
        if out.n == 0 || out.t == 0 || out.d_in == 0 {
            return Err(Error::data("synthetic spec: n, t, and d must be >= 1"));
        }
        Ok(out)
    }

    pub fn generate(&self) -> RawSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (t, n, d) = (self.t, self.n, self.d_in);
        let mut values = vec![0.0f64; t * n * d];
        let tau = std::f64::consts::TAU;
        match self.kind {
            SyntheticKind::Sine => {
                for step in 0..t {
                    for node in 0..n {
                        for c in 0..d {
                            let period = 24.0 + 8.0 * c as f64;
                            let phase = tau * node as f64 / n as f64;
                            values[(step * n + node) * d + c] =
                                2.0 + (tau * step as f64 / period + phase).sin();
                        }
                    }
                }
            }
            SyntheticKind::RegimeSwitch => {
                for node in 0..n {
                    // Seeded dwell times; regimes recur across the series.
                    let mut regime = rng.random_range(0..2u32);
                    let mut until = rng.random_range(30..60usize);
                    for step in 0..t {
                        if step == until {
                            regime ^= 1;
                            until = step + rng.random_range(30..60usize);
                        }
                        let s = step as f64;
                        let base = if regime == 0 {
                            2.0 + (tau * s / 12.0).sin()
                        } else {
                            3.0 + 0.5 * (tau * s / 20.0).sin() + 0.3 * (tau * s / 5.0).sin()
                        };
                        for c in 0..d {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            let aux = 0.25 * c as f64 * (tau * s / 288.0).cos();
                            values[(step * n + node) * d + c] = base + aux + 0.05 * noise;
                        }
                    }
                }
            }
            SyntheticKind::RandomWalk => {
                let mut state = vec![2.0f64; n * d];
                for step in 0..t {
                    for (i, x) in state.iter_mut().enumerate() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        *x += 0.1 * noise;
                        values[step * n * d + i] = *x;
                    }
                }
            }
        }
        RawSeries {
            header: StbHeader {
                version: STB_VERSION,
                t,
                n,
                d_in: d,
                channels: (0..d).map(|c| format!("c{c}")).collect(),
                null_val: 0.0,
            },
            values,
            source: format!("synthetic:{}:n={n},t={t},d={d},seed={}", self.kind.name(), self.seed),
        }
    }
}

/// Which contiguous block of window starts a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, val, or test"
            ))),
        }
    }
}

/// A normalized, windowed series ready for batching. Window starts are
/// split in temporal order; the target is the first `d_out` channels.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    name: String,
    /// Normalized row-major (T, N, D_in); null entries left verbatim.
    series: Vec<f64>,
    t: usize,
    n: usize,
    d_in: usize,
    d_out: usize,
    input_len: usize,
    output_len: usize,
    null_val: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    constant_channels: Vec<bool>,
    graph: GraphSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
}

impl DatasetBundle {
    pub fn new(raw: RawSeries, graph: GraphSpec, cfg: &RunConfig) -> Result<Self> {
        let (t, n, d_in) = (raw.header.t, raw.header.n, raw.header.d_in);
        if graph.num_nodes() != n {
            return Err(Error::data(format!(
                "graph has {} nodes, series has {n}",
                graph.num_nodes()
            )));
        }
        if cfg.d_output > d_in {
            return Err(Error::config(format!(
                "d_output {} exceeds series channel count {d_in}",
                cfg.d_output
            )));
        }
        let (input_len, output_len) = (cfg.input_len, cfg.output_len);
        if t < input_len + output_len {
            return Err(Error::data(format!(
                "series length {t} is shorter than one window ({input_len}+{output_len})"
            )));
        }
        let windows = t - input_len - output_len + 1;
        let n_train = (cfg.split[0] * windows as f64).floor() as usize;
        let n_val = (cfg.split[1] * windows as f64).floor() as usize;
        let n_test = windows - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::data(format!(
                "split {:?} of {windows} windows leaves an empty slice ({n_train}/{n_val}/{n_test})",
                cfg.split
            )));
        }

        // Statistics come from the steps train inputs can see and nothing
        // later; null entries never contribute.
        let null_val = raw.header.null_val;
        let stat_steps = n_train + input_len - 1;
        let mut mu = vec![0.0; d_in];
        let mut sigma = vec![0.0; d_in];
        let mut constant_channels = vec![false; d_in];
        for c in 0..d_in {
            let mut sum = 0.0;
            let mut count = 0usize;
            for step in 0..stat_steps {
                for node in 0..n {
                    let v = raw.values[(step * n + node) * d_in + c];
                    if v != null_val {
                        sum += v;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::data(format!(
                    "channel {c} has no valid entries in the training range"
                )));
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for step in 0..stat_steps {
                for node in 0..n {
                    let v = raw.values[(step * n + node) * d_in + c];
                    if v != null_val {
                        sq += (v - mean) * (v - mean);
                    }
                }
            }
            let std = (sq / count as f64).sqrt();
            mu[c] = mean;
            if std < 1e-12 {
                constant_channels[c] = true;
                sigma[c] = 1.0;
            } else {
                sigma[c] = std;
            }
        }

        let mut series = raw.values;
        for (i, v) in series.iter_mut().enumerate() {
            if *v != null_val {
                let c = i % d_in;
                *v = (*v - mu[c]) / sigma[c];
            }
        }

        Ok(DatasetBundle {
            name: raw.source,
            series,
            t,
            n,
            d_in,
            d_out: cfg.d_output,
            input_len,
            output_len,
            null_val,
            mu,
            sigma,
            constant_channels,
            graph,
            n_train,
            n_val,
            n_test,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_steps(&self) -> usize {
        self.t
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn null_val(&self) -> f64 {
        self.null_val
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn num_windows(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn stats(&self) -> (&[f64], &[f64]) {
        (&self.mu, &self.sigma)
    }

    pub fn constant_channels(&self) -> &[bool] {
        &self.constant_channels
    }

    /// Window starts of one split, in temporal order.
    pub fn split_starts(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.num_windows(),
        }
    }

    /// Builds (B, L, N, D_in) inputs and (B, H, N, D_out) targets for the
    /// given window starts.
    pub fn make_batch<S: Scalar>(&self, starts: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let (b, l, h) = (starts.len(), self.input_len, self.output_len);
        if b == 0 {
            return Err(Error::contract("make_batch", "empty batch"));
        }
        let (n, d_in, d_out) = (self.n, self.d_in, self.d_out);
        let mut x = Vec::with_capacity(b * l * n * d_in);
        let mut y = Vec::with_capacity(b * h * n * d_out);
        for &s in starts {
            if s + l + h > self.t {
                return Err(Error::contract(
                    "make_batch",
                    format!("window start {s} overruns the series"),
                ));
            }
            for step in s..s + l {
                let base = step * n * d_in;
                x.extend(self.series[base..base + n * d_in].iter().map(|&v| S::of(v)));
            }
            for step in s + l..s + l + h {
                for node in 0..n {
                    let base = (step * n + node) * d_in;
                    y.extend(self.series[base..base + d_out].iter().map(|&v| S::of(v)));
                }
            }
        }
        Ok((
            Tensor::constant(x, &[b, l, n, d_in])?,
            Tensor::constant(y, &[b, h, n, d_out])?,
        ))
    }

    /// Inverse of normalization for one value of one channel.
    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.sigma[channel] + self.mu[channel]
    }

    /// De-normalizes model output laid out with channel as the innermost
    /// axis of width `d_out`. Predictions carry no null sentinel.
    pub fn denormalize_predictions<S: Scalar>(&self, values: &[S]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| self.denormalize(v.as_f64(), i % self.d_out))
            .collect()
    }

    /// De-normalizes targets, keeping null entries equal to the sentinel
    /// so metric masking still recognizes them.
    pub fn denormalize_targets<S: Scalar>(&self, values: &[S]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = v.as_f64();
                if v == self.null_val {
                    v
                } else {
                    self.denormalize(v, i % self.d_out)
                }
            })
            .collect()
    }
}

/// Resolves a `--data` argument: `synthetic:<spec>` or a path to an STB
/// file with an optional adjacency CSV beside it.
pub fn load_dataset(data: &str, adjacency: Option<&Path>, cfg: &RunConfig) -> Result<DatasetBundle> {
    let (raw, graph) = if let Some(spec) = data.strip_prefix("synthetic:") {
        let spec = SyntheticSpec::parse(spec)?;
        let raw = spec.generate();
        let graph = match adjacency {
            Some(path) => load_adjacency_csv(path, raw.header.n)?,
            None => ring_graph(raw.header.n)?,
        };
        (raw, graph)
    } else {
        let raw = load_stb(Path::new(data))?;
        let graph = match adjacency {
            Some(path) => load_adjacency_csv(path, raw.header.n)?,
            None => ring_graph(raw.header.n)?,
        };
        (raw, graph)
    };
    if raw.header.d_in != cfg.d_input {
        return Err(Error::config(format!(
            "config d_input {} does not match series channel count {}",
            cfg.d_input, raw.header.d_in
        )));
    }
    if (raw.header.null_val - cfg.null_val).abs() > 0.0 {
        return Err(Error::config(format!(
            "config null_val {} does not match series null_val {}",
            cfg.null_val, raw.header.null_val
        )));
    }
    DatasetBundle::new(raw, graph, cfg)
}

//! Search-index benchmark: Flat scan versus IVF on clustered vectors.
//!
//! The sweep fills two banks with the same seeded Gaussian mixture at each
//! requested population, one under a Flat scan and one under IVF, then
//! alternates timing passes between them so host drift hits both sides of
//! the comparison equally. The reported ratio is the median of per-pass
//! IVF/Flat ratios; the pairing cancels slow clock and load drift that
//! would otherwise swamp the few-percent scaling signal. Recall scores
//! IVF answers against the exact Flat ranking on the same query set.

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::store::{BankKind, IndexChoice, MemoryBank, StorePolicy};

/// Knobs for one sweep. `sizes` lists the bank populations to measure,
/// in the order the rows should appear.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub clusters: usize,
    pub k: usize,
    /// Queries per timing pass.
    pub n_queries: usize,
    /// Paired timing passes; the median per-pass ratio wins.
    pub repeats: usize,
    /// Fixed probe budget applied at every population; `None` keeps the
    /// store's own schedule, which grows probes with the list count and
    /// therefore keeps probed work a near-constant fraction of the bank.
    /// A fixed budget is what makes probed work grow sublinearly with the
    /// population, which is the scaling the sweep exists to show.
    pub n_probe: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1000, 8000],
            dim: 32,
            clusters: 10,
            k: 5,
            n_queries: 256,
            repeats: 11,
            n_probe: Some(12),
            seed: 17,
        }
    }
}

/// One measured population.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub m: usize,
    /// Median over passes of mean microseconds per Flat query.
    pub flat_us: f64,
    /// Median over passes of mean microseconds per IVF query.
    pub ivf_us: f64,
    /// Median of the per-pass IVF/Flat latency ratios; sublinear IVF
    /// scaling shows up as a decrease along growing `m`.
    pub ratio: f64,
    /// Fraction of the exact top-k that IVF returned, averaged over the
    /// recall query set.
    pub recall: f64,
    pub n_list: usize,
    pub n_probe: usize,
}

/// Sweep output plus the scaling verdict over consecutive rows.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub k: usize,
    /// The IVF/Flat latency ratio strictly decreased row to row.
    pub ratio_decreasing: bool,
}

impl BenchReport {
    /// Table with one header line and one line per measured population.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,k,flat_us,ivf_us,ratio,recall,n_list,n_probe\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{:.4},{:.4},{},{}\n",
                r.m, self.k, r.flat_us, r.ivf_us, r.ratio, r.recall, r.n_list, r.n_probe
            ));
        }
        out
    }
}

/// Draws `count` vectors from a mixture of `clusters` spherical Gaussians
/// with centers in the unit cube. Tight clusters keep nearest neighbors
/// within one mixture component, which is the regime IVF is built for.
fn clustered<S: Scalar>(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    clusters: usize,
) -> Vec<Vec<S>> {
    let sigma = 0.05;
    let centers: Vec<Vec<f64>> = (0..clusters.max(1))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..count)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            (0..dim)
                .map(|j| S::of(c[j]) + S::sample_standard_normal(rng) * S::of(sigma))
                .collect()
        })
        .collect()
}

/// Times one full pass over `queries` and returns mean microseconds per
/// query. The bench bank's result cache holds a single entry, so a pass
/// over distinct queries never gets answered from the cache even when the
/// same set is replayed.
fn timed_pass<S: Scalar>(bank: &MemoryBank<S>, queries: &[Vec<S>], k: usize) -> Result<f64> {
    let start = Instant::now();
    for q in queries {
        let hits = bank.search_topk(q, k)?;
        std::hint::black_box(hits);
    }
    let total = start.elapsed().as_secs_f64() * 1e6;
    Ok(total / queries.len().max(1) as f64)
}

/// Middle element of the sorted sample; even lengths take the lower middle.
fn median(sample: &mut [f64]) -> f64 {
    sample.sort_by(f64::total_cmp);
    sample[(sample.len() - 1) / 2]
}

/// Runs the Flat-versus-IVF sweep over `cfg.sizes`. Each population fills
/// two banks with identical clustered vectors, indexes one Flat and one
/// IVF, and alternates timing passes between them; recall compares IVF
/// answers to the exact Flat ranking on the same query set, and `k` above
/// the population simply shrinks both answer sets to the population size.
pub fn bench_store<S: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for (i, &m) in cfg.sizes.iter().enumerate() {
        let data_seed = cfg.seed.wrapping_add(1000 * i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let vectors = clustered::<S>(&mut rng, m, cfg.dim, cfg.clusters);

        let mut policy = StorePolicy::default();
        policy.capacity = m.max(1);
        policy.lru_capacity = 1;
        let mut flat_bank = MemoryBank::<S>::new(BankKind::Temporal, cfg.dim, policy.clone());
        let mut ivf_bank = MemoryBank::<S>::new(BankKind::Temporal, cfg.dim, policy);
        for v in vectors {
            flat_bank.insert_raw(v.clone(), 0.0, 0, 1)?;
            ivf_bank.insert_raw(v, 0.0, 0, 1)?;
        }
        flat_bank.build_index(IndexChoice::Flat, None, None, data_seed)?;
        let report = ivf_bank.build_index(IndexChoice::Ivf, None, cfg.n_probe, data_seed)?;

        let queries = clustered::<S>(&mut rng, cfg.n_queries.max(1), cfg.dim, cfg.clusters);
        let mut recall_sum = 0.0;
        for q in &queries {
            let truth: HashSet<usize> =
                flat_bank.search_topk(q, cfg.k)?.iter().map(|h| h.id).collect();
            let got: HashSet<usize> =
                ivf_bank.search_topk(q, cfg.k)?.iter().map(|h| h.id).collect();
            recall_sum += got.intersection(&truth).count() as f64 / truth.len().max(1) as f64;
        }
        let recall = recall_sum / queries.len().max(1) as f64;

        let mut flats = Vec::with_capacity(cfg.repeats);
        let mut ivfs = Vec::with_capacity(cfg.repeats);
        let mut ratios = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats.max(1) {
            let f = timed_pass(&flat_bank, &queries, cfg.k)?;
            let v = timed_pass(&ivf_bank, &queries, cfg.k)?;
            flats.push(f);
            ivfs.push(v);
            ratios.push(v / f);
        }

        rows.push(BenchRow {
            m,
            flat_us: median(&mut flats),
            ivf_us: median(&mut ivfs),
            ratio: median(&mut ratios),
            recall,
            n_list: report.n_list,
            n_probe: report.n_probe,
        });
    }
    let ratio_decreasing = rows.windows(2).all(|w| w[1].ratio < w[0].ratio);
    Ok(BenchReport {
        rows,
        k: cfg.k,
        ratio_decreasing,
    })
}

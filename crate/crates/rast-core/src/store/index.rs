//! Flat and inverted-file index structures for the memory banks.
//!
//! The IVF variant partitions stored vectors with seeded k-means; queries
//! scan only the lists of the `n_probe` nearest centroids. All arithmetic
//! runs in f64 so index decisions are identical across scalar types.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Search structure over the bank's current entries. `Flat` scans
/// everything; `Ivf` scans a subset of k-means cells.
pub enum IndexState {
    Flat,
    Ivf(IvfIndex),
}

impl IndexState {
    pub fn kind_name(&self) -> &'static str {
        match self {
            IndexState::Flat => "flat",
            IndexState::Ivf(_) => "ivf",
        }
    }
}

pub struct IvfIndex {
    dim: usize,
    /// n_list x dim centroid matrix.
    centroids: Vec<f64>,
    /// Entry ids per centroid cell; every entry id appears exactly once.
    lists: Vec<Vec<u32>>,
    n_probe: usize,
}

impl IvfIndex {
    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    pub fn n_probe(&self) -> usize {
        self.n_probe
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    /// Ids of the `n_probe` cells nearest to the query, ties to the lower
    /// cell id.
    pub fn probe_cells(&self, query: &[f64]) -> Vec<usize> {
        let n_list = self.n_list();
        let mut order: Vec<(f64, usize)> = (0..n_list)
            .map(|c| (sq_dist(query, &self.centroids[c * self.dim..(c + 1) * self.dim]), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .into_iter()
            .take(self.n_probe.min(n_list))
            .map(|(_, c)| c)
            .collect()
    }

    /// Candidate entry ids for a query, in ascending id order.
    pub fn candidates(&self, query: &[f64]) -> Vec<u32> {
        let mut ids = Vec::new();
        for cell in self.probe_cells(query) {
            ids.extend_from_slice(&self.lists[cell]);
        }
        ids.sort_unstable();
        ids
    }
}

/// Builds an IVF index over `vectors` (row-major, `dim` wide) with seeded
/// k-means: a random first centroid, farthest-point completion, then Lloyd
/// iterations with ties going to the lower centroid id. Empty cells keep
/// their previous centroid.
pub fn build_ivf(
    vectors: &[f64],
    dim: usize,
    n_list: usize,
    n_probe: usize,
    iters: usize,
    seed: u64,
) -> IvfIndex {
    use rand::SeedableRng;
    let m = vectors.len() / dim.max(1);
    assert!(n_list >= 1 && n_list <= m, "caller downgrades to Flat otherwise");
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(n_list * dim);
    let first = rng.random_range(0..m);
    centroids.extend_from_slice(row(first));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < n_list * dim {
        let mut best = 0usize;
        for i in 1..m {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        centroids.extend_from_slice(row(best));
        let c = &centroids[centroids.len() - dim..];
        for i in 0..m {
            let d = sq_dist(row(i), c);
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; m];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..m {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..n_list {
                let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            if assignment[i] != best_c {
                assignment[i] = best_c;
                changed = true;
            }
        }
        let mut sums = vec![0.0; n_list * dim];
        let mut counts = vec![0usize; n_list];
        for i in 0..m {
            let c = assignment[i];
            counts[c] += 1;
            for d in 0..dim {
                sums[c * dim + d] += vectors[i * dim + d];
            }
        }
        for c in 0..n_list {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut lists = vec![Vec::new(); n_list];
    for (i, &c) in assignment.iter().enumerate() {
        lists[c].push(i as u32);
    }
    IvfIndex {
        dim,
        centroids,
        lists,
        n_probe: n_probe.max(1),
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

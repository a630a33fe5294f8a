//! Dual-dimension pattern memory: banks of encoded vectors with momentum
//! scores, approximate search, and lifecycle policies.
//!
//! A bank owns an ordered list of entries; entry ids are positions in that
//! list and are only stable within one index generation. Every structural
//! mutation (insert, blend, evict) bumps the generation, resets the index
//! to Flat, and clears the query cache, so cached results can never outlive
//! the entries they refer to. Momentum updates touch scores only and leave
//! ids and similarities valid.
//!
//! Concurrency: searches take `&self` (the cache sits behind a mutex);
//! all mutating policies take `&mut self`. The training loop serializes
//! writes at batch and epoch boundaries.

pub mod index;
pub mod snapshot;

use std::collections::hash_map::DefaultHasher;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use index::{build_ivf, IndexState};

/// Which decoupled dimension a bank stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankKind {
    Spatial,
    Temporal,
}

impl BankKind {
    pub fn tag(self) -> u8 {
        match self {
            BankKind::Spatial => 0,
            BankKind::Temporal => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BankKind::Spatial),
            1 => Some(BankKind::Temporal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BankKind::Spatial => "spatial",
            BankKind::Temporal => "temporal",
        }
    }
}

/// Lifecycle and caching knobs for one bank.
#[derive(Debug, Clone)]
pub struct StorePolicy {
    /// Hard entry cap enforced by eviction of lowest-momentum entries.
    pub capacity: usize,
    /// Entries older than this many epochs are decayed away.
    pub decay_epochs: u32,
    /// Entries whose best normalized similarity exp(s) to recent queries
    /// falls below this are pruned.
    pub prune_threshold: f64,
    /// Fresh vectors blend into their nearest entry when exp(s) reaches
    /// this; otherwise they insert as new entries.
    pub blend_threshold: f64,
    /// Bounded number of cached query results.
    pub lru_capacity: usize,
    /// Reservoir size for the recent-query window used by pruning.
    pub recent_query_cap: usize,
    /// Lloyd iterations for IVF k-means.
    pub kmeans_iters: usize,
}

impl Default for StorePolicy {
    fn default() -> Self {
        StorePolicy {
            capacity: 1000,
            decay_epochs: 50,
            prune_threshold: 0.3,
            blend_threshold: 0.5,
            lru_capacity: 1024,
            recent_query_cap: 4096,
            kmeans_iters: 25,
        }
    }
}

/// One stored pattern: the vector, its momentum score, and bookkeeping.
#[derive(Debug, Clone)]
pub struct PatternEntry<S: Scalar> {
    pub vector: Vec<S>,
    pub momentum: f64,
    pub epoch_stamp: u32,
    pub insert_count: u32,
    pub mean: f64,
    pub variance: f64,
}

impl<S: Scalar> PatternEntry<S> {
    pub fn new(vector: Vec<S>, epoch: u32) -> Self {
        let mut e = PatternEntry {
            vector,
            momentum: 1.0,
            epoch_stamp: epoch,
            insert_count: 1,
            mean: 0.0,
            variance: 0.0,
        };
        e.recompute_stats();
        e
    }

    pub fn recompute_stats(&mut self) {
        let n = self.vector.len().max(1) as f64;
        let mean = self.vector.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let variance = self
            .vector
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        self.mean = mean;
        self.variance = variance;
    }
}

/// One retrieved pattern, ranked by similarity.
#[derive(Debug, Clone)]
pub struct SearchHit<S: Scalar> {
    pub id: usize,
    pub similarity: f64,
    pub momentum: f64,
    pub vector: Vec<S>,
}

#[derive(Debug, Default, Clone)]
pub struct UpdateReport {
    pub inserted: usize,
    pub blended: usize,
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictReason {
    Decay,
    LowRelevance,
    Capacity,
}

impl EvictReason {
    pub fn name(self) -> &'static str {
        match self {
            EvictReason::Decay => "decay",
            EvictReason::LowRelevance => "low_relevance",
            EvictReason::Capacity => "capacity",
        }
    }
}

/// Eviction outcomes; ids refer to positions before the sweep.
#[derive(Debug, Default, Clone)]
pub struct EvictionReport {
    pub evicted: Vec<(usize, EvictReason)>,
    pub survivors: usize,
}

/// Index flavor requested by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexChoice {
    Flat,
    Ivf,
}

#[derive(Debug, Clone)]
pub struct IndexReport {
    pub built: &'static str,
    pub downgraded: bool,
    pub n_list: usize,
    pub n_probe: usize,
    pub generation: u64,
}

/// Negated squared L2 distance: zero iff the vectors coincide, always <= 0.
pub fn similarity<S: Scalar>(q: &[S], v: &[S]) -> Result<f64> {
    if q.len() != v.len() {
        return Err(Error::shape("similarity", &[q.len()], &[v.len()]));
    }
    let mut s = 0.0f64;
    for (a, b) in q.iter().zip(v) {
        let d = a.as_f64() - b.as_f64();
        s += d * d;
    }
    Ok(-s)
}

/// Shannon entropy of softmax(v) in nats; ranges over [0, ln(len)].
pub fn entropy<S: Scalar>(v: &[S]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let mut z = 0.0f64;
    let exps: Vec<f64> = v
        .iter()
        .map(|x| {
            let e = (x.as_f64() - max).exp();
            z += e;
            e
        })
        .collect();
    let mut h = 0.0;
    for e in exps {
        let p = e / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// EMA blend rate derived from a match similarity, kept inside [0.05, 0.95]
/// so blending never freezes or fully overwrites an entry.
pub fn blend_rate(similarity: f64) -> f64 {
    sigmoid(similarity).clamp(0.05, 0.95)
}

/// In-place EMA update: `v <- (1-rate)*v + rate*fresh`.
pub fn ema_blend<S: Scalar>(entry: &mut PatternEntry<S>, fresh: &[S], rate: f64) {
    let r = S::of(rate);
    let keep = S::of(1.0 - rate);
    for (v, f) in entry.vector.iter_mut().zip(fresh) {
        *v = keep * *v + r * *f;
    }
    entry.recompute_stats();
}

/// Bounded uniform sample over a stream (algorithm R). Deterministic given
/// the caller's RNG stream.
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    cap: usize,
    seen: u64,
    items: Vec<T>,
}

impl<T> Reservoir<T> {
    pub fn new(cap: usize) -> Self {
        Reservoir {
            cap,
            seen: 0,
            items: Vec::new(),
        }
    }

    pub fn observe(&mut self, item: T, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(item);
        } else if self.cap > 0 {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = item;
            }
        }
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.seen = 0;
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    qhash: u64,
    k: usize,
    generation: u64,
}

struct CacheSlot {
    stamp: u64,
    query_bits: Vec<u64>,
    ranked: Vec<(usize, f64)>,
}

/// LRU cache with lazy queue cleanup; exact-bit query comparison guards
/// against hash collisions.
struct LruCache {
    cap: usize,
    map: HashMap<CacheKey, CacheSlot>,
    queue: VecDeque<(CacheKey, u64)>,
    tick: u64,
    hits: u64,
    misses: u64,
}

impl LruCache {
    fn new(cap: usize) -> Self {
        LruCache {
            cap,
            map: HashMap::new(),
            queue: VecDeque::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    fn get(&mut self, key: &CacheKey, query_bits: &[u64]) -> Option<Vec<(usize, f64)>> {
        self.tick += 1;
        let tick = self.tick;
        if let Some(slot) = self.map.get_mut(key) {
            if slot.query_bits == query_bits {
                slot.stamp = tick;
                self.queue.push_back((key.clone(), tick));
                self.hits += 1;
                return Some(slot.ranked.clone());
            }
        }
        self.misses += 1;
        None
    }

    fn put(&mut self, key: CacheKey, query_bits: Vec<u64>, ranked: Vec<(usize, f64)>) {
        if self.cap == 0 {
            return;
        }
        self.tick += 1;
        let tick = self.tick;
        self.queue.push_back((key.clone(), tick));
        self.map.insert(
            key,
            CacheSlot {
                stamp: tick,
                query_bits,
                ranked,
            },
        );
        while self.map.len() > self.cap {
            match self.queue.pop_front() {
                Some((k, stamp)) => {
                    let live = self.map.get(&k).map(|s| s.stamp) == Some(stamp);
                    if live {
                        self.map.remove(&k);
                    }
                }
                None => break,
            }
        }
        if self.queue.len() > 8 * self.cap.max(8) {
            let map = &self.map;
            self.queue
                .retain(|(k, stamp)| map.get(k).map(|s| s.stamp) == Some(*stamp));
        }
    }

    fn clear(&mut self) {
        self.map.clear();
        self.queue.clear();
    }
}

/// One memory bank over a single decoupled dimension.
pub struct MemoryBank<S: Scalar> {
    kind: BankKind,
    dim: usize,
    policy: StorePolicy,
    entries: Vec<PatternEntry<S>>,
    index: IndexState,
    generation: u64,
    cache: Mutex<LruCache>,
    recent_queries: Reservoir<Vec<S>>,
}

impl<S: Scalar> std::fmt::Debug for MemoryBank<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryBank")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("entries", &self.entries.len())
            .field("index", &self.index.kind_name())
            .field("generation", &self.generation)
            .finish()
    }
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(kind: BankKind, dim: usize, policy: StorePolicy) -> Self {
        let cache = Mutex::new(LruCache::new(policy.lru_capacity));
        let recent = Reservoir::new(policy.recent_query_cap);
        MemoryBank {
            kind,
            dim,
            policy,
            entries: Vec::new(),
            index: IndexState::Flat,
            generation: 0,
            cache,
            recent_queries: recent,
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.policy.capacity
    }

    pub fn policy(&self) -> &StorePolicy {
        &self.policy
    }

    pub fn entries(&self) -> &[PatternEntry<S>] {
        &self.entries
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn index_kind(&self) -> &'static str {
        self.index.kind_name()
    }

    /// (hits, misses) of the query cache.
    pub fn cache_stats(&self) -> (u64, u64) {
        let c = self.cache.lock().unwrap();
        (c.hits, c.misses)
    }

    fn check_dim(&self, op: &'static str, v: &[S]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(op, &[self.dim], &[v.len()]));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract(op, "vector has non-finite components"));
        }
        Ok(())
    }

    /// Any structural mutation lands here: ids may have shifted, so the
    /// index falls back to a Flat scan over the new entries and all cached
    /// results die with the old generation.
    fn structural_change(&mut self) {
        self.generation += 1;
        self.index = IndexState::Flat;
        self.cache.lock().unwrap().clear();
    }

    /// Unchecked insertion used by deserialization and tests; bypasses the
    /// capacity policy on purpose.
    pub fn insert_raw(
        &mut self,
        vector: Vec<S>,
        momentum: f64,
        epoch_stamp: u32,
        insert_count: u32,
    ) -> Result<usize> {
        self.check_dim("MemoryBank::insert_raw", &vector)?;
        let mut entry = PatternEntry::new(vector, epoch_stamp);
        entry.momentum = momentum;
        entry.insert_count = insert_count;
        self.entries.push(entry);
        self.structural_change();
        Ok(self.entries.len() - 1)
    }

    /// Exact or IVF top-k by similarity, descending, ties to the lower id.
    /// Results are served from the LRU cache when the same (query, k) was
    /// answered under the current generation; momentum is always read
    /// fresh. An empty bank yields an empty result.
    pub fn search_topk(&self, query: &[S], k: usize) -> Result<Vec<SearchHit<S>>> {
        if k == 0 {
            return Err(Error::contract("search_topk", "k must be >= 1"));
        }
        self.check_dim("search_topk", query)?;
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let query_bits: Vec<u64> = query.iter().map(|v| v.bits()).collect();
        let key = CacheKey {
            qhash: hash_bits(&query_bits),
            k,
            generation: self.generation,
        };
        if let Some(ranked) = self.cache.lock().unwrap().get(&key, &query_bits) {
            return Ok(self.hydrate(&ranked));
        }
        let ranked = match &self.index {
            IndexState::Flat => self.select_topk((0..self.entries.len()).map(|i| i as u32), query, k),
            IndexState::Ivf(ivf) => {
                let qf: Vec<f64> = query.iter().map(|v| v.as_f64()).collect();
                self.select_topk(ivf.candidates(&qf).into_iter(), query, k)
            }
        };
        self.cache
            .lock()
            .unwrap()
            .put(key, query_bits, ranked.clone());
        Ok(self.hydrate(&ranked))
    }

    fn select_topk(
        &self,
        candidates: impl Iterator<Item = u32>,
        query: &[S],
        k: usize,
    ) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
        for id in candidates {
            let id = id as usize;
            let sim = similarity(query, &self.entries[id].vector).expect("dims checked");
            heap.push(Worst { sim, id });
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut ranked: Vec<(usize, f64)> = heap.into_iter().map(|w| (w.id, w.sim)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    fn hydrate(&self, ranked: &[(usize, f64)]) -> Vec<SearchHit<S>> {
        ranked
            .iter()
            .map(|&(id, sim)| SearchHit {
                id,
                similarity: sim,
                momentum: self.entries[id].momentum,
                vector: self.entries[id].vector.clone(),
            })
            .collect()
    }

    /// Adds one query's softmax shares of (s + lambda * H(v)) / tau to the
    /// retrieved entries' momentum. Shares over the k items of a single
    /// query sum to exactly 1.
    pub fn update_momentum(
        &mut self,
        items: &[(usize, f64)],
        lambda_div: f64,
        tau: f64,
    ) -> Result<Vec<f64>> {
        if tau <= 0.0 {
            return Err(Error::config(format!("tau must be positive, got {tau}")));
        }
        if items.is_empty() {
            return Err(Error::contract("update_momentum", "results must be nonempty"));
        }
        let mut logits = Vec::with_capacity(items.len());
        for &(id, sim) in items {
            let entry = self.entries.get(id).ok_or_else(|| {
                Error::contract("update_momentum", format!("entry id {id} out of range"))
            })?;
            logits.push((sim + lambda_div * entropy(&entry.vector)) / tau);
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let shares: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for (&(id, _), &share) in items.iter().zip(&shares) {
            self.entries[id].momentum += share;
        }
        Ok(shares)
    }

    /// Folds freshly sampled encodings into the bank: each vector blends
    /// EMA-style into its nearest entry when the normalized similarity
    /// exp(s) reaches the blend threshold, otherwise inserts as a new
    /// entry with momentum 1. Vectors are processed in order, each seeing
    /// the effects of its predecessors. Capacity is enforced at the end by
    /// evicting lowest-momentum entries.
    pub fn update_bank(&mut self, fresh: &[Vec<S>], epoch: u32) -> Result<UpdateReport> {
        for f in fresh {
            self.check_dim("update_bank", f)?;
        }
        let mut report = UpdateReport::default();
        for f in fresh {
            if self.entries.is_empty() {
                self.entries.push(PatternEntry::new(f.clone(), epoch));
                report.inserted += 1;
                continue;
            }
            let mut best_id = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (id, entry) in self.entries.iter().enumerate() {
                let sim = similarity(f, &entry.vector)?;
                if sim > best_sim {
                    best_sim = sim;
                    best_id = id;
                }
            }
            if best_sim.exp() >= self.policy.blend_threshold {
                let rate = blend_rate(best_sim);
                let entry = &mut self.entries[best_id];
                ema_blend(entry, f, rate);
                entry.epoch_stamp = epoch;
                entry.insert_count += 1;
                report.blended += 1;
            } else {
                self.entries.push(PatternEntry::new(f.clone(), epoch));
                report.inserted += 1;
            }
        }
        report.evicted = self.capacity_evictions();
        self.apply_evictions(&report.evicted);
        self.structural_change();
        Ok(report)
    }

    /// Ids (current positions) that the capacity policy would evict:
    /// lowest momentum first, ties evict the higher id so the lower id
    /// survives.
    fn capacity_evictions(&self) -> Vec<usize> {
        if self.entries.len() <= self.policy.capacity {
            return Vec::new();
        }
        let excess = self.entries.len() - self.policy.capacity;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            self.entries[a]
                .momentum
                .total_cmp(&self.entries[b].momentum)
                .then(b.cmp(&a))
        });
        let mut evict: Vec<usize> = order.into_iter().take(excess).collect();
        evict.sort_unstable();
        evict
    }

    fn apply_evictions(&mut self, ids: &[usize]) {
        if ids.is_empty() {
            return;
        }
        let mut doomed = vec![false; self.entries.len()];
        for &id in ids {
            doomed[id] = true;
        }
        let mut keep = Vec::with_capacity(self.entries.len() - ids.len());
        for (i, e) in self.entries.drain(..).enumerate() {
            if !doomed[i] {
                keep.push(e);
            }
        }
        self.entries = keep;
    }

    /// Lifecycle sweep in three stages over the entries as they stood at
    /// call time: age decay, low-relevance pruning against the recent-query
    /// window, then capacity truncation by ascending momentum. Reported ids
    /// are pre-sweep positions.
    pub fn prune_and_decay(&mut self, current_epoch: u32) -> EvictionReport {
        let n = self.entries.len();
        let mut reason: Vec<Option<EvictReason>> = vec![None; n];
        for (i, e) in self.entries.iter().enumerate() {
            let age = current_epoch.saturating_sub(e.epoch_stamp);
            if age > self.policy.decay_epochs {
                reason[i] = Some(EvictReason::Decay);
            }
        }
        if !self.recent_queries.is_empty() {
            for (i, e) in self.entries.iter().enumerate() {
                if reason[i].is_some() {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for q in self.recent_queries.items() {
                    let sim = similarity(q, &e.vector).expect("dims checked at observe");
                    if sim > best {
                        best = sim;
                    }
                }
                if best.exp() < self.policy.prune_threshold {
                    reason[i] = Some(EvictReason::LowRelevance);
                }
            }
        }
        let survivors: Vec<usize> = (0..n).filter(|&i| reason[i].is_none()).collect();
        if survivors.len() > self.policy.capacity {
            let excess = survivors.len() - self.policy.capacity;
            let mut order = survivors.clone();
            order.sort_by(|&a, &b| {
                self.entries[a]
                    .momentum
                    .total_cmp(&self.entries[b].momentum)
                    .then(b.cmp(&a))
            });
            for &i in order.iter().take(excess) {
                reason[i] = Some(EvictReason::Capacity);
            }
        }
        let mut report = EvictionReport::default();
        for (i, r) in reason.iter().enumerate() {
            if let Some(r) = r {
                report.evicted.push((i, *r));
            }
        }
        if !report.evicted.is_empty() {
            let ids: Vec<usize> = report.evicted.iter().map(|(i, _)| *i).collect();
            self.apply_evictions(&ids);
            self.structural_change();
        }
        report.survivors = self.entries.len();
        report
    }

    /// Records a projected query into the pruning relevance window.
    pub fn observe_query(&mut self, query: &[S], rng: &mut ChaCha8Rng) -> Result<()> {
        self.check_dim("observe_query", query)?;
        self.recent_queries.observe(query.to_vec(), rng);
        Ok(())
    }

    pub fn recent_query_count(&self) -> usize {
        self.recent_queries.len()
    }

    /// Discards the relevance window at the end of an update cycle.
    pub fn clear_recent_queries(&mut self) {
        self.recent_queries.clear();
    }

    /// Rebuilds the search structure over the current entries. IVF
    /// defaults: n_list = ceil(sqrt(M)), n_probe = ceil(n_list / 4).
    /// Requesting IVF with n_list above the entry count (including an empty
    /// bank) downgrades to Flat and flags it in the report.
    pub fn build_index(
        &mut self,
        choice: IndexChoice,
        n_list: Option<usize>,
        n_probe: Option<usize>,
        seed: u64,
    ) -> Result<IndexReport> {
        self.generation += 1;
        self.cache.lock().unwrap().clear();
        let m = self.entries.len();
        let report = match choice {
            IndexChoice::Flat => {
                self.index = IndexState::Flat;
                IndexReport {
                    built: "flat",
                    downgraded: false,
                    n_list: 0,
                    n_probe: 0,
                    generation: self.generation,
                }
            }
            IndexChoice::Ivf => {
                let n_list = match n_list {
                    Some(n) => {
                        if n == 0 {
                            return Err(Error::config("n_list must be >= 1"));
                        }
                        n
                    }
                    None => (m as f64).sqrt().ceil() as usize,
                };
                let n_probe = n_probe.unwrap_or_else(|| n_list.div_ceil(4)).max(1);
                if n_list > m || m == 0 {
                    self.index = IndexState::Flat;
                    IndexReport {
                        built: "flat",
                        downgraded: true,
                        n_list,
                        n_probe,
                        generation: self.generation,
                    }
                } else {
                    let mut flat = Vec::with_capacity(m * self.dim);
                    for e in &self.entries {
                        flat.extend(e.vector.iter().map(|v| v.as_f64()));
                    }
                    let ivf = build_ivf(&flat, self.dim, n_list, n_probe, self.policy.kmeans_iters, seed);
                    self.index = IndexState::Ivf(ivf);
                    IndexReport {
                        built: "ivf",
                        downgraded: false,
                        n_list,
                        n_probe,
                        generation: self.generation,
                    }
                }
            }
        };
        Ok(report)
    }
}

fn hash_bits(bits: &[u64]) -> u64 {
    let mut h = DefaultHasher::new();
    bits.hash(&mut h);
    h.finish()
}

/// Heap ordering where the maximum is the worst hit (lowest similarity,
/// then highest id), so a bounded BinaryHeap keeps the best k.
struct Worst {
    sim: f64,
    id: usize,
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.sim.total_cmp(&other.sim).is_eq() && self.id == other.id
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.id.cmp(&other.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bank(dim: usize) -> MemoryBank<f64> {
        MemoryBank::new(BankKind::Spatial, dim, StorePolicy::default())
    }

    fn bank_with(dim: usize, policy: StorePolicy) -> MemoryBank<f64> {
        MemoryBank::new(BankKind::Spatial, dim, policy)
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -2.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn similarity_matches_direct_sum_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!((similarity(&a, &b).unwrap() + direct).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_uniform_hits_ln_d() {
        for d in [2usize, 4, 16] {
            let v = vec![0.37; d];
            assert!((entropy(&v) - (d as f64).ln()).abs() < 1e-9);
        }
        assert_eq!(entropy(&[5.0]), 0.0);
    }

    #[test]
    fn entropy_peaked_vector_matches_direct_summation() {
        // Direct-summation oracle for v = (10,0,0,0): p0 = e^10/(e^10+3),
        // H = -(p0 ln p0 + 3 p ln p) = 0.0014980029292489647.
        let h = entropy(&[10.0, 0.0, 0.0, 0.0]);
        assert!((h - 0.0014980029292489647).abs() < 1e-12, "H = {h}");
    }

    #[test]
    fn entropy_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.random_range(1..20);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
            let h = entropy(&v);
            assert!(h >= -1e-12 && h <= (d as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn sigmoid_and_blend_rate_frozen_values() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(-0.5) - 0.37754066879814546).abs() < 1e-12);
        assert!((blend_rate(-5.0) - 0.05).abs() < 1e-15);
        assert!((blend_rate(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn search_orders_by_similarity_with_low_id_ties() {
        let mut b = bank(2);
        b.insert_raw(vec![0.0, 0.0], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![1.0, 0.0], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![0.0, 2.0], 1.0, 0, 1).unwrap();
        let hits = b.search_topk(&[0.9, 0.0], 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].id, 1);
        assert!((hits[0].similarity + 0.01).abs() < 1e-12);
        assert_eq!(hits[1].id, 0);
        assert!((hits[1].similarity + 0.81).abs() < 1e-12);

        // Exact ties rank the lower id first.
        let mut tie = bank(1);
        tie.insert_raw(vec![1.0], 1.0, 0, 1).unwrap();
        tie.insert_raw(vec![-1.0], 1.0, 0, 1).unwrap();
        let hits = tie.search_topk(&[0.0], 2).unwrap();
        assert_eq!(hits[0].id, 0);
        assert_eq!(hits[1].id, 1);
    }

    #[test]
    fn search_with_k_beyond_len_returns_all_sorted() {
        let mut b = bank(1);
        for v in [3.0, 1.0, 2.0] {
            b.insert_raw(vec![v], 1.0, 0, 1).unwrap();
        }
        let hits = b.search_topk(&[1.1], 10).unwrap();
        assert_eq!(hits.len(), 3);
        let ids: Vec<usize> = hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert!(b.search_topk(&[0.0], 0).is_err());
    }

    #[test]
    fn empty_bank_returns_empty_result() {
        let b = bank(4);
        assert!(b.search_topk(&[0.0; 4], 5).unwrap().is_empty());
    }

    #[test]
    fn cache_serves_hits_and_respects_generation() {
        let mut b = bank(1);
        b.insert_raw(vec![1.0], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![5.0], 1.0, 0, 1).unwrap();
        let q = [1.2];
        let first = b.search_topk(&q, 1).unwrap();
        let second = b.search_topk(&q, 1).unwrap();
        assert_eq!(first[0].id, second[0].id);
        let (hits, misses) = b.cache_stats();
        assert_eq!((hits, misses), (1, 1));

        // Structural change invalidates: new nearest entry must surface.
        b.insert_raw(vec![1.19], 1.0, 0, 1).unwrap();
        let third = b.search_topk(&q, 1).unwrap();
        assert_eq!(third[0].id, 2);
    }

    #[test]
    fn cached_results_return_fresh_momentum() {
        let mut b = bank(1);
        b.insert_raw(vec![1.0], 1.0, 0, 1).unwrap();
        let q = [1.0];
        let first = b.search_topk(&q, 1).unwrap();
        assert_eq!(first[0].momentum, 1.0);
        b.update_momentum(&[(0, first[0].similarity)], 0.5, 0.1).unwrap();
        let second = b.search_topk(&q, 1).unwrap();
        assert_eq!(second[0].momentum, 2.0);
        let (hits, _) = b.cache_stats();
        assert_eq!(hits, 1);
    }

    #[test]
    fn momentum_singleton_adds_exactly_one() {
        let mut b = bank(2);
        b.insert_raw(vec![0.5, 0.5], 1.0, 0, 1).unwrap();
        let shares = b.update_momentum(&[(0, -0.3)], 0.5, 0.1).unwrap();
        assert_eq!(shares, vec![1.0]);
        assert!((b.entries()[0].momentum - 2.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_symmetric_items_split_evenly() {
        let mut b = bank(2);
        b.insert_raw(vec![1.0, 0.0], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![0.0, 1.0], 1.0, 0, 1).unwrap();
        let shares = b.update_momentum(&[(0, -0.5), (1, -0.5)], 0.5, 0.1).unwrap();
        assert!((shares[0] - 0.5).abs() < 1e-12);
        assert!((shares[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn momentum_prefers_higher_entropy_at_equal_similarity() {
        let mut b = bank(4);
        b.insert_raw(vec![0.2, 0.2, 0.2, 0.2], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![8.0, 0.0, 0.0, 0.0], 1.0, 0, 1).unwrap();
        assert!(entropy(&b.entries()[0].vector) > entropy(&b.entries()[1].vector));
        let shares = b.update_momentum(&[(0, -1.0), (1, -1.0)], 0.5, 0.1).unwrap();
        assert!(shares[0] > shares[1]);
        assert!((shares[0] + shares[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn momentum_rejects_bad_tau_and_empty_items() {
        let mut b = bank(1);
        b.insert_raw(vec![0.0], 1.0, 0, 1).unwrap();
        assert!(b.update_momentum(&[(0, 0.0)], 0.5, 0.0).is_err());
        assert!(b.update_momentum(&[], 0.5, 0.1).is_err());
    }

    #[test]
    fn update_bank_cold_start_inserts_verbatim() {
        let mut b = bank(2);
        let fresh = vec![vec![1.0, 2.0], vec![30.0, 40.0]];
        let report = b.update_bank(&fresh, 3).unwrap();
        assert_eq!(report.inserted, 2);
        assert_eq!(report.blended, 0);
        assert_eq!(b.len(), 2);
        for (e, f) in b.entries().iter().zip(&fresh) {
            assert_eq!(&e.vector, f);
            assert_eq!(e.momentum, 1.0);
            assert_eq!(e.epoch_stamp, 3);
        }
    }

    #[test]
    fn ema_blend_endpoints_and_quarter_rate() {
        let mut e = PatternEntry::new(vec![1.0, 1.0], 0);
        ema_blend(&mut e, &[5.0, 1.0], 0.25);
        assert_eq!(e.vector, vec![2.0, 1.0]);
        let mut f = PatternEntry::new(vec![9.0, 9.0], 0);
        ema_blend(&mut f, &[1.0, 2.0], 1.0);
        assert_eq!(f.vector, vec![1.0, 2.0]);
    }

    #[test]
    fn update_bank_blends_close_vectors_and_refreshes_stamp() {
        let mut b = bank(2);
        b.update_bank(&[vec![1.0, 1.0]], 0).unwrap();
        // Identical vector: s = 0, exp(s) = 1 >= 0.5, rate = sigmoid(0) = 0.5.
        let report = b.update_bank(&[vec![1.0, 1.0]], 7).unwrap();
        assert_eq!(report.blended, 1);
        assert_eq!(b.len(), 1);
        assert_eq!(b.entries()[0].epoch_stamp, 7);
        assert_eq!(b.entries()[0].insert_count, 2);
        // Distant vector inserts instead.
        let report = b.update_bank(&[vec![50.0, 50.0]], 8).unwrap();
        assert_eq!(report.inserted, 1);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn update_bank_enforces_capacity_by_lowest_momentum() {
        let mut b = bank_with(
            1,
            StorePolicy {
                capacity: 3,
                blend_threshold: 2.0, // exp(s) <= 1 < 2: never blend
                ..StorePolicy::default()
            },
        );
        for i in 0..3 {
            b.insert_raw(vec![i as f64 * 100.0], (i + 5) as f64, 0, 1).unwrap();
        }
        // momenta: [5, 6, 7]; two inserts (momentum 1.0 each) overflow by 2.
        let report = b.update_bank(&[vec![500.0], vec![900.0]], 1).unwrap();
        assert_eq!(report.inserted, 2);
        assert_eq!(report.evicted, vec![3, 4]);
        assert_eq!(b.len(), 3);
        let momenta: Vec<f64> = b.entries().iter().map(|e| e.momentum).collect();
        assert_eq!(momenta, vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn repeated_blending_converges_geometrically() {
        let target = vec![2.0f64, -1.0];
        let mut e = PatternEntry::<f64>::new(vec![10.0, 10.0], 0);
        let rate = 0.3;
        let mut prev_gap = (e.vector[0] - target[0]).hypot(e.vector[1] - target[1]);
        for _ in 0..30 {
            ema_blend(&mut e, &target, rate);
            let gap = (e.vector[0] - target[0]).hypot(e.vector[1] - target[1]);
            assert!((gap - prev_gap * (1.0 - rate)).abs() < 1e-9 * prev_gap.max(1e-12));
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn prune_keeps_fresh_relevant_entries() {
        let mut b = bank(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.insert_raw(vec![1.0], 1.0, 100, 1).unwrap();
        b.observe_query(&[1.05], &mut rng).unwrap();
        let report = b.prune_and_decay(110);
        assert!(report.evicted.is_empty());
        assert_eq!(report.survivors, 1);
    }

    #[test]
    fn prune_decays_entries_older_than_policy_window() {
        let mut b = bank(1);
        b.insert_raw(vec![1.0], 1.0, 60, 1).unwrap();
        b.insert_raw(vec![2.0], 1.0, 100, 1).unwrap();
        let report = b.prune_and_decay(120);
        assert_eq!(report.evicted, vec![(0, EvictReason::Decay)]);
        assert_eq!(b.len(), 1);
        assert_eq!(b.entries()[0].vector, vec![2.0]);
    }

    #[test]
    fn prune_drops_low_relevance_entries() {
        let mut b = bank(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.insert_raw(vec![0.0], 1.0, 10, 1).unwrap();
        b.insert_raw(vec![100.0], 1.0, 10, 1).unwrap();
        b.observe_query(&[0.1], &mut rng).unwrap();
        // exp(-0.01) ~ 0.99 for entry 0; exp(-9980) ~ 0 for entry 1.
        let report = b.prune_and_decay(12);
        assert_eq!(report.evicted, vec![(1, EvictReason::LowRelevance)]);
    }

    #[test]
    fn prune_truncates_overfull_bank_to_capacity() {
        let mut b = bank_with(
            1,
            StorePolicy {
                capacity: 1000,
                ..StorePolicy::default()
            },
        );
        for i in 0..1200u32 {
            b.insert_raw(vec![i as f64], i as f64, 0, 1).unwrap();
        }
        let report = b.prune_and_decay(0);
        assert_eq!(report.evicted.len(), 200);
        assert!(report
            .evicted
            .iter()
            .all(|(id, r)| *id < 200 && *r == EvictReason::Capacity));
        assert_eq!(b.len(), 1000);
        // Lowest 200 momenta are gone.
        assert!(b.entries().iter().all(|e| e.momentum >= 200.0));
    }

    #[test]
    fn build_index_single_entry_flat_lists_it() {
        let mut b = bank(2);
        b.insert_raw(vec![1.0, 2.0], 1.0, 0, 1).unwrap();
        let report = b.build_index(IndexChoice::Flat, None, None, 1).unwrap();
        assert_eq!(report.built, "flat");
        let hits = b.search_topk(&[1.0, 2.0], 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 0);
        assert_eq!(hits[0].similarity, 0.0);
    }

    #[test]
    fn build_index_downgrades_when_n_list_exceeds_entries() {
        let mut b = bank(2);
        b.insert_raw(vec![0.0, 0.0], 1.0, 0, 1).unwrap();
        b.insert_raw(vec![1.0, 1.0], 1.0, 0, 1).unwrap();
        let report = b.build_index(IndexChoice::Ivf, Some(5), None, 1).unwrap();
        assert!(report.downgraded);
        assert_eq!(report.built, "flat");
        assert_eq!(b.index_kind(), "flat");

        let mut empty = bank(2);
        let report = empty.build_index(IndexChoice::Ivf, None, None, 1).unwrap();
        assert!(report.downgraded);
    }

    #[test]
    fn build_index_bumps_generation_and_clears_cache() {
        let mut b = bank(1);
        b.insert_raw(vec![1.0], 1.0, 0, 1).unwrap();
        let g0 = b.generation();
        b.search_topk(&[1.0], 1).unwrap();
        b.build_index(IndexChoice::Flat, None, None, 0).unwrap();
        assert_eq!(b.generation(), g0 + 1);
        b.search_topk(&[1.0], 1).unwrap();
        let (hits, misses) = b.cache_stats();
        assert_eq!(hits, 0);
        assert_eq!(misses, 2);
    }

    #[test]
    fn reservoir_caps_and_samples_uniformly_enough() {
        let mut r = Reservoir::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..1000 {
            r.observe(i, &mut rng);
        }
        assert_eq!(r.len(), 10);
        assert_eq!(r.seen(), 1000);
        // Late items must be able to displace early ones.
        assert!(r.items().iter().any(|&i| i >= 500));
        r.clear();
        assert!(r.is_empty());
    }

    #[test]
    fn entry_stats_consistent_at_insertion() {
        let e = PatternEntry::new(vec![1.0, 2.0, 3.0, 4.0], 0);
        assert!((e.mean - 2.5).abs() < 1e-9);
        assert!((e.variance - 1.25).abs() < 1e-9);
    }
}

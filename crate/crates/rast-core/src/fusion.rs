//! Retrieval against the pattern banks and cross-attention fusion of the
//! retrieved sets with the query.
//!
//! Queries live in the query width D_q while bank vectors live in the
//! retrieval width D_r; one learned projection maps queries into bank
//! space, and the same projected rows are searched against both banks.
//! Retrieved vectors enter the graph as constants: the banks are updated
//! by their own momentum and blending rules, never by gradient descent.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Linear, Param};
use crate::scalar::Scalar;
use crate::store::{BankKind, MemoryBank};
use crate::tensor::{concat, Tensor};

/// Additive score bias that drives masked-slot attention weights to an
/// exact zero after softmax.
const MASK_BIAS: f64 = -1e30;

/// Top-k retrieval results for every (batch, node) row against one bank.
/// Rows are padded to a fixed k; `mask` marks which slots are real and
/// `ids` uses -1 for padding.
#[derive(Debug)]
pub struct RetrievalBatch<S: Scalar> {
    pub kind: BankKind,
    pub batch: usize,
    pub nodes: usize,
    pub k: usize,
    pub dim: usize,
    /// Row-major (rows x k); -1 marks a padded slot.
    pub ids: Vec<i64>,
    /// Row-major (rows x k); descending within each row's valid prefix.
    pub sims: Vec<f64>,
    /// Row-major (rows x k); momentum at retrieval time.
    pub momenta: Vec<f64>,
    /// Row-major (rows x k); true where the slot holds a real entry.
    pub mask: Vec<bool>,
    /// (B, N, k, D_r) constant tensor; zeros in padded slots.
    pub vectors: Tensor<S>,
    /// False iff the bank was empty and every slot is padding.
    pub any_hit: bool,
}

impl<S: Scalar> RetrievalBatch<S> {
    pub fn rows(&self) -> usize {
        self.batch * self.nodes
    }

    /// Valid (entry id, similarity) pairs of one row, for momentum updates.
    pub fn row_items(&self, row: usize) -> Vec<(usize, f64)> {
        let base = row * self.k;
        (0..self.k)
            .filter(|slot| self.mask[base + slot])
            .map(|slot| (self.ids[base + slot] as usize, self.sims[base + slot]))
            .collect()
    }

    pub fn is_query_only(&self) -> bool {
        !self.any_hit
    }
}

/// Projects queries into bank space and runs per-row top-k search.
pub struct Retriever<S: Scalar> {
    proj: Linear<S>,
    top_k: usize,
}

impl<S: Scalar> Retriever<S> {
    pub fn new(
        name: &str,
        query_dim: usize,
        retrieval_dim: usize,
        top_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        let proj = Linear::new(&format!("{name}.proj"), query_dim, retrieval_dim, true, true, rng)?;
        Ok(Retriever { proj, top_k })
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Maps (B, N, D_q) queries to the bank width (B, N, D_r). The result
    /// is differentiable and is also what both banks are searched with.
    pub fn project(&self, q_st: &Tensor<S>) -> Result<Tensor<S>> {
        if q_st.rank() != 3 {
            return Err(Error::contract(
                "Retriever::project",
                format!("expected rank-3 queries, got shape {:?}", q_st.shape()),
            ));
        }
        self.proj.forward(q_st)
    }

    /// Searches one bank with already-projected queries. Search itself is
    /// outside the gradient graph: only ids, similarities, and detached
    /// vectors come back.
    pub fn retrieve(&self, projected: &Tensor<S>, bank: &MemoryBank<S>) -> Result<RetrievalBatch<S>> {
        let shape = projected.shape().to_vec();
        if shape.len() != 3 || shape[2] != bank.dim() {
            return Err(Error::shape(
                "Retriever::retrieve",
                &shape,
                &[shape.first().copied().unwrap_or(0), shape.get(1).copied().unwrap_or(0), bank.dim()],
            ));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let rows = b * n;
        let k = self.top_k;
        let data = projected.data();
        let mut ids = vec![-1i64; rows * k];
        let mut sims = vec![0.0f64; rows * k];
        let mut momenta = vec![0.0f64; rows * k];
        let mut mask = vec![false; rows * k];
        let mut vectors = vec![S::zero(); rows * k * d];
        let mut any_hit = false;
        for r in 0..rows {
            let q = &data[r * d..(r + 1) * d];
            if bank.is_empty() {
                continue;
            }
            let hits = bank.search_topk(q, k)?;
            for (slot, hit) in hits.iter().enumerate() {
                any_hit = true;
                let cell = r * k + slot;
                ids[cell] = hit.id as i64;
                sims[cell] = hit.similarity;
                momenta[cell] = hit.momentum;
                mask[cell] = true;
                vectors[cell * d..(cell + 1) * d].copy_from_slice(&hit.vector);
            }
        }
        Ok(RetrievalBatch {
            kind: bank.kind(),
            batch: b,
            nodes: n,
            k,
            dim: d,
            ids,
            sims,
            momenta,
            mask,
            vectors: Tensor::constant(vectors, &[b, n, k, d])?,
            any_hit,
        })
    }

    pub fn params(&self) -> Vec<Param<S>> {
        self.proj.params()
    }
}

/// Scaled dot-product attention with head splitting, padded-slot masking,
/// and an output projection. Operates on (B, N, L, D) tensors where D is
/// the model width.
pub struct MultiHeadAttention<S: Scalar> {
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    n_heads: usize,
    d_model: usize,
    dropout: f64,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "attention width {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let lin = |suffix: &str, rng: &mut ChaCha8Rng| {
            Linear::new(&format!("{name}.{suffix}"), d_model, d_model, true, true, rng)
        };
        Ok(MultiHeadAttention {
            wq: lin("wq", rng)?,
            wk: lin("wk", rng)?,
            wv: lin("wv", rng)?,
            wo: lin("wo", rng)?,
            n_heads,
            d_model,
            dropout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn forward(
        &self,
        query: &Tensor<S>,
        keys: &Tensor<S>,
        values: &Tensor<S>,
        mask: Option<&[bool]>,
        ctx: &mut FwdCtx,
    ) -> Result<Tensor<S>> {
        self.forward_with_probs(query, keys, values, mask, ctx)
            .map(|(out, _)| out)
    }

    /// Also returns pre-dropout attention weights with shape
    /// (B*N*heads, Lq, Lk) for inspection.
    pub fn forward_with_probs(
        &self,
        query: &Tensor<S>,
        keys: &Tensor<S>,
        values: &Tensor<S>,
        mask: Option<&[bool]>,
        ctx: &mut FwdCtx,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let qs = query.shape().to_vec();
        let ks = keys.shape().to_vec();
        let vs = values.shape().to_vec();
        if qs.len() != 4 || qs[3] != self.d_model {
            return Err(Error::shape("attention query", &qs, &[0, 0, 0, self.d_model]));
        }
        if ks.len() != 4 || ks[..2] != qs[..2] || ks[3] != self.d_model {
            return Err(Error::shape("attention keys", &ks, &qs));
        }
        if vs != ks {
            return Err(Error::shape("attention values", &vs, &ks));
        }
        let (b, n, lq, lk) = (qs[0], qs[1], qs[2], ks[2]);
        let rows = b * n;
        if let Some(m) = mask {
            if m.len() != rows * lk {
                return Err(Error::contract(
                    "attention mask",
                    format!("mask length {} does not cover {rows} rows x {lk} slots", m.len()),
                ));
            }
        }
        let h = self.n_heads;
        let dh = self.d_model / h;
        let q = split_heads(&self.wq.forward(query)?, rows, lq, h, dh)?;
        let k = split_heads(&self.wk.forward(keys)?, rows, lk, h, dh)?;
        let v = split_heads(&self.wv.forward(values)?, rows, lk, h, dh)?;
        let mut scores = q
            .matmul(&k.transpose(-2, -1)?)?
            .scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            let mut bias = Vec::with_capacity(rows * h * lq * lk);
            for row in 0..rows {
                for _ in 0..h * lq {
                    for slot in 0..lk {
                        bias.push(if m[row * lk + slot] {
                            S::zero()
                        } else {
                            S::of(MASK_BIAS)
                        });
                    }
                }
            }
            scores = scores.add(&Tensor::constant(bias, &[rows * h, lq, lk])?)?;
        }
        let probs = scores.softmax(-1)?;
        let dropped = probs.dropout(self.dropout, ctx.training, ctx.rng)?;
        let mixed = dropped.matmul(&v)?;
        let merged = merge_heads(&mixed, b, n, lq, h, dh)?;
        Ok((self.wo.forward(&merged)?, probs))
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.wq.params();
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p
    }
}

/// (B,N,L,D) -> (rows*heads, L, dh) with row-major head blocks.
fn split_heads<S: Scalar>(x: &Tensor<S>, rows: usize, l: usize, h: usize, dh: usize) -> Result<Tensor<S>> {
    x.reshape(&[rows, l, h, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[rows * h, l, dh])
}

/// Inverse of `split_heads`, back to (B,N,L,D).
fn merge_heads<S: Scalar>(
    x: &Tensor<S>,
    b: usize,
    n: usize,
    l: usize,
    h: usize,
    dh: usize,
) -> Result<Tensor<S>> {
    x.reshape(&[b * n, h, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, l, h * dh])
}

/// Everything the fusion stage produces; widths are D_r except `h_f`,
/// which is the query width plus D_r.
pub struct FusedContext<S: Scalar> {
    pub r_s: Tensor<S>,
    pub r_t: Tensor<S>,
    pub r_f: Tensor<S>,
    pub h_f: Tensor<S>,
    pub query_only: bool,
}

/// Three-stage cross-attention: the projected query attends over each
/// retrieved set separately, then a final attention merges the two
/// streams, with the spatial result as keys and the temporal result as
/// values, in that order.
pub struct CrossFusion<S: Scalar> {
    temporal_attn: MultiHeadAttention<S>,
    spatial_attn: MultiHeadAttention<S>,
    merge_attn: MultiHeadAttention<S>,
}

impl<S: Scalar> CrossFusion<S> {
    pub fn new(
        name: &str,
        d_r: usize,
        n_heads: usize,
        attn_dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CrossFusion {
            temporal_attn: MultiHeadAttention::new(&format!("{name}.temporal"), d_r, n_heads, attn_dropout, rng)?,
            spatial_attn: MultiHeadAttention::new(&format!("{name}.spatial"), d_r, n_heads, attn_dropout, rng)?,
            merge_attn: MultiHeadAttention::new(&format!("{name}.merge"), d_r, n_heads, attn_dropout, rng)?,
        })
    }

    /// `q_st` is the raw query (B, N, D_q); `projected` its bank-space
    /// image (B, N, D_r). If either retrieval came back empty the fused
    /// context degrades to the query alone, zero-padded to full width.
    pub fn forward(
        &self,
        q_st: &Tensor<S>,
        projected: &Tensor<S>,
        spatial: &RetrievalBatch<S>,
        temporal: &RetrievalBatch<S>,
        ctx: &mut FwdCtx,
    ) -> Result<FusedContext<S>> {
        let qs = q_st.shape().to_vec();
        if qs.len() != 3 {
            return Err(Error::contract(
                "CrossFusion::forward",
                format!("expected rank-3 query, got shape {qs:?}"),
            ));
        }
        let (b, n) = (qs[0], qs[1]);
        let d_r = self.merge_attn.d_model();
        if spatial.is_query_only() || temporal.is_query_only() {
            let zeros = Tensor::zeros(&[b, n, d_r]);
            let h_f = concat(&[q_st, &zeros], -1)?;
            return Ok(FusedContext {
                r_s: zeros.clone(),
                r_t: zeros.clone(),
                r_f: zeros,
                h_f,
                query_only: true,
            });
        }
        let qh = projected.reshape(&[b, n, 1, d_r])?;
        let r_t = self
            .temporal_attn
            .forward(&qh, &temporal.vectors, &temporal.vectors, Some(&temporal.mask), ctx)?;
        let r_s = self
            .spatial_attn
            .forward(&qh, &spatial.vectors, &spatial.vectors, Some(&spatial.mask), ctx)?;
        let r_f = self.merge_attn.forward(&qh, &r_s, &r_t, None, ctx)?;
        let r_f = r_f.reshape(&[b, n, d_r])?;
        let h_f = concat(&[q_st, &r_f], -1)?;
        Ok(FusedContext {
            r_s: r_s.reshape(&[b, n, d_r])?,
            r_t: r_t.reshape(&[b, n, d_r])?,
            r_f,
            h_f,
            query_only: false,
        })
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.temporal_attn.params();
        p.extend(self.spatial_attn.params());
        p.extend(self.merge_attn.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StorePolicy;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_linear(lin: &Linear<f64>, dim: usize) {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        lin.weight.set_data(eye).unwrap();
        if let Some(b) = &lin.bias {
            b.set_data(vec![0.0; dim]).unwrap();
        }
    }

    fn identity_mha(mha: &MultiHeadAttention<f64>, dim: usize) {
        identity_linear(&mha.wq, dim);
        identity_linear(&mha.wk, dim);
        identity_linear(&mha.wv, dim);
        identity_linear(&mha.wo, dim);
    }

    fn bank_from(vectors: &[Vec<f64>], kind: BankKind, dim: usize) -> MemoryBank<f64> {
        let mut b = MemoryBank::new(kind, dim, StorePolicy::default());
        for v in vectors {
            b.insert_raw(v.clone(), 1.0, 0, 1).unwrap();
        }
        b
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut r = rng(0);
        assert!(MultiHeadAttention::<f64>::new("a", 6, 4, 0.0, &mut r).is_err());
        assert!(MultiHeadAttention::<f64>::new("a", 8, 0, 0.0, &mut r).is_err());
        assert!(MultiHeadAttention::<f64>::new("a", 8, 4, 0.0, &mut r).is_ok());
    }

    #[test]
    fn single_key_value_output_ignores_query() {
        let mut r = rng(1);
        let mha = MultiHeadAttention::<f64>::new("a", 4, 2, 0.0, &mut r).unwrap();
        let v = Tensor::constant(vec![0.3, -1.0, 2.0, 0.7], &[1, 1, 1, 4]).unwrap();
        let mut out = Vec::new();
        for qv in [[0.0; 4], [5.0, -3.0, 1.0, 9.0]] {
            let q = Tensor::constant(qv.to_vec(), &[1, 1, 1, 4]).unwrap();
            let mut rr = rng(9);
            let mut ctx = FwdCtx::eval(&mut rr);
            out.push(mha.forward(&q, &v, &v, None, &mut ctx).unwrap());
        }
        for (a, b) in out[0].data().iter().zip(out[1].data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // With identity projections the output is the value itself.
        identity_mha(&mha, 4);
        let q = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 1, 4]).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let out = mha.forward(&q, &v, &v, None, &mut ctx).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut r = rng(2);
        let mha = MultiHeadAttention::<f64>::new("a", 6, 3, 0.0, &mut r).unwrap();
        let k = 5;
        let one_key: Vec<f64> = vec![0.4, -0.2, 0.9, 1.5, -1.1, 0.0];
        let mut kv = Vec::new();
        for _ in 0..k {
            kv.extend(&one_key);
        }
        let keys = Tensor::constant(kv, &[1, 1, k, 6]).unwrap();
        let q = Tensor::constant(vec![0.5; 6], &[1, 1, 1, 6]).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let (_, probs) = mha
            .forward_with_probs(&q, &keys, &keys, None, &mut ctx)
            .unwrap();
        for p in probs.data() {
            assert!((p - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_normalize_and_masked_slots_get_zero() {
        for seed in 0..6u64 {
            let mut r = rng(seed);
            let b = r.random_range(1..3usize);
            let n = r.random_range(1..4usize);
            let lq = r.random_range(1..3usize);
            let lk = r.random_range(1..6usize);
            let heads = [1usize, 2][r.random_range(0..2usize)];
            let d = heads * r.random_range(1..4usize);
            let mha = MultiHeadAttention::<f64>::new("a", d, heads, 0.0, &mut r).unwrap();
            let rand_tensor = |r: &mut ChaCha8Rng, shape: &[usize]| {
                let numel: usize = shape.iter().product();
                Tensor::constant(
                    (0..numel).map(|_| r.random_range(-2.0..2.0)).collect(),
                    shape,
                )
                .unwrap()
            };
            let q = rand_tensor(&mut r, &[b, n, lq, d]);
            let kv = rand_tensor(&mut r, &[b, n, lk, d]);
            // Keep at least slot 0 valid in every row.
            let mask: Vec<bool> = (0..b * n * lk)
                .map(|i| i % lk == 0 || r.random_range(0.0..1.0) > 0.4)
                .collect();
            let mut rr = rng(9);
            let mut ctx = FwdCtx::eval(&mut rr);
            let (_, probs) = mha
                .forward_with_probs(&q, &kv, &kv, Some(&mask), &mut ctx)
                .unwrap();
            let pd = probs.data();
            let rows = b * n * heads * lq;
            for row in 0..rows {
                let sum: f64 = pd[row * lk..(row + 1) * lk].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            }
            for bn in 0..b * n {
                for h in 0..heads {
                    for lqi in 0..lq {
                        for slot in 0..lk {
                            if !mask[bn * lk + slot] {
                                let idx = (((bn * heads + h) * lq) + lqi) * lk + slot;
                                assert_eq!(pd[idx], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn masked_slot_contents_never_change_the_output() {
        let mut r = rng(3);
        let mha = MultiHeadAttention::<f64>::new("a", 4, 2, 0.0, &mut r).unwrap();
        let q = Tensor::constant(vec![0.2, -0.4, 1.0, 0.8], &[1, 1, 1, 4]).unwrap();
        let mask = vec![true, false];
        let mut base = vec![0.5, 0.5, -0.5, 1.0];
        base.extend([0.0, 0.0, 0.0, 0.0]);
        let mut junk = vec![0.5, 0.5, -0.5, 1.0];
        junk.extend([123.0, -55.0, 7.0, 999.0]);
        let kv_a = Tensor::constant(base, &[1, 1, 2, 4]).unwrap();
        let kv_b = Tensor::constant(junk, &[1, 1, 2, 4]).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let out_a = mha.forward(&q, &kv_a, &kv_a, Some(&mask), &mut ctx).unwrap();
        let out_b = mha.forward(&q, &kv_b, &kv_b, Some(&mask), &mut ctx).unwrap();
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn retrieval_matches_brute_force_on_a_64_entry_bank() {
        let mut r = rng(4);
        let d_q = 10;
        let d_r = 6;
        let vectors: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..d_r).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let bank = bank_from(&vectors, BankKind::Spatial, d_r);
        let retriever = Retriever::<f64>::new("ret", d_q, d_r, 5, &mut r).unwrap();
        let q = Tensor::constant(
            (0..2 * 4 * d_q).map(|_| r.random_range(-1.0..1.0)).collect(),
            &[2, 4, d_q],
        )
        .unwrap();
        let projected = retriever.project(&q).unwrap();
        let batch = retriever.retrieve(&projected, &bank).unwrap();
        assert!(batch.any_hit);
        let pd = projected.data();
        for row in 0..batch.rows() {
            let qrow = &pd[row * d_r..(row + 1) * d_r];
            let mut truth: Vec<(usize, f64)> = vectors
                .iter()
                .enumerate()
                .map(|(id, v)| {
                    let s: f64 = qrow.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                    (id, -s)
                })
                .collect();
            truth.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            truth.truncate(5);
            let got = batch.row_items(row);
            assert_eq!(got.len(), 5);
            for ((gid, gsim), (tid, tsim)) in got.iter().zip(&truth) {
                assert_eq!(gid, tid);
                assert!((gsim - tsim).abs() < 1e-9);
            }
            // Similarities are descending within the row.
            for w in got.windows(2) {
                assert!(w[0].1 >= w[1].1);
            }
        }
    }

    #[test]
    fn underfilled_bank_pads_with_masked_sentinels() {
        let mut r = rng(5);
        let bank = bank_from(&[vec![1.0, 2.0]], BankKind::Temporal, 2);
        let retriever = Retriever::<f64>::new("ret", 2, 2, 5, &mut r).unwrap();
        identity_linear(&retriever.proj, 2);
        let q = Tensor::constant(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        let projected = retriever.project(&q).unwrap();
        let batch = retriever.retrieve(&projected, &bank).unwrap();
        assert_eq!(batch.ids, vec![0, -1, -1, -1, -1]);
        assert_eq!(batch.mask, vec![true, false, false, false, false]);
        // Exact match ranks first with similarity zero.
        assert_eq!(batch.sims[0], 0.0);
        assert_eq!(batch.row_items(0), vec![(0, 0.0)]);
        // Padded slots carry zero vectors.
        let vd = batch.vectors.data();
        assert_eq!(&vd[2..], &[0.0; 8]);
    }

    #[test]
    fn empty_bank_degrades_to_query_only_context() {
        let mut r = rng(6);
        let d_q = 6;
        let d_r = 4;
        let empty = MemoryBank::<f64>::new(BankKind::Spatial, d_r, StorePolicy::default());
        let full = bank_from(&[vec![0.0; 4]], BankKind::Temporal, d_r);
        let retriever = Retriever::<f64>::new("ret", d_q, d_r, 3, &mut r).unwrap();
        let fusion = CrossFusion::<f64>::new("fuse", d_r, 2, 0.0, &mut r).unwrap();
        let q = Tensor::constant((0..2 * 3 * d_q).map(|i| i as f64 * 0.1).collect(), &[2, 3, d_q]).unwrap();
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &empty).unwrap();
        let tp = retriever.retrieve(&projected, &full).unwrap();
        assert!(sp.is_query_only());
        assert!(!tp.is_query_only());
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();
        assert!(fused.query_only);
        assert_eq!(fused.h_f.shape(), &[2, 3, d_q + d_r]);
        let hd = fused.h_f.data();
        let qd = q.data();
        for row in 0..6 {
            for j in 0..d_q {
                assert_eq!(hd[row * (d_q + d_r) + j], qd[row * d_q + j]);
            }
            for j in d_q..d_q + d_r {
                assert_eq!(hd[row * (d_q + d_r) + j], 0.0);
            }
        }
    }

    #[test]
    fn singleton_chain_with_identity_projections_returns_the_vector() {
        let mut r = rng(7);
        let d = 4;
        let stored = vec![0.7, -0.3, 1.2, 0.1];
        let spatial = bank_from(&[stored.clone()], BankKind::Spatial, d);
        let temporal = bank_from(&[stored.clone()], BankKind::Temporal, d);
        let retriever = Retriever::<f64>::new("ret", d, d, 1, &mut r).unwrap();
        identity_linear(&retriever.proj, d);
        let fusion = CrossFusion::<f64>::new("fuse", d, 1, 0.0, &mut r).unwrap();
        identity_mha(&fusion.temporal_attn, d);
        identity_mha(&fusion.spatial_attn, d);
        identity_mha(&fusion.merge_attn, d);
        let q = Tensor::constant(vec![0.5, 0.5, 0.5, 0.5], &[1, 1, d]).unwrap();
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &spatial).unwrap();
        let tp = retriever.retrieve(&projected, &temporal).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();
        for (name, t) in [("r_s", &fused.r_s), ("r_t", &fused.r_t), ("r_f", &fused.r_f)] {
            for (a, b) in t.data().iter().zip(&stored) {
                assert!((a - b).abs() < 1e-12, "{name} diverged");
            }
        }
        assert_eq!(fused.h_f.shape(), &[1, 1, 2 * d]);
    }

    #[test]
    fn zero_query_with_identity_projections_averages_the_values() {
        let mut r = rng(8);
        let d = 2;
        let vectors = vec![vec![1.0, 3.0], vec![3.0, 5.0], vec![5.0, 1.0]];
        let spatial = bank_from(&vectors, BankKind::Spatial, d);
        let temporal = bank_from(&vectors, BankKind::Temporal, d);
        let retriever = Retriever::<f64>::new("ret", d, d, 3, &mut r).unwrap();
        identity_linear(&retriever.proj, d);
        let fusion = CrossFusion::<f64>::new("fuse", d, 1, 0.0, &mut r).unwrap();
        identity_mha(&fusion.temporal_attn, d);
        identity_mha(&fusion.spatial_attn, d);
        identity_mha(&fusion.merge_attn, d);
        let q = Tensor::zeros(&[1, 1, d]);
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &spatial).unwrap();
        let tp = retriever.retrieve(&projected, &temporal).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();
        // mean of {(1,3),(3,5),(5,1)} = (3,3)
        for t in [&fused.r_s, &fused.r_t, &fused.r_f] {
            for a in t.data() {
                assert!((a - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_stage_uses_spatial_keys_and_temporal_values() {
        // The fused result must track the composed stage outputs exactly:
        // feeding the temporal stream as values is what the oracle below
        // encodes, so swapping the argument order breaks this test.
        let mut r = rng(10);
        let d = 4;
        let mk = |seed: u64, scale: f64| -> Vec<Vec<f64>> {
            let mut rr = rng(seed);
            (0..3)
                .map(|_| (0..d).map(|_| rr.random_range(-scale..scale)).collect())
                .collect()
        };
        let spatial = bank_from(&mk(1, 1.0), BankKind::Spatial, d);
        let temporal = bank_from(&mk(2, 3.0), BankKind::Temporal, d);
        let retriever = Retriever::<f64>::new("ret", d, d, 2, &mut r).unwrap();
        let fusion = CrossFusion::<f64>::new("fuse", d, 2, 0.0, &mut r).unwrap();
        let q = Tensor::constant((0..2 * d).map(|i| 0.2 * i as f64).collect(), &[1, 2, d]).unwrap();
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &spatial).unwrap();
        let tp = retriever.retrieve(&projected, &temporal).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();

        let qh = projected.reshape(&[1, 2, 1, d]).unwrap();
        let mut rr2 = rng(9);
        let mut ctx2 = FwdCtx::eval(&mut rr2);
        let r_t = fusion
            .temporal_attn
            .forward(&qh, &tp.vectors, &tp.vectors, Some(&tp.mask), &mut ctx2)
            .unwrap();
        let r_s = fusion
            .spatial_attn
            .forward(&qh, &sp.vectors, &sp.vectors, Some(&sp.mask), &mut ctx2)
            .unwrap();
        let expected = fusion
            .merge_attn
            .forward(&qh, &r_s, &r_t, None, &mut ctx2)
            .unwrap();
        let swapped = fusion
            .merge_attn
            .forward(&qh, &r_t, &r_s, None, &mut ctx2)
            .unwrap();
        for (a, b) in fused.r_f.data().iter().zip(expected.data()) {
            assert_eq!(a, b);
        }
        // The reversed wiring produces a different result on this input,
        // so the equality above is not vacuous.
        let diff: f64 = fused
            .r_f
            .data()
            .iter()
            .zip(swapped.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn permuting_retrieved_slots_leaves_the_output_unchanged() {
        let mut r = rng(11);
        let d = 4;
        let k = 3;
        let mha = MultiHeadAttention::<f64>::new("a", d, 2, 0.0, &mut r).unwrap();
        let q = Tensor::constant((0..d).map(|i| 0.3 * i as f64).collect(), &[1, 1, 1, d]).unwrap();
        let slots: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let build = |order: &[usize]| {
            let mut data = Vec::new();
            for &i in order {
                data.extend(&slots[i]);
            }
            Tensor::constant(data, &[1, 1, k, d]).unwrap()
        };
        let mut outs = Vec::new();
        for order in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let kv = build(&order);
            let mut rr = rng(9);
            let mut ctx = FwdCtx::eval(&mut rr);
            outs.push(mha.forward(&q, &kv, &kv, None, &mut ctx).unwrap());
        }
        for other in &outs[1..] {
            for (a, b) in outs[0].data().iter().zip(other.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_reach_projections_but_never_bank_vectors() {
        let mut r = rng(12);
        let d_q = 6;
        let d_r = 4;
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d_r).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let spatial = bank_from(&vectors, BankKind::Spatial, d_r);
        let temporal = bank_from(&vectors, BankKind::Temporal, d_r);
        let retriever = Retriever::<f64>::new("ret", d_q, d_r, 2, &mut r).unwrap();
        let fusion = CrossFusion::<f64>::new("fuse", d_r, 2, 0.0, &mut r).unwrap();
        let q = Tensor::variable(
            (0..2 * 2 * d_q).map(|_| r.random_range(-1.0..1.0)).collect(),
            &[2, 2, d_q],
        )
        .unwrap();
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &spatial).unwrap();
        let tp = retriever.retrieve(&projected, &temporal).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();
        fused.h_f.sum_all().backward().unwrap();

        assert!(!sp.vectors.requires_grad());
        assert!(sp.vectors.grad().is_none());
        assert!(!tp.vectors.requires_grad());
        assert!(tp.vectors.grad().is_none());
        assert!(q.grad().is_some());
        // The merge stage sees exactly one key per row, so its softmax
        // weight is constantly one: the merge query/key projections and
        // the whole spatial stream behind them sit on a gradient-dead
        // path. Everything on the live path must receive signal.
        for p in retriever.params().iter().chain(&fusion.params()) {
            let grad = p.grad();
            assert!(grad.is_some(), "no gradient buffer for {}", p.name());
            let dead_path = p.name().contains("merge.wq")
                || p.name().contains("merge.wk")
                || p.name().contains(".spatial.");
            if !dead_path {
                assert!(
                    grad.unwrap().iter().any(|x| *x != 0.0),
                    "zero gradient at {}",
                    p.name()
                );
            }
        }
    }

    #[test]
    fn fused_width_is_query_plus_retrieval_under_default_dims() {
        let mut r = rng(13);
        let d_q = 256;
        let d_r = 128;
        let bank = bank_from(&[vec![0.0; d_r]], BankKind::Spatial, d_r);
        let bank_t = bank_from(&[vec![0.0; d_r]], BankKind::Temporal, d_r);
        let retriever = Retriever::<f64>::new("ret", d_q, d_r, 5, &mut r).unwrap();
        let fusion = CrossFusion::<f64>::new("fuse", d_r, 4, 0.0, &mut r).unwrap();
        let q = Tensor::zeros(&[1, 2, d_q]);
        let projected = retriever.project(&q).unwrap();
        let sp = retriever.retrieve(&projected, &bank).unwrap();
        let tp = retriever.retrieve(&projected, &bank_t).unwrap();
        let mut rr = rng(9);
        let mut ctx = FwdCtx::eval(&mut rr);
        let fused = fusion.forward(&q, &projected, &sp, &tp, &mut ctx).unwrap();
        assert_eq!(fused.h_f.shape(), &[1, 2, 384]);
        assert!(fused.h_f.all_finite());
    }
}

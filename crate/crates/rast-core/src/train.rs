//! Training loop, evaluation, and run persistence.
//!
//! One seeded generator drives initialization, batch shuffling, dropout,
//! and reservoir sampling, so a seed fixes the whole trajectory. The
//! banks are searched read-only inside the forward pass; momentum
//! updates, query observation, and encoding sampling happen between
//! steps, and structural bank updates run only on update epochs.
//!
//! A checkpoint directory holds `model.ckpt` (all parameters), the two
//! bank snapshots, `run.json` (config, graph, provenance, best-epoch
//! record), and `train_log.json`. Bank indexes are runtime-only state:
//! the manifest records the seed of the last rebuild so loading can
//! reconstruct the same index from the same entries.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::{ByteReader, ByteWriter};
use crate::config::RunConfig;
use crate::data::{DatasetBundle, Split};
use crate::encoder::GraphSpec;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, masked_mae, MetricsReport};
use crate::model::Rast;
use crate::nn::FwdCtx;
use crate::optim::{curriculum_horizon, lr_at_epoch, AdamW};
use crate::scalar::{Dtype, Scalar};
use crate::store::{snapshot, BankKind, MemoryBank, Reservoir};
use crate::tensor::Tensor;

/// Encodings sampled per bank between store updates.
const ENCODING_SAMPLE_CAP: usize = 512;
/// Consecutive non-finite epoch losses tolerated before aborting.
const DIVERGENCE_LIMIT: usize = 3;

const CKPT_MAGIC: &[u8; 8] = b"RASTCKPT";
const CKPT_VERSION: u16 = 1;

/// What one training run did, epoch by epoch.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    /// Data-term MAE on the curriculum horizon, per epoch.
    pub train_loss: Vec<f64>,
    /// De-normalized validation MAE over the full horizon, per epoch.
    pub val_mae: Vec<f64>,
    /// Epochs (0-based) on which the banks were updated and reindexed.
    pub rebuild_epochs: Vec<usize>,
    pub skipped_steps: u64,
    /// Batches whose targets were entirely null.
    pub empty_batches: usize,
    pub stopped_early: bool,
}

/// Everything `train` hands back.
#[derive(Debug)]
pub struct TrainOutput<S: Scalar> {
    pub report: TrainReport,
    pub model: Rast<S>,
    pub spatial: MemoryBank<S>,
    pub temporal: MemoryBank<S>,
}

/// `run.json`: enough to rebuild the model and banks without the
/// original data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub data: String,
    pub num_nodes: usize,
    pub adjacency: Vec<f64>,
    /// Seed of the last index rebuild; `None` means the banks were never
    /// reindexed and search stays exact.
    pub index_seed: Option<u64>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

/// Loss on the first `horizon` prediction steps only.
fn curriculum_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    horizon: usize,
    null_val: f64,
) -> Result<(Tensor<S>, usize)> {
    let full = pred.shape()[1];
    if horizon >= full {
        return masked_mae(pred, target, null_val);
    }
    masked_mae(
        &pred.narrow(1, 0, horizon)?,
        &target.narrow(1, 0, horizon)?,
        null_val,
    )
}

/// Runs the model over one split and reports de-normalized metrics. The
/// banks are only read: entries and momentum are untouched.
pub fn evaluate<S: Scalar>(
    model: &Rast<S>,
    banks: Option<(&MemoryBank<S>, &MemoryBank<S>)>,
    data: &DatasetBundle,
    split: Split,
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let starts: Vec<usize> = data.split_starts(split).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in starts.chunks(cfg.batch_size.max(1)) {
        let (x, y) = data.make_batch::<S>(chunk)?;
        let mut ctx = FwdCtx::eval(&mut rng);
        let out = model.forward(&x, banks, &mut ctx)?;
        preds.extend(data.denormalize_predictions(out.prediction.data()));
        targets.extend(data.denormalize_targets(y.data()));
    }
    compute_metrics(
        &preds,
        &targets,
        &[starts.len(), cfg.output_len, data.num_nodes(), data.d_out()],
        cfg.null_val,
    )
}

/// Trains a fresh model on the bundle. When `out_dir` is given, the best
/// checkpoint (by validation MAE) and the run manifest are kept there.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    data: &DatasetBundle,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    if data.d_in() != cfg.d_input {
        return Err(Error::config(format!(
            "bundle has {} channels, config d_input is {}",
            data.d_in(),
            cfg.d_input
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Rast::<S>::new(cfg, data.graph(), &mut rng)?;
    let mut spatial = MemoryBank::<S>::new(BankKind::Spatial, cfg.retrieval_dim, cfg.store.policy());
    let mut temporal =
        MemoryBank::<S>::new(BankKind::Temporal, cfg.retrieval_dim, cfg.store.policy());
    let mut opt = AdamW::new(model.params(), cfg.lr, cfg.weight_decay, cfg.eps, cfg.max_norm);
    let mut sp_samples = Reservoir::<Vec<S>>::new(ENCODING_SAMPLE_CAP);
    let mut tp_samples = Reservoir::<Vec<S>>::new(ENCODING_SAMPLE_CAP);

    let mut manifest = RunManifest {
        config: cfg.clone(),
        data: data.name().to_string(),
        num_nodes: data.num_nodes(),
        adjacency: data.graph().adjacency().to_vec(),
        index_seed: None,
        best_epoch: None,
        best_val_mae: None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_manifest(dir, &manifest)?;
    }

    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: None,
        best_val_mae: None,
        train_loss: Vec::new(),
        val_mae: Vec::new(),
        rebuild_epochs: Vec::new(),
        skipped_steps: 0,
        empty_batches: 0,
        stopped_early: false,
    };
    let mut starts: Vec<usize> = data.split_starts(Split::Train).collect();
    let mut non_finite_epochs = 0usize;
    let mut patience_used = 0usize;

    for epoch in 0..cfg.max_epochs {
        opt.set_lr(lr_at_epoch(cfg.lr, &cfg.milestones, cfg.gamma, epoch));
        let horizon = curriculum_horizon(epoch, cfg.warm_epochs, cfg.cl_epochs, cfg.output_len);
        starts.shuffle(&mut rng);

        let mut abs_sum = 0.0;
        let mut valid_sum = 0usize;
        for chunk in starts.chunks(cfg.batch_size) {
            let (x, y) = data.make_batch::<S>(chunk)?;
            let out = {
                let mut ctx = FwdCtx::train(&mut rng);
                model.forward(&x, Some((&spatial, &temporal)), &mut ctx)?
            };
            let (loss, valid) = curriculum_loss(&out.prediction, &y, horizon, cfg.null_val)?;
            if valid == 0 {
                report.empty_batches += 1;
            } else {
                opt.zero_grad();
                loss.backward()?;
                opt.step()?;
                abs_sum += loss.item()?.as_f64() * valid as f64;
                valid_sum += valid;
            }

            // Retrieval bookkeeping: momentum for hits, the relevance
            // window for prune decisions, encodings for the next update.
            // A diverged forward must not poison the banks.
            let finite = out.e_sp.all_finite()
                && out.e_tp.all_finite()
                && out.projected.as_ref().is_none_or(|p| p.all_finite());
            if finite {
                for (bank, hits) in
                    [(&mut spatial, &out.spatial_hits), (&mut temporal, &out.temporal_hits)]
                {
                    if let Some(hits) = hits {
                        for row in 0..hits.rows() {
                            let items = hits.row_items(row);
                            if !items.is_empty() {
                                bank.update_momentum(&items, cfg.lambda_div, cfg.tau)?;
                            }
                        }
                    }
                }
                if let Some(proj) = &out.projected {
                    let d = cfg.retrieval_dim;
                    for row in proj.data().chunks(d) {
                        spatial.observe_query(row, &mut rng)?;
                        temporal.observe_query(row, &mut rng)?;
                    }
                }
                let d = out.e_sp.shape()[2];
                for row in out.e_sp.data().chunks(d) {
                    sp_samples.observe(row.to_vec(), &mut rng);
                }
                for row in out.e_tp.data().chunks(d) {
                    tp_samples.observe(row.to_vec(), &mut rng);
                }
            }
        }
        report.skipped_steps = opt.skipped_steps();

        let train_loss = if valid_sum > 0 {
            abs_sum / valid_sum as f64
        } else {
            0.0
        };
        report.train_loss.push(train_loss);
        report.epochs_run = epoch + 1;
        if train_loss.is_finite() {
            non_finite_epochs = 0;
        } else {
            non_finite_epochs += 1;
            if non_finite_epochs >= DIVERGENCE_LIMIT {
                return Err(Error::Diverged(format!(
                    "train loss was non-finite for {DIVERGENCE_LIMIT} consecutive epochs \
                     (last epoch {epoch}, loss {train_loss}); try a lower lr or max_norm"
                )));
            }
        }

        if (epoch + 1) % cfg.update_interval == 0 {
            let seed = cfg.seed.wrapping_add(epoch as u64);
            for (bank, samples) in [(&mut spatial, &mut sp_samples), (&mut temporal, &mut tp_samples)]
            {
                bank.update_bank(samples.items(), epoch as u32)?;
                bank.prune_and_decay(epoch as u32);
                bank.build_index(
                    cfg.store.index_choice(),
                    cfg.store.n_list,
                    cfg.store.n_probe,
                    seed,
                )?;
                bank.clear_recent_queries();
                samples.clear();
            }
            manifest.index_seed = Some(seed);
            report.rebuild_epochs.push(epoch);
        }

        let val = evaluate(&model, Some((&spatial, &temporal)), data, Split::Val, cfg)?;
        let val_mae = val.average.mae;
        report.val_mae.push(val_mae);

        let improved = match report.best_val_mae {
            Some(best) => val_mae < best,
            None => val_mae.is_finite(),
        };
        if improved {
            report.best_val_mae = Some(val_mae);
            report.best_epoch = Some(epoch);
            patience_used = 0;
            if let Some(dir) = out_dir {
                manifest.best_epoch = Some(epoch);
                manifest.best_val_mae = Some(val_mae);
                save_checkpoint(dir, &model, &spatial, &temporal, &manifest)?;
            }
        } else {
            patience_used += 1;
            if patience_used >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        fs::write(
            dir.join("train_log.json"),
            serde_json::to_vec_pretty(&report).map_err(|e| Error::data(e.to_string()))?,
        )?;
    }
    Ok(TrainOutput {
        report,
        model,
        spatial,
        temporal,
    })
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::write(
        dir.join("run.json"),
        serde_json::to_vec_pretty(manifest).map_err(|e| Error::data(e.to_string()))?,
    )?;
    Ok(())
}

/// Writes `model.ckpt`, both bank snapshots, and `run.json` into `dir`.
/// Parameter values are stored as f64 bits, which preserves both f32 and
/// f64 weights exactly.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &Rast<S>,
    spatial: &MemoryBank<S>,
    temporal: &MemoryBank<S>,
    manifest: &RunManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let mut w = ByteWriter::new();
    w.raw(CKPT_MAGIC);
    w.u16(CKPT_VERSION);
    w.u8(S::DTYPE.tag());
    w.u32(params.len() as u32);
    for p in &params {
        let name = p.name().as_bytes();
        w.u32(name.len() as u32);
        w.raw(name);
        let shape = p.shape();
        w.u32(shape.len() as u32);
        for &d in &shape {
            w.u32(d as u32);
        }
        for v in p.data() {
            w.f64(v.as_f64());
        }
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);
    let path = dir.join("model.ckpt");
    let mut tmp_name = path.as_os_str().to_os_string();
    tmp_name.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp_name);
    fs::write(&tmp, w.as_slice())?;
    fs::rename(&tmp, &path)?;

    snapshot::save(spatial, &dir.join("spatial.bank"))?;
    snapshot::save(temporal, &dir.join("temporal.bank"))?;
    write_manifest(dir, manifest)
}

/// Restores a run directory: manifest, model weights, and both banks,
/// with the index rebuilt exactly as it was at save time.
pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
) -> Result<(RunManifest, Rast<S>, MemoryBank<S>, MemoryBank<S>)> {
    let manifest: RunManifest = serde_json::from_slice(&fs::read(dir.join("run.json"))?)
        .map_err(|e| Error::data(format!("run.json: {e}")))?;
    let cfg = &manifest.config;
    cfg.validate()?;
    if cfg.precision.dtype() != S::DTYPE {
        return Err(Error::config(format!(
            "checkpoint precision is {:?}, loader scalar is {:?}",
            cfg.precision.dtype(),
            S::DTYPE
        )));
    }
    let graph = GraphSpec::new(manifest.num_nodes, manifest.adjacency.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Rast::<S>::new(cfg, &graph, &mut rng)?;

    let buf = fs::read(dir.join("model.ckpt"))?;
    if buf.len() < CKPT_MAGIC.len() + 4 {
        return Err(Error::format(buf.len(), "checkpoint shorter than header"));
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&buf[..body_len]);
    if stored != actual {
        return Err(Error::format(
            body_len,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    let mut r = ByteReader::new(&buf[..body_len]);
    r.expect_magic(CKPT_MAGIC, "checkpoint magic")?;
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            r.pos() - 2,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let tag = r.u8("dtype")?;
    if Dtype::from_tag(tag) != Some(S::DTYPE) {
        return Err(Error::format(
            r.pos() - 1,
            format!("checkpoint dtype tag {tag} does not match the run precision"),
        ));
    }
    let count = r.u32("param count")? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<S>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("param name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "param name")?.to_vec())
            .map_err(|e| Error::format(r.pos(), format!("param name not UTF-8: {e}")))?;
        let rank = r.u32("param rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("param dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(S::of(r.f64("param value")?));
        }
        stored.insert(name, (shape, values));
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos(), "trailing bytes after parameters"));
    }

    for p in model.params() {
        let (shape, values) = stored.remove(p.name()).ok_or_else(|| {
            Error::data(format!("checkpoint is missing parameter {:?}", p.name()))
        })?;
        if shape != p.shape() {
            return Err(Error::data(format!(
                "parameter {:?} has shape {shape:?} in the checkpoint, model expects {:?}",
                p.name(),
                p.shape()
            )));
        }
        p.load_data(values)?;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::data(format!(
            "checkpoint contains unknown parameter {name:?}"
        )));
    }

    let policy = cfg.store.policy();
    let mut spatial = snapshot::load::<S>(&dir.join("spatial.bank"), policy.clone())?;
    let mut temporal = snapshot::load::<S>(&dir.join("temporal.bank"), policy)?;
    for (bank, want) in [(&spatial, BankKind::Spatial), (&temporal, BankKind::Temporal)] {
        if bank.kind() != want {
            return Err(Error::data(format!(
                "{} snapshot holds a {} bank",
                want.name(),
                bank.kind().name()
            )));
        }
    }
    if let Some(seed) = manifest.index_seed {
        for bank in [&mut spatial, &mut temporal] {
            bank.build_index(cfg.store.index_choice(), cfg.store.n_list, cfg.store.n_probe, seed)?;
        }
    }
    Ok((manifest, model, spatial, temporal))
}

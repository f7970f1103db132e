//! Training orchestration: two-view augmentation, in-batch mixture injection,
//! loss-mode dispatch, memory-bank upkeep, momentum updates, optional
//! multi-scale training, checkpoints, and the metrics stream.
//!
//! No RNG object lives in [`TrainState`]. Every randomness consumer draws from
//! a stream derived from `(seed, purpose, counter)` — augmentation and mixing
//! are keyed by step, the epoch shuffle by epoch — so "rng state" serializes
//! as the two counters the checkpoint metadata already carries, and a restored
//! run replays the exact draws of an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bank::MemoryBank;
use crate::config::RunConfig;
use crate::data::{
    augment_u8, normalize_image, resize_image_batch, AugmentCfg, LabeledDataset, Normalization,
};
use crate::derive_rng;
use crate::encoder::{Encoder, MomentumPair, Predictor};
use crate::error::{Error, Result};
use crate::evalsuite::{extract_features, knn_accuracy};
use crate::losses::{
    compute_loss, BaseLossKind, Branches, LossCtx, LossMode, LossOutput, LossReport,
};
use crate::mixer::{
    apply_global, apply_region, choose_mode, rand_bbox, sample_lambda, MixConfig, MixMode,
    MixedBatch,
};
use crate::tensor::checkpoint::{self, meta_json, meta_record, TensorRecord, META_RECORD};
use crate::tensor::optim::{Adam, Optimizer, Sgd};
use crate::tensor::{Graph, TensorId};
use crate::types::{ImageBatch, TaggedKeys};

/// Un-normalized uint8 images gathered for one step.
#[derive(Debug, Clone)]
pub struct RawBatch {
    pub data: Vec<u8>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl RawBatch {
    pub fn gather(ds: &LabeledDataset, indices: &[usize]) -> Self {
        let stride = ds.c * ds.h * ds.w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(ds.image(i));
        }
        Self {
            data,
            n: indices.len(),
            c: ds.c,
            h: ds.h,
            w: ds.w,
        }
    }

    fn image(&self, i: usize) -> &[u8] {
        let stride = self.c * self.h * self.w;
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Two independently augmented, normalized views of the same raw batch.
/// Draw order: per image, all view-1 draws then all view-2 draws.
pub fn augment_two_views(
    raw: &RawBatch,
    aug: &AugmentCfg,
    norm: &Normalization,
    rng: &mut impl Rng,
) -> Result<(ImageBatch, ImageBatch)> {
    let stride = raw.c * raw.h * raw.w;
    let mut v1 = Vec::with_capacity(raw.n * stride);
    let mut v2 = Vec::with_capacity(raw.n * stride);
    for i in 0..raw.n {
        let img = raw.image(i);
        let a = augment_u8(img, raw.c, raw.h, raw.w, rng, aug);
        v1.extend(normalize_image(&a, raw.c, raw.h, raw.w, norm));
        let b = augment_u8(img, raw.c, raw.h, raw.w, rng, aug);
        v2.extend(normalize_image(&b, raw.c, raw.h, raw.w, norm));
    }
    Ok((
        ImageBatch::new(raw.n, raw.c, raw.h, raw.w, v1)?,
        ImageBatch::new(raw.n, raw.c, raw.h, raw.w, v2)?,
    ))
}

/// One mixture decision for a step, drawn once at the native extent and
/// re-materializable at any training scale. Draw order matches `mix_batch`:
/// mode, then λ, then (region only) the box.
#[derive(Debug, Clone)]
pub struct MixDraw {
    pub mode: MixMode,
    pub lambda_raw: f32,
    /// Box at the native extent; present iff region mode.
    pub bbox: Option<(usize, usize, usize, usize)>,
    native_h: usize,
    native_w: usize,
}

pub fn draw_mixture(cfg: &MixConfig, h: usize, w: usize, rng: &mut impl Rng) -> MixDraw {
    let mode = choose_mode(cfg.p_global, rng);
    let lambda_raw = sample_lambda(cfg.gamma, rng);
    let bbox = match mode {
        MixMode::Global => None,
        MixMode::Region => Some(rand_bbox(h, w, lambda_raw, rng)),
    };
    MixDraw {
        mode,
        lambda_raw,
        bbox,
        native_h: h,
        native_w: w,
    }
}

/// Apply a drawn mixture to a view. At the native extent this reproduces
/// `mix_batch` exactly; at other extents the box is rescaled and λ recomputed
/// from the clipped area at that resolution (the Eq. 2 correction is always
/// taken in the space the network actually sees).
pub fn materialize_mixture(view: &ImageBatch, draw: &MixDraw) -> Result<MixedBatch> {
    if view.n < 2 {
        return Err(Error::invalid(
            "materialize_mixture",
            format!("self-pairing needs batch size >= 2, got {}", view.n),
        ));
    }
    match draw.mode {
        MixMode::Global => Ok(MixedBatch {
            images: apply_global(view, draw.lambda_raw),
            lambda: draw.lambda_raw,
            mode: MixMode::Global,
            bbox: None,
        }),
        MixMode::Region => {
            let (x1, y1, x2, y2) = draw.bbox.expect("region draw carries a box");
            let sx = view.w as f64 / draw.native_w as f64;
            let sy = view.h as f64 / draw.native_h as f64;
            let scale = |v: usize, s: f64, lim: usize| -> usize {
                ((v as f64 * s).round() as usize).min(lim)
            };
            let bbox = (
                scale(x1, sx, view.w),
                scale(y1, sy, view.h),
                scale(x2, sx, view.w),
                scale(y2, sy, view.h),
            );
            let area = (bbox.2 - bbox.0) * (bbox.3 - bbox.1);
            let lambda = 1.0 - area as f32 / (view.h * view.w) as f32;
            Ok(MixedBatch {
                images: apply_region(view, bbox),
                lambda,
                mode: MixMode::Region,
                bbox: Some(bbox),
            })
        }
    }
}

/// Piecewise learning rate: linear warm-up over `warmup` steps, then two 0.2
/// decays at 75% and 87.5% of the budget — the "50 and 25 epochs before the
/// end" points of the 200-epoch desk reference, applied proportionally to
/// shorter runs.
pub fn lr_at(step: usize, total: usize, base_lr: f32, warmup: usize) -> f32 {
    let total = total.max(1);
    let warmup = warmup.min(total);
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f32 / warmup as f32;
    }
    let progress = step as f64 / total as f64;
    let mut lr = base_lr;
    if progress >= 0.75 {
        lr *= 0.2;
    }
    if progress >= 0.875 {
        lr *= 0.2;
    }
    lr
}

/// Everything one training run owns. Parsed config pieces are cached so the
/// hot loop never re-parses strings.
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub pair: MomentumPair,
    pub predictor: Option<Predictor>,
    /// One bank per training scale (index 0 for single-scale); empty for
    /// bases that keep no negatives.
    pub banks: Vec<MemoryBank>,
    pub opt: Optimizer,
    pub seed: u64,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    base: BaseLossKind,
    mode: LossMode,
    tau: f32,
    moco_symmetric: bool,
    mix_cfg: MixConfig,
    aug_cfg: AugmentCfg,
    norm: Normalization,
    scales: Vec<usize>,
    base_lr: f32,
    warmup: usize,
    timing: bool,
    in_channels: usize,
    cfg_hash: String,
    cfg_resolved: String,
}

fn uses_key_branch(base: BaseLossKind) -> bool {
    matches!(base, BaseLossKind::Moco | BaseLossKind::Byol)
}

impl TrainState {
    pub fn new(cfg: &RunConfig, in_channels: usize, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_loss()?;
        let mode = cfg.loss_mode_parsed()?;
        if !cfg.mix_enabled && mode != LossMode::OriginalOnly {
            return Err(Error::Config(format!(
                "loss.mode {} needs mix.enabled=true",
                mode.as_str()
            )));
        }
        let scales = cfg.scales_list()?;
        if !scales.is_empty() && base != BaseLossKind::Moco {
            return Err(Error::Config(
                "multi-scale training needs loss.base=moco (per-scale memory banks)".into(),
            ));
        }
        let spec = cfg.encoder_spec()?;
        let online = Encoder::new(&spec, in_channels, cfg.seed)?;
        let pair = MomentumPair::new(online);
        let predictor = match base {
            BaseLossKind::Byol => Some(Predictor::new(
                spec.embedding_dim,
                spec.proj_hidden_dim,
                cfg.seed,
            )),
            _ => None,
        };
        let banks = if base == BaseLossKind::Moco {
            (0..scales.len().max(1))
                .map(|_| MemoryBank::new(cfg.bank_capacity, spec.embedding_dim))
                .collect()
        } else {
            Vec::new()
        };
        let opt = match cfg.opt_kind.as_str() {
            "sgd" => Optimizer::Sgd(Sgd::new(cfg.opt_momentum, cfg.opt_weight_decay)),
            _ => Optimizer::Adam(Adam::new(cfg.opt_weight_decay)),
        };
        let spe = steps_per_epoch.max(1);
        let mut total = cfg.epochs.saturating_mul(spe);
        if cfg.max_steps > 0 {
            total = total.min(cfg.max_steps);
        }
        Ok(Self {
            step: 0,
            epoch: 0,
            pair,
            predictor,
            banks,
            opt,
            seed: cfg.seed,
            total_steps: total.max(1),
            steps_per_epoch: spe,
            base,
            mode,
            tau: cfg.loss_tau,
            moco_symmetric: cfg.loss_moco_symmetric,
            mix_cfg: cfg.mix_config()?,
            aug_cfg: cfg.augment_cfg()?,
            norm: cfg.normalization()?,
            scales,
            base_lr: cfg.opt_lr,
            warmup: cfg.opt_warmup_iters,
            timing: cfg.metrics_timing,
            in_channels,
            cfg_hash: cfg.hash(),
            cfg_resolved: cfg.resolved(),
        })
    }

    pub fn base(&self) -> BaseLossKind {
        self.base
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn config_hash(&self) -> &str {
        &self.cfg_hash
    }
}

/// What one step produced, in the shape the metrics stream wants.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Completed-step count after this step (1-based row id).
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
    /// "global" | "region" | "none".
    pub mix_mode: &'static str,
    pub wall_ms: Option<f64>,
    /// (scale index, keys) enqueued this step — the provenance surface the
    /// bank-purity invariant is audited through.
    pub enqueued: Vec<(usize, TaggedKeys)>,
}

/// Loss branches wired to the live encoders. The key branch is the momentum
/// copy where the base has one, otherwise the detached online encoder.
struct EngineBranches<'a> {
    online: &'a mut Encoder,
    key: Option<&'a mut Encoder>,
    predictor: Option<&'a mut Predictor>,
}

impl Branches for EngineBranches<'_> {
    fn online(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId> {
        self.online.forward_bound(g, x, true)
    }

    fn online_predicted(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId> {
        let z = self.online.forward_bound(g, x, true)?;
        let p = self
            .predictor
            .as_mut()
            .ok_or_else(|| Error::invalid("branches", "predicted branch needs a predictor"))?;
        p.forward_bound(g, z)
    }

    fn key(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId> {
        match self.key.as_mut() {
            Some(k) => k.forward_bound(g, x, true),
            None => {
                let z = self.online.forward_bound(g, x, true)?;
                Ok(g.detach(z))
            }
        }
    }
}

/// One optimization step at the native scale. Post-conditions, in order:
/// augment twice, mix view 1 (when enabled), compute the configured loss,
/// backward + optimizer step, momentum-update the key branch and enqueue the
/// step's unmixed keys (bases that keep them), bump the step counter.
pub fn train_step(state: &mut TrainState, raw: &RawBatch) -> Result<StepRecord> {
    step_impl(state, raw, &[None])
}

/// One step trained at every configured scale: views are resized per scale,
/// each scale's loss uses (and feeds) its own bank, the total is the sum over
/// scales, and a single backward/step serves them all.
pub fn multi_scale_step(state: &mut TrainState, raw: &RawBatch) -> Result<StepRecord> {
    if state.scales.is_empty() {
        return Err(Error::Config(
            "multi_scale_step needs a non-empty scales list".into(),
        ));
    }
    for &s in &state.scales {
        if s > raw.h || s > raw.w {
            return Err(Error::invalid(
                "multi_scale_step",
                format!("scale {s} exceeds source extent {}x{}", raw.h, raw.w),
            ));
        }
    }
    let scaled: Vec<Option<usize>> = state.scales.iter().map(|&s| Some(s)).collect();
    step_impl(state, raw, &scaled)
}

fn step_impl(
    state: &mut TrainState,
    raw: &RawBatch,
    scaled: &[Option<usize>],
) -> Result<StepRecord> {
    let t0 = Instant::now();
    let step = state.step;
    if state.mix_cfg.enabled && raw.n < 2 {
        return Err(Error::invalid(
            "train_step",
            format!("mixing needs batch size >= 2, got {}", raw.n),
        ));
    }

    let mut aug_rng = derive_rng(state.seed, "augment", step as u64);
    let (view1, view2) = augment_two_views(raw, &state.aug_cfg, &state.norm, &mut aug_rng)?;

    let draw = if state.mix_cfg.enabled {
        let mut mix_rng = derive_rng(state.seed, "mix", step as u64);
        Some(draw_mixture(&state.mix_cfg, raw.h, raw.w, &mut mix_rng))
    } else {
        None
    };
    let mix_mode = draw.as_ref().map_or("none", |d| d.mode.as_str());

    let base = state.base;
    let mode = state.mode;
    let ctx_tau = state.tau;
    let sym = state.moco_symmetric;
    let use_key = uses_key_branch(base);
    let use_bank = base == BaseLossKind::Moco;

    let mut g = Graph::new();
    let TrainState {
        pair,
        predictor,
        banks,
        ..
    } = state;
    pair.online.bind(&mut g, true);
    if use_key {
        pair.key.bind(&mut g, false);
    }
    if let Some(p) = predictor.as_mut() {
        p.bind(&mut g, true);
    }

    let (total_id, report, collected) = {
        let mut br = EngineBranches {
            online: &mut pair.online,
            key: use_key.then_some(&mut pair.key),
            predictor: predictor.as_mut(),
        };
        let mut total_id: Option<TensorId> = None;
        let mut report = LossReport {
            l_ori: 0.0,
            l_m_normal: 0.0,
            l_m_reverse: 0.0,
            lambda: 1.0,
            total: 0.0,
        };
        let mut collected: Vec<(usize, TaggedKeys)> = Vec::new();
        for (si, sc) in scaled.iter().enumerate() {
            let (v1, v2) = match sc {
                Some(s) if *s != raw.h || *s != raw.w => (
                    resize_image_batch(&view1, *s),
                    resize_image_batch(&view2, *s),
                ),
                _ => (view1.clone(), view2.clone()),
            };
            let m1 = match &draw {
                Some(d) => Some(materialize_mixture(&v1, d)?),
                None => None,
            };
            let m2 = match (&draw, mode) {
                (Some(d), LossMode::BothBranch) => Some(materialize_mixture(&v2, d)?),
                _ => None,
            };
            let ctx = LossCtx {
                base,
                tau: ctx_tau,
                bank: if use_bank { Some(&banks[si]) } else { None },
                moco_symmetric: sym,
            };
            let LossOutput {
                total,
                report: r,
                keys_for_bank,
            } = compute_loss(&mut g, &mut br, &v1, &v2, m1.as_ref(), m2.as_ref(), mode, &ctx)?;
            total_id = Some(match total_id {
                Some(acc) => g.add(acc, total)?,
                None => total,
            });
            report.l_ori += r.l_ori;
            report.l_m_normal += r.l_m_normal;
            report.l_m_reverse += r.l_m_reverse;
            report.total += r.total;
            if si == 0 {
                report.lambda = r.lambda;
            }
            if let Some(keys) = keys_for_bank {
                collected.push((si, keys));
            }
        }
        (total_id.expect("at least one scale"), report, collected)
    };

    if !report.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: step as u64,
            report,
        });
    }

    g.backward(total_id)?;
    let mut grads = pair.online.grad_map(&g)?;
    let lr = lr_at(step, state.total_steps, state.base_lr, state.warmup);
    match predictor.as_mut() {
        Some(p) => {
            grads.append(&mut p.grad_map(&g)?);
            state.opt.step(
                lr,
                pair.online.params.iter_mut().chain(p.params.iter_mut()),
                &grads,
            )?;
        }
        None => state.opt.step(lr, pair.online.params.iter_mut(), &grads)?,
    }

    if use_key {
        pair.momentum_update()?;
    }
    for (si, keys) in &collected {
        banks[*si].enqueue(keys)?;
    }

    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        epoch: state.epoch,
        report,
        mix_mode,
        wall_ms: state
            .timing
            .then(|| t0.elapsed().as_secs_f64() * 1000.0),
        enqueued: collected,
    })
}

pub const METRICS_HEADER: &str =
    "step,epoch,l_ori,l_m_normal,l_m_reverse,lambda,mode,total,knn_acc,wall_ms";

/// One CSV row. knn_acc is blank except at eval steps; wall_ms is blank unless
/// timing was enabled (so default runs diff byte-identical).
pub fn format_metrics_row(rec: &StepRecord, knn_acc: Option<f32>) -> String {
    let r = &rec.report;
    let knn = knn_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
    let wall = rec.wall_ms.map(|v| format!("{v:.3}")).unwrap_or_default();
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{}",
        rec.step, rec.epoch, r.l_ori, r.l_m_normal, r.l_m_reverse, r.lambda, rec.mix_mode, r.total,
        knn, wall
    )
}

/// Deterministic epoch ordering from the shuffle stream.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(seed, "shuffle", epoch as u64));
    idx
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if n >= batch_size {
        n / batch_size // drop-last
    } else {
        1
    }
}

/// kNN monitor: index features from one set, query with another, both through
/// the online backbone in eval mode.
pub fn knn_monitor(
    enc: &mut Encoder,
    index_ds: &LabeledDataset,
    query_ds: &LabeledDataset,
    norm: &Normalization,
    k: usize,
    tau: f32,
    batch_size: usize,
) -> Result<f32> {
    let index = extract_features(enc, index_ds, norm, batch_size)?;
    let queries = extract_features(enc, query_ds, norm, batch_size)?;
    let k = k.min(index.features.n).max(1);
    knn_accuracy(&index, &queries, k, tau, true)
}

// --- checkpoints -----------------------------------------------------------

fn flat_record(name: String, data: Vec<f32>) -> TensorRecord {
    let len = data.len();
    TensorRecord::new(name, &[len], data)
}

/// Write the full training state as a "UMX1" file: a JSON metadata record
/// (step, epoch, seed, config hash, the resolved config itself, and the
/// derived-stream rng description) followed by every parameter, running stat,
/// optimizer slot, and bank.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "format": 1,
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.seed,
        "config_hash": state.cfg_hash,
        "config": state.cfg_resolved,
        "in_channels": state.in_channels,
        "steps_per_epoch": state.steps_per_epoch,
        "total_steps": state.total_steps,
        "rng": {
            "scheme": "derived-streams",
            "streams": ["augment", "mix", "shuffle"],
            "step": state.step,
            "epoch": state.epoch,
        },
    });
    let mut records = vec![meta_record(&meta.to_string())];
    for (name, data) in state.pair.online.state_records("online.") {
        records.push(flat_record(name, data));
    }
    if uses_key_branch(state.base) {
        for (name, data) in state.pair.key.state_records("key.") {
            records.push(flat_record(name, data));
        }
    }
    if let Some(p) = &state.predictor {
        for (name, data) in p.state_records("predictor.") {
            records.push(flat_record(name, data));
        }
    }
    for (name, data) in state.opt.state_records() {
        records.push(flat_record(name, data));
    }
    for (i, bank) in state.banks.iter().enumerate() {
        let (rows, len) = bank.to_records();
        records.push(TensorRecord::new(
            format!("bank.{i}.keys"),
            &[len, bank.dim()],
            rows,
        ));
    }
    checkpoint::write_file(path, &records)
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata missing '{key}'")))
}

/// Parsed checkpoint metadata (also the `inspect` surface).
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub in_channels: usize,
    pub steps_per_epoch: usize,
}

pub fn read_checkpoint_meta(records: &[TensorRecord]) -> Result<CheckpointMeta> {
    let rec = records
        .iter()
        .find(|r| r.name == META_RECORD)
        .ok_or_else(|| Error::Format("checkpoint has no metadata record".into()))?;
    let json = meta_json(rec)?;
    let meta: serde_json::Value = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("checkpoint metadata is not JSON: {e}")))?;
    let cfg_text = meta
        .get("config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("checkpoint metadata missing 'config'".into()))?;
    let config = RunConfig::parse(cfg_text, "checkpoint")?;
    Ok(CheckpointMeta {
        step: meta_usize(&meta, "step")?,
        epoch: meta_usize(&meta, "epoch")?,
        seed: meta
            .get("seed")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("checkpoint metadata missing 'seed'".into()))?,
        config_hash: meta
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        config,
        in_channels: meta_usize(&meta, "in_channels")?,
        steps_per_epoch: meta_usize(&meta, "steps_per_epoch")?,
    })
}

/// Rebuild a [`TrainState`] from a checkpoint alone; the training config rides
/// inside the metadata record, so no external config is needed.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let records = checkpoint::read_file(path)?;
    let meta = read_checkpoint_meta(&records)?;
    let mut state = TrainState::new(&meta.config, meta.in_channels, meta.steps_per_epoch)?;
    state.step = meta.step;
    state.epoch = meta.epoch;

    let mut by_name: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut bank_records: Vec<(usize, Vec<f32>, Vec<usize>)> = Vec::new();
    for r in records {
        if r.name == META_RECORD {
            continue;
        }
        if let Some(rest) = r.name.strip_prefix("bank.") {
            let idx: usize = rest
                .strip_suffix(".keys")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("unrecognized bank record {}", r.name)))?;
            bank_records.push((idx, r.data, r.shape));
            continue;
        }
        by_name.insert(r.name, r.data);
    }

    let online: BTreeMap<String, Vec<f32>> = strip_prefix_map(&by_name, "online.");
    state.pair.online.load_state_records("", &online)?;
    if uses_key_branch(state.base) {
        let key = strip_prefix_map(&by_name, "key.");
        state.pair.key.load_state_records("", &key)?;
    }
    if let Some(p) = state.predictor.as_mut() {
        let pred = strip_prefix_map(&by_name, "predictor.");
        p.load_state_records("", &pred)?;
    }
    let opt_records: BTreeMap<String, Vec<f32>> = by_name
        .iter()
        .filter(|(k, _)| k.starts_with("opt."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    state.opt.load_state_records(&opt_records)?;
    for (idx, rows, shape) in bank_records {
        let bank = state
            .banks
            .get_mut(idx)
            .ok_or_else(|| Error::Format(format!("checkpoint has bank {idx} but run has fewer")))?;
        let dim = shape.get(1).copied().unwrap_or(bank.dim());
        *bank = MemoryBank::from_rows(bank.capacity(), dim, &rows)?;
    }
    Ok(state)
}

fn strip_prefix_map(map: &BTreeMap<String, Vec<f32>>, prefix: &str) -> BTreeMap<String, Vec<f32>> {
    map.iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(prefix)
                .map(|rest| (rest.to_string(), v.clone()))
        })
        .collect()
}

// --- full runs -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub epochs: usize,
    pub last: Option<LossReport>,
    pub final_knn: Option<f32>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Run the training loop to its configured budget, streaming metrics and
/// saving a final checkpoint. `eval_sets` is (index set, query set) for the
/// kNN monitor; `resume` restarts from a checkpoint written by the same
/// config.
pub fn run_training(
    cfg: &RunConfig,
    train_ds: &LabeledDataset,
    eval_sets: Option<(&LabeledDataset, &LabeledDataset)>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let spe = steps_per_epoch(train_ds.n, cfg.batch_size);
    let mut state = match resume {
        Some(path) => {
            let st = load_checkpoint(path)?;
            if st.cfg_hash != cfg.hash() {
                return Err(Error::Config(format!(
                    "resume config mismatch: checkpoint hash {}, current {}",
                    st.cfg_hash,
                    cfg.hash()
                )));
            }
            st
        }
        None => TrainState::new(cfg, train_ds.c, spe)?,
    };
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(if resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    });

    let multi = !state.scales.is_empty();
    let bs = cfg.batch_size.min(train_ds.n);
    let mut last = None;
    let mut final_knn = None;
    'run: while state.step < state.total_steps {
        let order = epoch_order(train_ds.n, cfg.seed, state.epoch);
        for b in 0..state.steps_per_epoch {
            if state.step >= state.total_steps {
                break 'run;
            }
            let start = b * bs;
            let end = (start + bs).min(train_ds.n);
            let raw = RawBatch::gather(train_ds, &order[start..end]);
            let rec = if multi {
                multi_scale_step(&mut state, &raw)?
            } else {
                train_step(&mut state, &raw)?
            };
            let at_end = rec.step == state.total_steps;
            let due = cfg.eval_every > 0 && rec.step % cfg.eval_every == 0;
            let knn = match (eval_sets, due || at_end) {
                (Some((index_ds, query_ds)), true) => {
                    let acc = knn_monitor(
                        &mut state.pair.online,
                        index_ds,
                        query_ds,
                        &state.norm,
                        cfg.eval_knn_k,
                        cfg.eval_knn_tau,
                        bs.max(1),
                    )?;
                    final_knn = Some(acc);
                    Some(acc)
                }
                _ => None,
            };
            writeln!(metrics, "{}", format_metrics_row(&rec, knn))?;
            last = Some(rec.report);
        }
        state.epoch += 1;
    }
    metrics.flush()?;
    let checkpoint_path = out_dir.join("checkpoint.umx");
    save_checkpoint(&state, &checkpoint_path)?;
    Ok(RunSummary {
        steps: state.step,
        epochs: state.epoch,
        last,
        final_knn,
        metrics_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::losses::soft_ce_graph;
    use crate::mixer::mix_batch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder_stages = "4:2,8:2".into();
        cfg.encoder_embedding_dim = 8;
        cfg.encoder_proj_hidden_dim = 16;
        cfg.batch_size = 4;
        cfg.bank_capacity = 16;
        cfg.epochs = 4;
        cfg.eval_every = 0;
        cfg.opt_warmup_iters = 2;
        cfg
    }

    fn tiny_data(n_per_class: usize) -> LabeledDataset {
        make_synthetic(&SyntheticSpec {
            num_classes: 2,
            samples_per_class: n_per_class,
            extent: 16,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn batch_of(ds: &LabeledDataset, start: usize, n: usize) -> RawBatch {
        let idx: Vec<usize> = (start..start + n).map(|i| i % ds.n).collect();
        RawBatch::gather(ds, &idx)
    }

    #[test]
    fn lr_schedule_warms_up_then_decays_twice() {
        let base = 0.5f32;
        assert!((lr_at(0, 1000, base, 100) - base * 0.01).abs() < 1e-7);
        assert!((lr_at(49, 1000, base, 100) - base * 0.5).abs() < 1e-7);
        assert_eq!(lr_at(99, 1000, base, 100), base);
        assert_eq!(lr_at(100, 1000, base, 100), base);
        assert_eq!(lr_at(749, 1000, base, 100), base);
        assert!((lr_at(750, 1000, base, 100) - base * 0.2).abs() < 1e-7);
        assert!((lr_at(874, 1000, base, 100) - base * 0.2).abs() < 1e-7);
        assert!((lr_at(875, 1000, base, 100) - base * 0.04).abs() < 1e-7);
        assert!((lr_at(999, 1000, base, 100) - base * 0.04).abs() < 1e-7);
    }

    #[test]
    fn native_scale_materialization_matches_mix_batch() {
        let cfg = MixConfig {
            enabled: true,
            gamma: 1.0,
            p_global: 0.5,
        };
        let view = ImageBatch::new(
            4,
            3,
            8,
            8,
            (0..4 * 3 * 64).map(|v| (v % 97) as f32 / 97.0).collect(),
        )
        .unwrap();
        // Scan seeds so both modes are exercised.
        let mut saw = (false, false);
        for s in 0..8u64 {
            let mut a = ChaCha8Rng::seed_from_u64(s);
            let mut b = a.clone();
            let direct = mix_batch(&view, &cfg, &mut a).unwrap();
            let draw = draw_mixture(&cfg, view.h, view.w, &mut b);
            let via_draw = materialize_mixture(&view, &draw).unwrap();
            assert_eq!(direct.lambda, via_draw.lambda);
            assert_eq!(direct.mode, via_draw.mode);
            assert_eq!(direct.bbox, via_draw.bbox);
            assert_eq!(direct.images.data, via_draw.images.data);
            match direct.mode {
                MixMode::Global => saw.0 = true,
                MixMode::Region => saw.1 = true,
            }
        }
        assert!(saw.0 && saw.1, "seed scan must cover both modes");
    }

    /// With mixing off and loss.mode=original_only, the engine must follow the
    /// plain base method exactly. The oracle below re-runs 10 steps from
    /// scratch using only loss/data primitives (no engine code in the loop)
    /// and the trajectories must agree bitwise.
    #[test]
    fn disabled_mixing_is_bitwise_the_baseline() {
        let mut cfg = tiny_cfg();
        cfg.mix_enabled = false;
        cfg.loss_base = "simclr".into();
        cfg.loss_mode = "original_only".into();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        for step in 0..10 {
            let raw = batch_of(&ds, step * 4, 4);
            train_step(&mut state, &raw).unwrap();
        }

        // Hand-rolled baseline.
        let spec = cfg.encoder_spec().unwrap();
        let mut enc = Encoder::new(&spec, ds.c, cfg.seed).unwrap();
        let mut opt = Optimizer::Adam(Adam::new(cfg.opt_weight_decay));
        let aug = cfg.augment_cfg().unwrap();
        let norm = cfg.normalization().unwrap();
        for step in 0..10usize {
            let raw = batch_of(&ds, step * 4, 4);
            let mut rng = derive_rng(cfg.seed, "augment", step as u64);
            let (v1, v2) = augment_two_views(&raw, &aug, &norm, &mut rng).unwrap();
            let mut g = Graph::new();
            enc.bind(&mut g, true);
            // Same forward order as the engine's SimCLR path: view 2, view 1.
            let z2 = enc.forward_bound(&mut g, &v2, true).unwrap();
            let z1 = enc.forward_bound(&mut g, &v1, true).unwrap();
            let eye = crate::losses::build_distance_matrix(4, 1.0);
            let loss = soft_ce_graph(&mut g, z1, z2, &eye.data, cfg.loss_tau).unwrap();
            g.backward(loss).unwrap();
            let grads = enc.grad_map(&g).unwrap();
            let lr = lr_at(step, state.total_steps, cfg.opt_lr, cfg.opt_warmup_iters);
            opt.step(lr, enc.params.iter_mut(), &grads).unwrap();
        }
        for (a, b) in state.pair.online.params.iter().zip(&enc.params) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {} diverged", a.name);
            }
        }
    }

    #[test]
    fn bank_holds_last_k_keys_in_fifo_order() {
        let mut cfg = tiny_cfg();
        cfg.loss_base = "moco".into();
        cfg.bank_capacity = 16;
        let ds = tiny_data(10);
        let mut state = TrainState::new(&cfg, ds.c, 5).unwrap();
        let mut reference: std::collections::VecDeque<Vec<f32>> = Default::default();
        for step in 0..5 {
            let raw = batch_of(&ds, step * 4, 4);
            let rec = train_step(&mut state, &raw).unwrap();
            assert_eq!(rec.enqueued.len(), 1);
            let keys = &rec.enqueued[0].1.keys;
            for row in 0..keys.n {
                reference.push_back(keys.data[row * keys.d..(row + 1) * keys.d].to_vec());
                if reference.len() > 16 {
                    reference.pop_front();
                }
            }
            let snap = state.banks[0].snapshot();
            assert_eq!(snap.n, reference.len());
            for (row, expect) in reference.iter().enumerate() {
                assert_eq!(&snap.data[row * snap.d..(row + 1) * snap.d], &expect[..]);
            }
        }
        assert_eq!(state.banks[0].len(), 16);
    }

    #[test]
    fn mixed_only_loss_decreases_on_toy_data() {
        let mut cfg = tiny_cfg();
        cfg.loss_base = "simclr".into();
        cfg.loss_mode = "mixed_only".into();
        cfg.opt_lr = 3e-3;
        let ds = tiny_data(16);
        let mut state = TrainState::new(&cfg, ds.c, 8).unwrap();
        let mut totals = Vec::new();
        for step in 0..40 {
            let raw = batch_of(&ds, (step * 4) % ds.n, 4);
            let rec = train_step(&mut state, &raw).unwrap();
            assert_eq!(rec.report.l_ori, 0.0, "mixed_only must not carry L_ori");
            totals.push(rec.report.total);
        }
        let head: f32 = totals[..5].iter().sum::<f32>() / 5.0;
        let tail: f32 = totals[35..].iter().sum::<f32>() / 5.0;
        assert!(
            tail < head,
            "loss should decrease: first-5 avg {head}, last-5 avg {tail}"
        );
    }

    #[test]
    fn single_scale_list_degenerates_to_train_step() {
        let ds = tiny_data(8);
        let cfg_a = tiny_cfg();
        let mut cfg_b = tiny_cfg();
        cfg_b.scales = "16".into();
        let mut a = TrainState::new(&cfg_a, ds.c, 4).unwrap();
        let mut b = TrainState::new(&cfg_b, ds.c, 4).unwrap();
        for step in 0..3 {
            let raw = batch_of(&ds, step * 4, 4);
            let ra = train_step(&mut a, &raw).unwrap();
            let rb = multi_scale_step(&mut b, &raw).unwrap();
            assert!(
                (ra.report.total - rb.report.total).abs() < 1e-6,
                "step {step}: {} vs {}",
                ra.report.total,
                rb.report.total
            );
        }
    }

    /// The multi-scale total must equal the per-scale losses computed in
    /// isolation (fresh graph, fresh identically-seeded encoders) and summed.
    #[test]
    fn multi_scale_total_is_sum_of_isolated_scale_terms() {
        let mut cfg = tiny_cfg();
        cfg.scales = "16,12".into();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        let raw = batch_of(&ds, 0, 4);
        let rec = multi_scale_step(&mut state, &raw).unwrap();

        // Isolated recomputation from primitives.
        let aug = cfg.augment_cfg().unwrap();
        let norm = cfg.normalization().unwrap();
        let mix = cfg.mix_config().unwrap();
        let mut rng = derive_rng(cfg.seed, "augment", 0);
        let (v1, v2) = augment_two_views(&raw, &aug, &norm, &mut rng).unwrap();
        let mut mix_rng = derive_rng(cfg.seed, "mix", 0);
        let draw = draw_mixture(&mix, raw.h, raw.w, &mut mix_rng);
        let spec = cfg.encoder_spec().unwrap();
        let mut sum = 0.0f64;
        for &s in &[16usize, 12] {
            let online = Encoder::new(&spec, ds.c, cfg.seed).unwrap();
            let mut pair = MomentumPair::new(online);
            let mut g = Graph::new();
            pair.online.bind(&mut g, true);
            pair.key.bind(&mut g, false);
            let mut br = EngineBranches {
                online: &mut pair.online,
                key: Some(&mut pair.key),
                predictor: None,
            };
            let v1s = resize_image_batch(&v1, s);
            let v2s = resize_image_batch(&v2, s);
            let m1 = materialize_mixture(&v1s, &draw).unwrap();
            let bank = MemoryBank::new(cfg.bank_capacity, spec.embedding_dim);
            let ctx = LossCtx {
                base: BaseLossKind::Moco,
                tau: cfg.loss_tau,
                bank: Some(&bank),
                moco_symmetric: false,
            };
            let out = compute_loss(
                &mut g,
                &mut br,
                &v1s,
                &v2s,
                Some(&m1),
                None,
                LossMode::Combined,
                &ctx,
            )
            .unwrap();
            sum += out.report.total as f64;
        }
        assert!(
            (rec.report.total as f64 - sum).abs() < 1e-6,
            "multi-scale total {} vs isolated sum {sum}",
            rec.report.total
        );
    }

    #[test]
    fn per_scale_banks_never_cross_contaminate() {
        let mut cfg = tiny_cfg();
        cfg.scales = "16,12".into();
        cfg.bank_capacity = 24;
        let ds = tiny_data(16);
        let mut state = TrainState::new(&cfg, ds.c, 8).unwrap();
        let mut refs: Vec<std::collections::VecDeque<Vec<f32>>> = vec![Default::default(); 2];
        for step in 0..30 {
            let raw = batch_of(&ds, (step * 4) % ds.n, 4);
            let rec = multi_scale_step(&mut state, &raw).unwrap();
            assert_eq!(rec.enqueued.len(), 2);
            for (si, keys) in &rec.enqueued {
                let k = &keys.keys;
                for row in 0..k.n {
                    refs[*si].push_back(k.data[row * k.d..(row + 1) * k.d].to_vec());
                    if refs[*si].len() > 24 {
                        refs[*si].pop_front();
                    }
                }
            }
        }
        for (si, reference) in refs.iter().enumerate() {
            let snap = state.banks[si].snapshot();
            assert_eq!(snap.n, reference.len());
            for (row, expect) in reference.iter().enumerate() {
                assert_eq!(
                    &snap.data[row * snap.d..(row + 1) * snap.d],
                    &expect[..],
                    "bank {si} row {row} does not match its scale's recorded keys"
                );
            }
        }
    }

    #[test]
    fn key_params_follow_the_momentum_recursion_exactly() {
        let cfg = tiny_cfg();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        for step in 0..3 {
            let k_before: Vec<Vec<f32>> =
                state.pair.key.params.iter().map(|p| p.data.clone()).collect();
            let raw = batch_of(&ds, step * 4, 4);
            train_step(&mut state, &raw).unwrap();
            let m = state.pair.momentum;
            for (i, kp) in state.pair.key.params.iter().enumerate() {
                let op = &state.pair.online.params[i];
                for (j, &kv) in kp.data.iter().enumerate() {
                    let expect = m * k_before[i][j] + (1.0 - m) * op.data[j];
                    assert_eq!(
                        kv.to_bits(),
                        expect.to_bits(),
                        "key param {} touched outside momentum_update",
                        kp.name
                    );
                }
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_report() {
        let mut cfg = tiny_cfg();
        cfg.loss_base = "simclr".into();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        // Poison the last projector layer: it sits after every relu (which
        // would launder NaN to zero) so the NaN reaches the loss.
        let p = state
            .pair
            .online
            .params
            .iter_mut()
            .find(|p| p.name == "proj.fc2.w")
            .unwrap();
        p.data[0] = f32::NAN;
        let raw = batch_of(&ds, 0, 4);
        match train_step(&mut state, &raw) {
            Err(Error::NonFiniteLoss { step, report }) => {
                assert_eq!(step, 0);
                assert!(report.total.is_nan());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.umx");
        let cfg = tiny_cfg();
        let ds = tiny_data(8);

        let mut a = TrainState::new(&cfg, ds.c, 4).unwrap();
        for step in 0..3 {
            train_step(&mut a, &batch_of(&ds, step * 4, 4)).unwrap();
        }
        save_checkpoint(&a, &path).unwrap();
        let mut cont: Vec<f32> = Vec::new();
        for step in 3..8 {
            cont.push(train_step(&mut a, &batch_of(&ds, step * 4, 4)).unwrap().report.total);
        }

        let mut b = load_checkpoint(&path).unwrap();
        assert_eq!(b.step, 3);
        let mut resumed: Vec<f32> = Vec::new();
        for step in 3..8 {
            resumed.push(train_step(&mut b, &batch_of(&ds, step * 4, 4)).unwrap().report.total);
        }
        for (x, y) in cont.iter().zip(&resumed) {
            assert_eq!(x.to_bits(), y.to_bits(), "resumed losses {resumed:?} vs {cont:?}");
        }
    }

    #[test]
    fn run_training_is_deterministic_and_evals_on_schedule() {
        let ds = tiny_data(8);
        let eval_index = tiny_data(6);
        let eval_query = make_synthetic(&SyntheticSpec {
            num_classes: 2,
            samples_per_class: 4,
            extent: 16,
            seed: 9,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut cfg = tiny_cfg();
        cfg.max_steps = 5;
        cfg.eval_every = 2;
        cfg.eval_knn_k = 5;

        let run = |tag: &str| {
            let dir = tempfile::tempdir().unwrap();
            let out = run_training(
                &cfg,
                &ds,
                Some((&eval_index, &eval_query)),
                &dir.path().join(tag),
                None,
            )
            .unwrap();
            (std::fs::read_to_string(&out.metrics_path).unwrap(), out, dir)
        };
        let (csv_a, out_a, _keep_a) = run("a");
        let (csv_b, _, _keep_b) = run("b");
        assert_eq!(csv_a, csv_b, "metrics must be byte-identical across runs");
        assert_eq!(out_a.steps, 5);
        assert!(out_a.final_knn.is_some());
        assert!(out_a.checkpoint_path.exists());

        let lines: Vec<&str> = csv_a.trim().lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 6);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 10);
            let step = i + 1;
            let expect_knn = step % 2 == 0 || step == 5;
            assert_eq!(
                !cols[8].is_empty(),
                expect_knn,
                "knn_acc column wrong at step {step}: {line}"
            );
            assert!(cols[9].is_empty(), "wall_ms must be blank without metrics.timing");
        }
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_data(8);
        let mut cfg = tiny_cfg();
        cfg.max_steps = 2;
        let out = run_training(&cfg, &ds, None, dir.path(), None).unwrap();
        let mut other = cfg.clone();
        other.loss_tau = 0.5;
        let err = run_training(&other, &ds, None, dir.path(), Some(&out.checkpoint_path))
            .unwrap_err();
        assert!(err.to_string().contains("resume config mismatch"), "{err}");
    }

    #[test]
    fn oversized_scale_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.scales = "64".into();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        let err = multi_scale_step(&mut state, &batch_of(&ds, 0, 4)).unwrap_err();
        assert!(err.to_string().contains("exceeds source extent"), "{err}");
    }

    #[test]
    fn mixing_needs_at_least_two_images() {
        let cfg = tiny_cfg();
        let ds = tiny_data(8);
        let mut state = TrainState::new(&cfg, ds.c, 4).unwrap();
        let err = train_step(&mut state, &batch_of(&ds, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("batch size >= 2"), "{err}");
    }

    #[test]
    fn metrics_row_format_is_frozen() {
        let rec = StepRecord {
            step: 7,
            epoch: 1,
            report: LossReport {
                l_ori: 1.25,
                l_m_normal: 0.5,
                l_m_reverse: 0.25,
                lambda: 0.625,
                total: 2.0,
            },
            mix_mode: "global",
            wall_ms: None,
            enqueued: Vec::new(),
        };
        assert_eq!(
            format_metrics_row(&rec, None),
            "7,1,1.250000,0.500000,0.250000,0.625000,global,2.000000,,"
        );
        assert_eq!(
            format_metrics_row(&rec, Some(0.5)),
            "7,1,1.250000,0.500000,0.250000,0.625000,global,2.000000,0.500000,"
        );
    }

    #[test]
    fn mode_without_mixture_is_rejected_at_construction() {
        let mut cfg = tiny_cfg();
        cfg.mix_enabled = false;
        cfg.loss_mode = "combined".into();
        let err = match TrainState::new(&cfg, 3, 4) {
            Err(e) => e,
            Ok(_) => panic!("combined mode without mixing must be rejected"),
        };
        assert!(err.to_string().contains("mix.enabled"), "{err}");
    }
}

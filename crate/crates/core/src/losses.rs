//! Loss assembly: base contrastive/distance losses, the softened positive-pair
//! distance matrix, and the composed mixture objectives.
//!
//! The single-branch objective is
//! `L = L_ori + λ·L_m(normal order) + (1−λ)·L_m(reverse order)`,
//! where the reverse-order term reuses the mixed embeddings through the flip
//! permutation — no extra encoder pass. The both-branch variant mixes both
//! views and adds one unweighted `L_m(m1, m2)` term instead.

use std::str::FromStr;

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::mixer::{flip_indices, MixedBatch};
use crate::tensor::{Graph, TensorId};
use crate::types::{EmbeddingBatch, ImageBatch, KeySource, TaggedKeys};

/// Which base self-supervised method the mixture terms compose with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLossKind {
    /// In-batch InfoNCE: the other view's embeddings are keys, gradients flow
    /// through both branches.
    Simclr,
    /// Momentum encoder keys plus a memory bank of past negatives; keys are
    /// gradient-detached.
    Moco,
    /// Positive-only distance loss with an online predictor and stop-gradient
    /// targets.
    Byol,
}

impl BaseLossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaseLossKind::Simclr => "simclr",
            BaseLossKind::Moco => "moco",
            BaseLossKind::Byol => "byol",
        }
    }
}

impl FromStr for BaseLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(BaseLossKind::Simclr),
            "moco" => Ok(BaseLossKind::Moco),
            "byol" => Ok(BaseLossKind::Byol),
            other => Err(Error::Config(format!(
                "loss.base must be simclr|moco|byol, got {other}"
            ))),
        }
    }
}

/// Which terms enter the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    OriginalOnly,
    MixedOnly,
    Combined,
    BothBranch,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::OriginalOnly => "original_only",
            LossMode::MixedOnly => "mixed_only",
            LossMode::Combined => "combined",
            LossMode::BothBranch => "both_branch",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original_only" => Ok(LossMode::OriginalOnly),
            "mixed_only" => Ok(LossMode::MixedOnly),
            "combined" => Ok(LossMode::Combined),
            "both_branch" => Ok(LossMode::BothBranch),
            other => Err(Error::Config(format!(
                "loss.mode must be original_only|mixed_only|combined|both_branch, got {other}"
            ))),
        }
    }
}

/// InfoNCE temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub tau: f32,
}

impl Temperature {
    pub fn new(tau: f32) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {tau}")));
        }
        Ok(Self { tau })
    }
}

/// Decomposed loss terms for logging and tests. Fields hold the values of the
/// terms actually included in `total` (zero when a term is absent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_ori: f32,
    pub l_m_normal: f32,
    pub l_m_reverse: f32,
    pub lambda: f32,
    pub total: f32,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.l_ori.is_finite()
            && self.l_m_normal.is_finite()
            && self.l_m_reverse.is_finite()
            && self.lambda.is_finite()
            && self.total.is_finite()
    }
}

/// Softened positive-pair targets: row `i` carries λ at column `i` and 1−λ at
/// column `N−1−i`; negatives keep target 0. The self-paired middle row of an
/// odd batch collapses to a single 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub lambda: f32,
    pub data: Vec<f32>,
}

pub fn build_distance_matrix(n: usize, lambda: f32) -> DistanceMatrix {
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        let j = n - 1 - i;
        if i == j {
            data[i * n + i] = 1.0;
        } else {
            data[i * n + i] = lambda;
            data[i * n + j] = 1.0 - lambda;
        }
    }
    DistanceMatrix { n, lambda, data }
}

fn check_unit_rows(g: &Graph, id: TensorId, op: &'static str) -> Result<()> {
    let shape = g.shape(id);
    let (n, d) = (shape[0], shape[1]);
    let data = g.data(id);
    for i in 0..n {
        let norm = data[i * d..(i + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::NotUnitNorm { op, row: i, norm });
        }
    }
    Ok(())
}

/// Soft-target cross-entropy over in-batch similarities:
/// `−(1/N)·Σ_ij targets[i,j]·log_softmax(q·keysᵀ/τ)[i,j]`.
/// `targets` is row-major N×K with rows summing to 1.
pub fn soft_ce_graph(
    g: &mut Graph,
    q: TensorId,
    keys: TensorId,
    targets: &[f32],
    tau: f32,
) -> Result<TensorId> {
    check_unit_rows(g, q, "soft_ce")?;
    check_unit_rows(g, keys, "soft_ce")?;
    let n = g.shape(q)[0];
    let k = g.shape(keys)[0];
    if targets.len() != n * k {
        return Err(Error::ShapeMismatch {
            op: "soft_ce",
            lhs: vec![n, k],
            rhs: vec![targets.len()],
        });
    }
    let logits = g.matmul_nt(q, keys)?;
    let scaled = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(scaled)?;
    let mask = g.constant(&[n, k], targets.to_vec());
    let weighted = g.mul(logp, mask)?;
    let summed = g.sum_all(weighted);
    Ok(g.scale(summed, -1.0 / n as f32))
}

/// InfoNCE with per-row positives and a shared negative set:
/// `mean_i −log( e^{q_i·k_i/τ} / (e^{q_i·k_i/τ} + Σ_j e^{q_i·neg_j/τ}) )`.
/// With no negatives the softmax has a single logit and the loss is exactly 0.
pub fn info_nce_graph(
    g: &mut Graph,
    q: TensorId,
    k_pos: TensorId,
    negatives: Option<TensorId>,
    tau: f32,
) -> Result<TensorId> {
    check_unit_rows(g, q, "info_nce")?;
    check_unit_rows(g, k_pos, "info_nce")?;
    if g.shape(q) != g.shape(k_pos) {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k_pos).to_vec(),
        });
    }
    let n = g.shape(q)[0];
    let pos = g.rowwise_dot(q, k_pos)?;
    let logits = match negatives {
        Some(neg) => {
            check_unit_rows(g, neg, "info_nce")?;
            let neg_logits = g.matmul_nt(q, neg)?;
            g.concat_cols(pos, neg_logits)?
        }
        None => pos,
    };
    let scaled = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(scaled)?;
    let width = g.shape(logp)[1];
    let mut mask = vec![0.0f32; n * width];
    for i in 0..n {
        mask[i * width] = 1.0;
    }
    let maskid = g.constant(&[n, width], mask);
    let picked = g.mul(logp, maskid)?;
    let summed = g.sum_all(picked);
    Ok(g.scale(summed, -1.0 / n as f32))
}

/// Positive-only distance: `mean_i (2 − 2·q_i·k_i)` = mean squared Euclidean
/// distance between unit vectors.
pub fn distance_loss_graph(g: &mut Graph, q: TensorId, k: TensorId) -> Result<TensorId> {
    check_unit_rows(g, q, "distance_loss")?;
    check_unit_rows(g, k, "distance_loss")?;
    if g.shape(q) != g.shape(k) {
        return Err(Error::ShapeMismatch {
            op: "distance_loss",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    let n = g.shape(q)[0];
    let dots = g.rowwise_dot(q, k)?;
    let s = g.sum_all(dots);
    let scaled = g.scale(s, -2.0 / n as f32);
    Ok(g.add_scalar(scaled, 2.0))
}

/// Value-level InfoNCE on embedding batches (no gradients).
pub fn info_nce(
    q: &EmbeddingBatch,
    k_pos: &EmbeddingBatch,
    negatives: &EmbeddingBatch,
    tau: f32,
) -> Result<f32> {
    let mut g = Graph::new();
    let qid = g.constant(&[q.n, q.d], q.data.clone());
    let kid = g.constant(&[k_pos.n, k_pos.d], k_pos.data.clone());
    let negid = if negatives.n == 0 {
        None
    } else {
        Some(g.constant(&[negatives.n, negatives.d], negatives.data.clone()))
    };
    let loss = info_nce_graph(&mut g, qid, kid, negid, tau)?;
    Ok(g.value(loss))
}

/// Value-level positive-pair distance on embedding batches (no gradients).
pub fn distance_loss(q: &EmbeddingBatch, k: &EmbeddingBatch) -> Result<f32> {
    let mut g = Graph::new();
    let qid = g.constant(&[q.n, q.d], q.data.clone());
    let kid = g.constant(&[k.n, k.d], k.data.clone());
    let loss = distance_loss_graph(&mut g, qid, kid)?;
    Ok(g.value(loss))
}

/// The encoder surface loss assembly needs. `online` carries gradients;
/// `online_predicted` additionally applies the BYOL predictor head; `key` is
/// the gradient-free key branch (momentum copy where one exists, detached
/// online otherwise). All three return N×D unit-norm rows.
pub trait Branches {
    fn online(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId>;
    fn online_predicted(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId>;
    fn key(&mut self, g: &mut Graph, x: &ImageBatch) -> Result<TensorId>;
}

/// Everything the composed losses need besides the images.
pub struct LossCtx<'a> {
    pub base: BaseLossKind,
    pub tau: f32,
    pub bank: Option<&'a MemoryBank>,
    /// MoCo only: both views act as queries, losses averaged.
    pub moco_symmetric: bool,
}

/// A composed loss ready for backward: the scalar node, its decomposition,
/// and (MoCo) the detached unmixed keys destined for the bank.
pub struct LossOutput {
    pub total: TensorId,
    pub report: LossReport,
    pub keys_for_bank: Option<TaggedKeys>,
}

struct BaseParts {
    l_ori: Option<TensorId>,
    /// Keys the mixed queries pair against (view-2 embeddings of the
    /// appropriate branch).
    keys: TensorId,
    negatives: Option<TensorId>,
    keys_for_bank: Option<TaggedKeys>,
}

fn embedding_of(g: &Graph, id: TensorId) -> EmbeddingBatch {
    let shape = g.shape(id);
    EmbeddingBatch {
        data: g.data(id).to_vec(),
        n: shape[0],
        d: shape[1],
    }
}

fn bank_negatives(g: &mut Graph, ctx: &LossCtx) -> Option<TensorId> {
    ctx.bank.filter(|b| !b.is_empty()).map(|b| {
        let snap = b.snapshot();
        g.constant(&[snap.n, snap.d], snap.data)
    })
}

fn base_parts(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    ctx: &LossCtx,
    need_original: bool,
) -> Result<BaseParts> {
    match ctx.base {
        BaseLossKind::Simclr => {
            let z2 = br.online(g, view2)?;
            let l_ori = if need_original {
                let z1 = br.online(g, view1)?;
                let id_targets = build_distance_matrix(view1.n, 1.0);
                Some(soft_ce_graph(g, z1, z2, &id_targets.data, ctx.tau)?)
            } else {
                None
            };
            Ok(BaseParts {
                l_ori,
                keys: z2,
                negatives: None,
                keys_for_bank: None,
            })
        }
        BaseLossKind::Moco => {
            let k2 = br.key(g, view2)?;
            let negatives = bank_negatives(g, ctx);
            let l_ori = if need_original {
                let q1 = br.online(g, view1)?;
                let forward = info_nce_graph(g, q1, k2, negatives, ctx.tau)?;
                if ctx.moco_symmetric {
                    let q2 = br.online(g, view2)?;
                    let k1 = br.key(g, view1)?;
                    let backward = info_nce_graph(g, q2, k1, negatives, ctx.tau)?;
                    let s = g.add(forward, backward)?;
                    Some(g.scale(s, 0.5))
                } else {
                    Some(forward)
                }
            } else {
                None
            };
            Ok(BaseParts {
                l_ori,
                keys: k2,
                negatives,
                keys_for_bank: Some(TaggedKeys {
                    keys: embedding_of(g, k2),
                    source: KeySource::Unmixed,
                }),
            })
        }
        BaseLossKind::Byol => {
            let t2 = br.key(g, view2)?;
            let l_ori = if need_original {
                let p1 = br.online_predicted(g, view1)?;
                let p2 = br.online_predicted(g, view2)?;
                let t1 = br.key(g, view1)?;
                let fwd = distance_loss_graph(g, p1, t2)?;
                let bwd = distance_loss_graph(g, p2, t1)?;
                let s = g.add(fwd, bwd)?;
                Some(g.scale(s, 0.5))
            } else {
                None
            };
            Ok(BaseParts {
                l_ori,
                keys: t2,
                negatives: None,
                keys_for_bank: None,
            })
        }
    }
}

fn embed_query(
    g: &mut Graph,
    br: &mut dyn Branches,
    images: &ImageBatch,
    ctx: &LossCtx,
) -> Result<TensorId> {
    match ctx.base {
        BaseLossKind::Simclr | BaseLossKind::Moco => br.online(g, images),
        BaseLossKind::Byol => br.online_predicted(g, images),
    }
}

fn mixed_term(g: &mut Graph, zq: TensorId, parts: &BaseParts, ctx: &LossCtx) -> Result<TensorId> {
    match ctx.base {
        BaseLossKind::Simclr => {
            let n = g.shape(zq)[0];
            let id_targets = build_distance_matrix(n, 1.0);
            soft_ce_graph(g, zq, parts.keys, &id_targets.data, ctx.tau)
        }
        BaseLossKind::Moco => info_nce_graph(g, zq, parts.keys, parts.negatives, ctx.tau),
        BaseLossKind::Byol => distance_loss_graph(g, zq, parts.keys),
    }
}

/// Baseline objective only: `total = L_ori`.
pub fn original_loss(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    ctx: &LossCtx,
) -> Result<LossOutput> {
    let parts = base_parts(g, br, view1, view2, ctx, true)?;
    let total = parts.l_ori.expect("original term requested");
    let l_ori = g.value(total);
    Ok(LossOutput {
        total,
        report: LossReport {
            l_ori,
            l_m_normal: 0.0,
            l_m_reverse: 0.0,
            lambda: 0.0,
            total: l_ori,
        },
        keys_for_bank: parts.keys_for_bank,
    })
}

/// Single-branch composition:
/// `total = L_ori + λ·L_m(normal) + (1−λ)·L_m(reverse)`. The mixed batch is
/// embedded once; the reverse term reuses those rows via the flip permutation.
pub fn unmix_loss_single(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    mixed: &MixedBatch,
    ctx: &LossCtx,
) -> Result<LossOutput> {
    let parts = base_parts(g, br, view1, view2, ctx, true)?;
    let l_ori_id = parts.l_ori.expect("original term requested");
    let (lm_n, lm_r) = mixture_pair(g, br, mixed, &parts, ctx)?;
    let lambda = mixed.lambda;
    let wn = g.scale(lm_n, lambda);
    let wr = g.scale(lm_r, 1.0 - lambda);
    let partial = g.add(l_ori_id, wn)?;
    let total = g.add(partial, wr)?;
    Ok(LossOutput {
        total,
        report: LossReport {
            l_ori: g.value(l_ori_id),
            l_m_normal: g.value(lm_n),
            l_m_reverse: g.value(lm_r),
            lambda,
            total: g.value(total),
        },
        keys_for_bank: parts.keys_for_bank,
    })
}

/// Mixture terms only (the original-pair term is omitted from the objective):
/// `total = λ·L_m(normal) + (1−λ)·L_m(reverse)`.
pub fn mixed_only_loss(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    mixed: &MixedBatch,
    ctx: &LossCtx,
) -> Result<LossOutput> {
    let parts = base_parts(g, br, view1, view2, ctx, false)?;
    let (lm_n, lm_r) = mixture_pair(g, br, mixed, &parts, ctx)?;
    let lambda = mixed.lambda;
    let wn = g.scale(lm_n, lambda);
    let wr = g.scale(lm_r, 1.0 - lambda);
    let total = g.add(wn, wr)?;
    Ok(LossOutput {
        total,
        report: LossReport {
            l_ori: 0.0,
            l_m_normal: g.value(lm_n),
            l_m_reverse: g.value(lm_r),
            lambda,
            total: g.value(total),
        },
        keys_for_bank: parts.keys_for_bank,
    })
}

fn mixture_pair(
    g: &mut Graph,
    br: &mut dyn Branches,
    mixed: &MixedBatch,
    parts: &BaseParts,
    ctx: &LossCtx,
) -> Result<(TensorId, TensorId)> {
    let zm = embed_query(g, br, &mixed.images, ctx)?;
    let flip = flip_indices(mixed.images.n);
    let zm_rev = g.gather_rows(zm, &flip)?;
    let lm_n = mixed_term(g, zm, parts, ctx)?;
    let lm_r = mixed_term(g, zm_rev, parts, ctx)?;
    Ok((lm_n, lm_r))
}

/// Both-branch composition (both views mixed): `total = L_ori + L_m(m1, m2)`.
/// λ is recorded but deliberately not used as a weight.
pub fn unmix_loss_both(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    mixed1: &MixedBatch,
    mixed2: &MixedBatch,
    ctx: &LossCtx,
) -> Result<LossOutput> {
    if mixed1.lambda != mixed2.lambda || mixed1.mode != mixed2.mode {
        return Err(Error::invalid(
            "unmix_loss_both",
            format!(
                "mixture metadata mismatch: λ {} vs {}, mode {:?} vs {:?}",
                mixed1.lambda, mixed2.lambda, mixed1.mode, mixed2.mode
            ),
        ));
    }
    let parts = base_parts(g, br, view1, view2, ctx, true)?;
    let l_ori_id = parts.l_ori.expect("original term requested");
    let l_m = match ctx.base {
        BaseLossKind::Simclr => {
            let zm1 = br.online(g, &mixed1.images)?;
            let zm2 = br.online(g, &mixed2.images)?;
            let n = mixed1.images.n;
            let id_targets = build_distance_matrix(n, 1.0);
            soft_ce_graph(g, zm1, zm2, &id_targets.data, ctx.tau)?
        }
        BaseLossKind::Moco => {
            let zm1 = br.online(g, &mixed1.images)?;
            let km2 = br.key(g, &mixed2.images)?;
            info_nce_graph(g, zm1, km2, parts.negatives, ctx.tau)?
        }
        BaseLossKind::Byol => {
            let pm1 = br.online_predicted(g, &mixed1.images)?;
            let tm2 = br.key(g, &mixed2.images)?;
            distance_loss_graph(g, pm1, tm2)?
        }
    };
    let total = g.add(l_ori_id, l_m)?;
    Ok(LossOutput {
        total,
        report: LossReport {
            l_ori: g.value(l_ori_id),
            l_m_normal: g.value(l_m),
            l_m_reverse: 0.0,
            lambda: mixed1.lambda,
            total: g.value(total),
        },
        keys_for_bank: parts.keys_for_bank,
    })
}

/// Mode dispatch used by the training engine.
pub fn compute_loss(
    g: &mut Graph,
    br: &mut dyn Branches,
    view1: &ImageBatch,
    view2: &ImageBatch,
    mixed: Option<&MixedBatch>,
    mixed2: Option<&MixedBatch>,
    mode: LossMode,
    ctx: &LossCtx,
) -> Result<LossOutput> {
    fn need(m: Option<&MixedBatch>, mode: LossMode) -> Result<&MixedBatch> {
        m.ok_or_else(|| {
            Error::invalid(
                "compute_loss",
                format!("{} needs a mixed batch", mode.as_str()),
            )
        })
    }
    match mode {
        LossMode::OriginalOnly => original_loss(g, br, view1, view2, ctx),
        LossMode::Combined => unmix_loss_single(g, br, view1, view2, need(mixed, mode)?, ctx),
        LossMode::MixedOnly => mixed_only_loss(g, br, view1, view2, need(mixed, mode)?, ctx),
        LossMode::BothBranch => unmix_loss_both(
            g,
            br,
            view1,
            view2,
            need(mixed, mode)?,
            need(mixed2, mode)?,
            ctx,
        ),
    }
}

//! In-batch self-mixture: each image blends with its flip partner `N−1−i`,
//! either globally (convex pixel blend) or within a random rectangle (box
//! paste). One mode and one λ are drawn per mini-batch; region mode corrects
//! λ to the unreplaced-area fraction after clipping.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::types::{EmbeddingBatch, ImageBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub enabled: bool,
    /// Beta-distribution shape for λ; 1.0 makes the draw uniform on [0,1].
    pub gamma: f32,
    /// Probability of choosing the global (blend) mode over region (paste).
    pub p_global: f32,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: 1.0,
            p_global: 0.5,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "mix.gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.p_global) {
            return Err(Error::Config(format!(
                "mix.p_global must be in [0,1], got {}",
                self.p_global
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Global,
    Region,
}

impl MixMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixMode::Global => "global",
            MixMode::Region => "region",
        }
    }
}

/// A mixed view plus the metadata that binds input space to loss space.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub images: ImageBatch,
    /// Mix ratio. In region mode this is the area-corrected value
    /// `1 − box_area/(H·W)`, not the raw Beta draw.
    pub lambda: f32,
    pub mode: MixMode,
    /// `(x1, y1, x2, y2)` pixel bounds, half-open, present iff region mode.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

impl MixedBatch {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(
                "MixedBatch",
                format!("lambda {} outside [0,1]", self.lambda),
            ));
        }
        match (self.mode, self.bbox) {
            (MixMode::Global, None) => Ok(()),
            (MixMode::Global, Some(_)) => {
                Err(Error::invalid("MixedBatch", "global mode must not carry a box"))
            }
            (MixMode::Region, None) => {
                Err(Error::invalid("MixedBatch", "region mode requires a box"))
            }
            (MixMode::Region, Some((x1, y1, x2, y2))) => {
                let (h, w) = (self.images.h, self.images.w);
                if x1 > x2 || y1 > y2 || x2 > w || y2 > h {
                    return Err(Error::invalid(
                        "MixedBatch",
                        format!("box ({x1},{y1},{x2},{y2}) outside {w}x{h}"),
                    ));
                }
                let area = (x2 - x1) * (y2 - y1);
                let expect = 1.0f32 - area as f32 / (h * w) as f32;
                if self.lambda != expect {
                    return Err(Error::invalid(
                        "MixedBatch",
                        format!("lambda {} != area-corrected {expect}", self.lambda),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// The self-pairing permutation `i ↦ N−1−i` (an involution).
pub fn flip_indices(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

/// Draw λ from Beta(γ, γ). γ=1 degenerates to Uniform[0,1].
pub fn sample_lambda(gamma: f32, rng: &mut impl Rng) -> f32 {
    let beta = Beta::new(gamma as f64, gamma as f64).expect("gamma validated at config load");
    beta.sample(rng) as f32
}

/// Pick the mixture mode for a whole mini-batch.
pub fn choose_mode(p_global: f32, rng: &mut impl Rng) -> MixMode {
    if rng.gen::<f64>() < p_global as f64 {
        MixMode::Global
    } else {
        MixMode::Region
    }
}

/// Random box of nominal side fractions √(1−λ_raw), centered at a uniform
/// pixel and clipped to the image. Callers must recompute λ from the clipped
/// area.
pub fn rand_bbox(
    h: usize,
    w: usize,
    lambda_raw: f32,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let cut = (1.0 - lambda_raw as f64).max(0.0).sqrt();
    let cut_w = (w as f64 * cut) as usize;
    let cut_h = (h as f64 * cut) as usize;
    let cx = rng.gen_range(0..w);
    let cy = rng.gen_range(0..h);
    let x1 = cx.saturating_sub(cut_w / 2);
    let y1 = cy.saturating_sub(cut_h / 2);
    let x2 = (x1 + cut_w).min(w);
    let y2 = (y1 + cut_h).min(h);
    (x1, y1, x2, y2)
}

/// Pixel blend: `out[i] = λ·view[i] + (1−λ)·view[N−1−i]`.
pub fn apply_global(view: &ImageBatch, lambda: f32) -> ImageBatch {
    let stride = view.c * view.h * view.w;
    let mut out = ImageBatch::zeros(view.n, view.c, view.h, view.w);
    for i in 0..view.n {
        let j = view.n - 1 - i;
        let a = &view.data[i * stride..(i + 1) * stride];
        let b = &view.data[j * stride..(j + 1) * stride];
        let dst = &mut out.data[i * stride..(i + 1) * stride];
        for p in 0..stride {
            dst[p] = lambda * a[p] + (1.0 - lambda) * b[p];
        }
    }
    out
}

/// Box paste: `out[i]` is `view[i]` with the box region taken from
/// `view[N−1−i]`.
pub fn apply_region(view: &ImageBatch, bbox: (usize, usize, usize, usize)) -> ImageBatch {
    let (x1, y1, x2, y2) = bbox;
    let mut out = view.clone();
    for i in 0..view.n {
        let j = view.n - 1 - i;
        for ch in 0..view.c {
            for y in y1..y2 {
                for x in x1..x2 {
                    *out.at_mut(i, ch, y, x) = view.at(j, ch, y, x);
                }
            }
        }
    }
    out
}

/// One full mixture draw: mode, λ (with region-area correction), images.
pub fn mix_batch(view: &ImageBatch, cfg: &MixConfig, rng: &mut impl Rng) -> Result<MixedBatch> {
    if view.n < 2 {
        return Err(Error::invalid(
            "mix_batch",
            format!("self-pairing needs batch size >= 2, got {}", view.n),
        ));
    }
    let mode = choose_mode(cfg.p_global, rng);
    let lambda_raw = sample_lambda(cfg.gamma, rng);
    match mode {
        MixMode::Global => Ok(MixedBatch {
            images: apply_global(view, lambda_raw),
            lambda: lambda_raw,
            mode,
            bbox: None,
        }),
        MixMode::Region => {
            let bbox = rand_bbox(view.h, view.w, lambda_raw, rng);
            let (x1, y1, x2, y2) = bbox;
            let area = (x2 - x1) * (y2 - y1);
            let lambda = 1.0f32 - area as f32 / (view.h * view.w) as f32;
            Ok(MixedBatch {
                images: apply_region(view, bbox),
                lambda,
                mode,
                bbox: Some(bbox),
            })
        }
    }
}

/// Batch-axis reversal, the "reverse order" of Eq. 5.
pub trait ReverseBatch {
    fn reverse_batch(&self) -> Self;
}

impl ReverseBatch for ImageBatch {
    fn reverse_batch(&self) -> Self {
        self.reversed()
    }
}

impl ReverseBatch for EmbeddingBatch {
    fn reverse_batch(&self) -> Self {
        self.reversed()
    }
}

pub fn reverse_batch<T: ReverseBatch>(b: &T) -> T {
    b.reverse_batch()
}

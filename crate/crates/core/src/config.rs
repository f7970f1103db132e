//! Flat dotted-key run configuration: `key = value` lines, `#` comments,
//! typed fields with defaults, unknown keys rejected, `--override key=value`
//! applied on top. The resolved form is canonical (sorted, fully
//! materialized) and hashes stably for provenance.

use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentCfg, Normalization, SyntheticSpec};
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::losses::{BaseLossKind, LossMode};
use crate::mixer::MixConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Hard cap on total optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub output_dir: String,
    /// Run the kNN monitor every this many steps; 0 disables it.
    pub eval_every: usize,

    pub mix_enabled: bool,
    pub mix_gamma: f64,
    pub mix_p_global: f64,

    pub loss_base: String,
    pub loss_tau: f32,
    pub loss_mode: String,
    pub loss_moco_symmetric: bool,

    pub encoder_stages: String,
    pub encoder_embedding_dim: usize,
    pub encoder_proj_hidden_dim: usize,
    pub encoder_momentum: f32,

    pub bank_capacity: usize,
    /// Comma-separated square extents for multi-scale training; empty means
    /// single-scale at the dataset's native extent.
    pub scales: String,

    pub opt_kind: String,
    pub opt_lr: f32,
    pub opt_weight_decay: f32,
    pub opt_momentum: f32,
    pub opt_warmup_iters: usize,

    pub augment_crop_pad: usize,
    pub augment_flip_p: f64,
    pub augment_gray_p: f64,

    pub data_dataset: String,
    pub data_dir: String,
    pub data_subset: usize,
    pub data_synthetic_classes: usize,
    pub data_synthetic_per_class: usize,
    pub data_synthetic_extent: usize,
    pub data_synthetic_sigma: f32,

    pub norm_mean: String,
    pub norm_std: String,

    /// When false, the wall_ms metrics column is left blank so repeated runs
    /// produce byte-identical CSVs.
    pub metrics_timing: bool,

    pub eval_knn_k: usize,
    pub eval_knn_tau: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            max_steps: 0,
            batch_size: 128,
            output_dir: "runs/run".into(),
            eval_every: 100,
            mix_enabled: true,
            mix_gamma: 1.0,
            mix_p_global: 0.5,
            loss_base: "moco".into(),
            loss_tau: 0.2,
            loss_mode: "combined".into(),
            loss_moco_symmetric: false,
            encoder_stages: "32:2,64:2,128:2,128:2".into(),
            encoder_embedding_dim: 64,
            encoder_proj_hidden_dim: 1024,
            encoder_momentum: 0.99,
            bank_capacity: 4096,
            scales: String::new(),
            opt_kind: "adam".into(),
            opt_lr: 1e-3,
            opt_weight_decay: 1e-4,
            opt_momentum: 0.9,
            opt_warmup_iters: 100,
            augment_crop_pad: 4,
            augment_flip_p: 0.5,
            augment_gray_p: 0.2,
            data_dataset: "synthetic".into(),
            data_dir: String::new(),
            data_subset: 0,
            data_synthetic_classes: 4,
            data_synthetic_per_class: 500,
            data_synthetic_extent: 32,
            data_synthetic_sigma: 0.1,
            norm_mean: "0.4914,0.4822,0.4465".into(),
            norm_std: "0.2470,0.2435,0.2616".into(),
            metrics_timing: false,
            eval_knn_k: 200,
            eval_knn_tau: 0.1,
        }
    }
}

/// All keys in resolved-echo order. Kept in one place so `set`, `get`, and
/// `resolved` can never drift apart.
pub const KEYS: &[&str] = &[
    "augment.crop_pad",
    "augment.flip_p",
    "augment.gray_p",
    "bank.capacity",
    "batch_size",
    "data.dataset",
    "data.dir",
    "data.subset",
    "data.synthetic.classes",
    "data.synthetic.extent",
    "data.synthetic.per_class",
    "data.synthetic.sigma",
    "encoder.embedding_dim",
    "encoder.momentum",
    "encoder.proj_hidden_dim",
    "encoder.stages",
    "epochs",
    "eval.knn_k",
    "eval.knn_tau",
    "eval_every",
    "loss.base",
    "loss.mode",
    "loss.moco_symmetric",
    "loss.tau",
    "max_steps",
    "metrics.timing",
    "mix.enabled",
    "mix.gamma",
    "mix.p_global",
    "norm.mean",
    "norm.std",
    "opt.kind",
    "opt.lr",
    "opt.momentum",
    "opt.warmup_iters",
    "opt.weight_decay",
    "output_dir",
    "scales",
    "seed",
];

fn parse_as<T: FromStr>(key: &str, value: &str, at: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!(
            "{at}: key '{key}' has unparsable value '{value}'"
        ))
    })
}

fn parse_bool(key: &str, value: &str, at: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{at}: key '{key}' expects true|false, got '{value}'"
        ))),
    }
}

impl RunConfig {
    /// Set one key from its string form. `at` names the source (file:line or
    /// "--override") for diagnostics.
    pub fn set(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_as(key, v, at)?,
            "epochs" => self.epochs = parse_as(key, v, at)?,
            "max_steps" => self.max_steps = parse_as(key, v, at)?,
            "batch_size" => self.batch_size = parse_as(key, v, at)?,
            "output_dir" => self.output_dir = v.to_string(),
            "eval_every" => self.eval_every = parse_as(key, v, at)?,
            "mix.enabled" => self.mix_enabled = parse_bool(key, v, at)?,
            "mix.gamma" => self.mix_gamma = parse_as(key, v, at)?,
            "mix.p_global" => self.mix_p_global = parse_as(key, v, at)?,
            "loss.base" => self.loss_base = v.to_string(),
            "loss.tau" => self.loss_tau = parse_as(key, v, at)?,
            "loss.mode" => self.loss_mode = v.to_string(),
            "loss.moco_symmetric" => self.loss_moco_symmetric = parse_bool(key, v, at)?,
            "encoder.stages" => self.encoder_stages = v.to_string(),
            "encoder.embedding_dim" => self.encoder_embedding_dim = parse_as(key, v, at)?,
            "encoder.proj_hidden_dim" => self.encoder_proj_hidden_dim = parse_as(key, v, at)?,
            "encoder.momentum" => self.encoder_momentum = parse_as(key, v, at)?,
            "bank.capacity" => self.bank_capacity = parse_as(key, v, at)?,
            "scales" => self.scales = v.to_string(),
            "opt.kind" => self.opt_kind = v.to_string(),
            "opt.lr" => self.opt_lr = parse_as(key, v, at)?,
            "opt.weight_decay" => self.opt_weight_decay = parse_as(key, v, at)?,
            "opt.momentum" => self.opt_momentum = parse_as(key, v, at)?,
            "opt.warmup_iters" => self.opt_warmup_iters = parse_as(key, v, at)?,
            "augment.crop_pad" => self.augment_crop_pad = parse_as(key, v, at)?,
            "augment.flip_p" => self.augment_flip_p = parse_as(key, v, at)?,
            "augment.gray_p" => self.augment_gray_p = parse_as(key, v, at)?,
            "data.dataset" => self.data_dataset = v.to_string(),
            "data.dir" => self.data_dir = v.to_string(),
            "data.subset" => self.data_subset = parse_as(key, v, at)?,
            "data.synthetic.classes" => self.data_synthetic_classes = parse_as(key, v, at)?,
            "data.synthetic.per_class" => self.data_synthetic_per_class = parse_as(key, v, at)?,
            "data.synthetic.extent" => self.data_synthetic_extent = parse_as(key, v, at)?,
            "data.synthetic.sigma" => self.data_synthetic_sigma = parse_as(key, v, at)?,
            "norm.mean" => self.norm_mean = v.to_string(),
            "norm.std" => self.norm_std = v.to_string(),
            "metrics.timing" => self.metrics_timing = parse_bool(key, v, at)?,
            "eval.knn_k" => self.eval_knn_k = parse_as(key, v, at)?,
            "eval.knn_tau" => self.eval_knn_tau = parse_as(key, v, at)?,
            _ => {
                return Err(Error::Config(format!("{at}: unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "output_dir" => self.output_dir.clone(),
            "eval_every" => self.eval_every.to_string(),
            "mix.enabled" => self.mix_enabled.to_string(),
            "mix.gamma" => self.mix_gamma.to_string(),
            "mix.p_global" => self.mix_p_global.to_string(),
            "loss.base" => self.loss_base.clone(),
            "loss.tau" => self.loss_tau.to_string(),
            "loss.mode" => self.loss_mode.clone(),
            "loss.moco_symmetric" => self.loss_moco_symmetric.to_string(),
            "encoder.stages" => self.encoder_stages.clone(),
            "encoder.embedding_dim" => self.encoder_embedding_dim.to_string(),
            "encoder.proj_hidden_dim" => self.encoder_proj_hidden_dim.to_string(),
            "encoder.momentum" => self.encoder_momentum.to_string(),
            "bank.capacity" => self.bank_capacity.to_string(),
            "scales" => self.scales.clone(),
            "opt.kind" => self.opt_kind.clone(),
            "opt.lr" => self.opt_lr.to_string(),
            "opt.weight_decay" => self.opt_weight_decay.to_string(),
            "opt.momentum" => self.opt_momentum.to_string(),
            "opt.warmup_iters" => self.opt_warmup_iters.to_string(),
            "augment.crop_pad" => self.augment_crop_pad.to_string(),
            "augment.flip_p" => self.augment_flip_p.to_string(),
            "augment.gray_p" => self.augment_gray_p.to_string(),
            "data.dataset" => self.data_dataset.clone(),
            "data.dir" => self.data_dir.clone(),
            "data.subset" => self.data_subset.to_string(),
            "data.synthetic.classes" => self.data_synthetic_classes.to_string(),
            "data.synthetic.per_class" => self.data_synthetic_per_class.to_string(),
            "data.synthetic.extent" => self.data_synthetic_extent.to_string(),
            "data.synthetic.sigma" => self.data_synthetic_sigma.to_string(),
            "norm.mean" => self.norm_mean.clone(),
            "norm.std" => self.norm_std.clone(),
            "metrics.timing" => self.metrics_timing.to_string(),
            "eval.knn_k" => self.eval_knn_k.to_string(),
            "eval.knn_tau" => self.eval_knn_tau.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parse file text on top of defaults. Duplicate keys within one source
    /// are rejected (they are almost always an editing mistake).
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{source}:{}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{at}: expected 'key = value'")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{at}: duplicate key '{key}'")));
            }
            cfg.set(key, value, &at)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply one `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--override expects key=value, got '{kv}'")))?;
        self.set(key.trim(), value, "--override")
    }

    /// Canonical fully-materialized form; parsing it back reproduces `self`.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("KEYS covers every field"));
            out.push('\n');
        }
        out
    }

    /// FNV-1a over the resolved text, as a hex string.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolved().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let mut stages = Vec::new();
        for part in self.encoder_stages.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (f, s) = part.split_once(':').ok_or_else(|| {
                Error::Config(format!(
                    "encoder.stages entries are filters:stride, got '{part}'"
                ))
            })?;
            stages.push((
                parse_as("encoder.stages", f.trim(), "config")?,
                parse_as("encoder.stages", s.trim(), "config")?,
            ));
        }
        let spec = EncoderSpec {
            stages,
            embedding_dim: self.encoder_embedding_dim,
            proj_hidden_dim: self.encoder_proj_hidden_dim,
            momentum: self.encoder_momentum,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mix_config(&self) -> Result<MixConfig> {
        let cfg = MixConfig {
            enabled: self.mix_enabled,
            gamma: self.mix_gamma as f32,
            p_global: self.mix_p_global as f32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base_loss(&self) -> Result<BaseLossKind> {
        self.loss_base.parse()
    }

    pub fn loss_mode_parsed(&self) -> Result<LossMode> {
        self.loss_mode.parse()
    }

    pub fn augment_cfg(&self) -> Result<AugmentCfg> {
        let cfg = AugmentCfg {
            crop_pad: self.augment_crop_pad,
            flip_p: self.augment_flip_p,
            gray_p: self.augment_gray_p,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_triple(key: &str, s: &str) -> Result<[f32; 3]> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "key '{key}' expects three comma-separated values, got '{s}'"
            )));
        }
        let mut out = [0.0f32; 3];
        for (slot, p) in out.iter_mut().zip(&parts) {
            *slot = parse_as(key, p, "config")?;
        }
        Ok(out)
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let std = Self::parse_triple("norm.std", &self.norm_std)?;
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("norm.std entries must be > 0".into()));
        }
        Ok(Normalization {
            mean: Self::parse_triple("norm.mean", &self.norm_mean)?,
            std,
        })
    }

    pub fn scales_list(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for part in self.scales.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            out.push(parse_as("scales", part, "config")?);
        }
        if out.iter().any(|&s| s == 0) {
            return Err(Error::Config("scales entries must be ≥ 1".into()));
        }
        Ok(out)
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data_synthetic_classes,
            samples_per_class: self.data_synthetic_per_class,
            extent: self.data_synthetic_extent,
            sigma: self.data_synthetic_sigma,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// Cross-field validation of everything a run will need.
    pub fn validate(&self) -> Result<()> {
        self.encoder_spec()?;
        self.mix_config()?;
        self.base_loss()?;
        self.loss_mode_parsed()?;
        self.augment_cfg()?;
        self.normalization()?;
        self.scales_list()?;
        if self.batch_size < 2 && self.mix_enabled {
            return Err(Error::Config(
                "batch_size must be ≥ 2 when mixing is enabled".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.loss_tau > 0.0) {
            return Err(Error::Config(format!(
                "loss.tau must be > 0, got {}",
                self.loss_tau
            )));
        }
        if !(self.opt_lr > 0.0) {
            return Err(Error::Config(format!("opt.lr must be > 0, got {}", self.opt_lr)));
        }
        match self.opt_kind.as_str() {
            "adam" | "sgd" => {}
            other => {
                return Err(Error::Config(format!(
                    "opt.kind must be adam|sgd, got {other}"
                )))
            }
        }
        match self.data_dataset.as_str() {
            "synthetic" | "cifar10" | "cifar100" => {}
            other => {
                return Err(Error::Config(format!(
                    "data.dataset must be synthetic|cifar10|cifar100, got {other}"
                )))
            }
        }
        if self.bank_capacity == 0 && self.loss_base == "moco" {
            return Err(Error::Config(
                "bank.capacity must be ≥ 1 for the moco base".into(),
            ));
        }
        if self.eval_knn_k == 0 {
            return Err(Error::Config("eval.knn_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

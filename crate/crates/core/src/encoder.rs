//! Siamese encoder: a small strided-conv backbone plus a two-layer projection
//! head producing unit-norm embeddings, with an optional momentum ("key")
//! copy and a separate BYOL-style predictor head.
//!
//! Parameters live outside any graph. Per training step the caller binds them
//! into a fresh [`Graph`] once (`bind`), runs any number of forwards against
//! those bound ids, and harvests gradients by parameter name afterwards.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, TensorId};
use crate::types::ImageBatch;

const BN_EPS: f32 = 1e-5;
/// Running-stat update rate: new = (1−r)·old + r·batch.
const BN_STAT_RATE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    /// Conv stages as (filters, stride); every stage is 3×3, pad 1, BN, relu.
    pub stages: Vec<(usize, usize)>,
    pub embedding_dim: usize,
    pub proj_hidden_dim: usize,
    /// Key-encoder momentum m ∈ [0,1).
    pub momentum: f32,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            stages: vec![(32, 2), (64, 2), (128, 2), (128, 2)],
            embedding_dim: 64,
            proj_hidden_dim: 1024,
            momentum: 0.99,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder.stages must be non-empty".into()));
        }
        for &(f, s) in &self.stages {
            if f < 1 {
                return Err(Error::Config("encoder stage filters must be ≥ 1".into()));
            }
            if !(1..=2).contains(&s) {
                return Err(Error::Config(format!("encoder stage stride must be 1 or 2, got {s}")));
            }
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "encoder.embedding_dim must be ≥ 2, got {}",
                self.embedding_dim
            )));
        }
        if self.proj_hidden_dim < 1 {
            return Err(Error::Config("encoder.proj_hidden_dim must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "encoder.momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-BN-layer running statistics (biased variance, matching what the
/// train-mode pass normalizes with).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStat {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStat {
    fn fresh(name: &str, c: usize) -> Self {
        Self {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    fn update(&mut self, mean: &[f32], var: &[f32]) {
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_STAT_RATE) * *r + BN_STAT_RATE * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - BN_STAT_RATE) * *r + BN_STAT_RATE * b;
        }
    }
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    (0..len)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

pub struct Encoder {
    pub spec: EncoderSpec,
    pub in_channels: usize,
    pub params: Vec<Param>,
    pub running: Vec<RunningStat>,
    /// Forward passes run since construction (diagnostics and tests).
    pub passes: usize,
    /// Input leaf of the most recent forward (gradient-probe hook).
    pub last_input: Option<TensorId>,
    bound: Vec<TensorId>,
    bound_trainable: bool,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, in_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("encoder input channels must be ≥ 1".into()));
        }
        let mut rng = crate::derive_rng(seed, "encoder-init", 0);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut c_in = in_channels;
        for (i, &(f, _)) in spec.stages.iter().enumerate() {
            let fan_in = c_in * 9;
            params.push(Param::new(
                format!("stage{i}.conv.w"),
                &[f, c_in, 3, 3],
                he_normal(&mut rng, fan_in, f * c_in * 9),
            ));
            params.push(Param::filled(format!("stage{i}.bn.gamma"), &[f], 1.0));
            params.push(Param::zeros(format!("stage{i}.bn.beta"), &[f]));
            running.push(RunningStat::fresh(&format!("stage{i}.bn"), f));
            c_in = f;
        }
        let feat = c_in;
        let hidden = spec.proj_hidden_dim;
        let emb = spec.embedding_dim;
        params.push(Param::new(
            "proj.fc1.w",
            &[feat, hidden],
            he_normal(&mut rng, feat, feat * hidden),
        ));
        params.push(Param::zeros("proj.fc1.b", &[hidden]));
        params.push(Param::filled("proj.bn.gamma", &[hidden], 1.0));
        params.push(Param::zeros("proj.bn.beta", &[hidden]));
        running.push(RunningStat::fresh("proj.bn", hidden));
        params.push(Param::new(
            "proj.fc2.w",
            &[hidden, emb],
            he_normal(&mut rng, hidden, hidden * emb),
        ));
        params.push(Param::zeros("proj.fc2.b", &[emb]));
        Ok(Self {
            spec: spec.clone(),
            in_channels,
            params,
            running,
            passes: 0,
            last_input: None,
            bound: Vec::new(),
            bound_trainable: false,
        })
    }

    /// Deep copy for use as a momentum key encoder.
    pub fn clone_structure(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            params: self.params.clone(),
            running: self.running.clone(),
            passes: 0,
            last_input: None,
            bound: Vec::new(),
            bound_trainable: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.stages.last().expect("validated non-empty").0
    }

    /// Bind every parameter into `g` once. `trainable` controls whether the
    /// bound leaves (and subsequent input leaves) carry gradients.
    pub fn bind(&mut self, g: &mut Graph, trainable: bool) {
        self.bound = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    p.bind(g)
                } else {
                    g.constant(&p.shape, p.data.clone())
                }
            })
            .collect();
        self.bound_trainable = trainable;
    }

    fn pid(&self, name: &str) -> TensorId {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert!(
            !self.bound.is_empty(),
            "bind() must be called before forward on this graph"
        );
        self.bound[idx]
    }

    fn stat_index(&self, name: &str) -> usize {
        self.running
            .iter()
            .position(|r| r.name == name)
            .unwrap_or_else(|| panic!("unknown running stat {name}"))
    }

    fn bn(&mut self, g: &mut Graph, x: TensorId, layer: &str, train: bool) -> Result<TensorId> {
        let gamma = self.pid(&format!("{layer}.gamma"));
        let beta = self.pid(&format!("{layer}.beta"));
        let si = self.stat_index(layer);
        if train {
            let (out, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.running[si].update(&stats.mean, &stats.var);
            Ok(out)
        } else {
            let (mean, var) = (self.running[si].mean.clone(), self.running[si].var.clone());
            g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }

    /// Backbone features (pre-projection), N×feature_dim. This is the layer
    /// kNN and the linear probe evaluate.
    pub fn backbone_bound(
        &mut self,
        g: &mut Graph,
        x: &ImageBatch,
        train: bool,
    ) -> Result<TensorId> {
        if x.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                lhs: vec![x.n, self.in_channels, x.h, x.w],
                rhs: vec![x.n, x.c, x.h, x.w],
            });
        }
        self.passes += 1;
        let mut h = g.leaf(
            &[x.n, x.c, x.h, x.w],
            x.data.clone(),
            self.bound_trainable,
        );
        self.last_input = Some(h);
        for i in 0..self.spec.stages.len() {
            let (_, stride) = self.spec.stages[i];
            let w = self.pid(&format!("stage{i}.conv.w"));
            h = g.conv2d(h, w, stride, 1)?;
            h = self.bn(g, h, &format!("stage{i}.bn"), train)?;
            h = g.relu(h);
        }
        g.global_avg_pool(h)
    }

    fn project_bound(&mut self, g: &mut Graph, feats: TensorId, train: bool) -> Result<TensorId> {
        let mut h = g.matmul(feats, self.pid("proj.fc1.w"))?;
        h = g.add_row_broadcast(h, self.pid("proj.fc1.b"))?;
        h = self.bn(g, h, "proj.bn", train)?;
        h = g.relu(h);
        h = g.matmul(h, self.pid("proj.fc2.w"))?;
        h = g.add_row_broadcast(h, self.pid("proj.fc2.b"))?;
        g.l2_normalize_rows(h)
    }

    /// Full forward against previously bound parameters: backbone →
    /// projection → l2 normalize. Output rows are unit-norm.
    pub fn forward_bound(&mut self, g: &mut Graph, x: &ImageBatch, train: bool) -> Result<TensorId> {
        let feats = self.backbone_bound(g, x, train)?;
        self.project_bound(g, feats, train)
    }

    /// Convenience single-shot forward: bind then run.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: &ImageBatch,
        train: bool,
        trainable: bool,
    ) -> Result<TensorId> {
        self.bind(g, trainable);
        self.forward_bound(g, x, train)
    }

    /// Collect gradients for all parameters from the bound leaves.
    pub fn grad_map(&self, g: &Graph) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (p, &id) in self.params.iter().zip(&self.bound) {
            let grad = g
                .grad(id)
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            out.insert(p.name.clone(), grad.to_vec());
        }
        Ok(out)
    }

    /// Parameters plus running stats as named records (for checkpoints).
    pub fn state_records(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        let mut out: Vec<(String, Vec<f32>)> = self
            .params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.data.clone()))
            .collect();
        for r in &self.running {
            out.push((format!("{prefix}{}.running_mean", r.name), r.mean.clone()));
            out.push((format!("{prefix}{}.running_var", r.name), r.var.clone()));
        }
        out
    }

    /// Restore parameters and running stats from named records.
    pub fn load_state_records(
        &mut self,
        prefix: &str,
        records: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let data = records
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
            if data.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "load_state",
                    lhs: p.shape.clone(),
                    rhs: vec![data.len()],
                });
            }
            p.data = data.clone();
        }
        for r in &mut self.running {
            for (field, slot) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let key = format!("{prefix}{}.{field}", r.name);
                let data = records
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
                if data.len() != slot.len() {
                    return Err(Error::ShapeMismatch {
                        op: "load_state",
                        lhs: vec![slot.len()],
                        rhs: vec![data.len()],
                    });
                }
                *slot = data.clone();
            }
        }
        Ok(())
    }
}

/// Online encoder plus its slowly updated key copy.
pub struct MomentumPair {
    pub online: Encoder,
    pub key: Encoder,
    pub momentum: f32,
}

impl MomentumPair {
    pub fn new(online: Encoder) -> Self {
        let key = online.clone_structure();
        let momentum = online.spec.momentum;
        Self {
            online,
            key,
            momentum,
        }
    }

    /// key ← m·key + (1−m)·online, per parameter.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update_params(&self.online.params, &mut self.key.params, self.momentum)
    }
}

pub fn momentum_update_params(online: &[Param], key: &mut [Param], m: f32) -> Result<()> {
    if online.len() != key.len() {
        return Err(Error::invalid(
            "momentum_update",
            format!("{} online vs {} key parameters", online.len(), key.len()),
        ));
    }
    for (o, k) in online.iter().zip(key.iter_mut()) {
        if o.name != k.name || o.shape != k.shape {
            return Err(Error::ShapeMismatch {
                op: "momentum_update",
                lhs: o.shape.clone(),
                rhs: k.shape.clone(),
            });
        }
        for (kv, &ov) in k.data.iter_mut().zip(&o.data) {
            *kv = m * *kv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

/// BYOL predictor: two-layer MLP on embeddings, output re-normalized. Owned
/// by the training side, never copied into the key branch.
pub struct Predictor {
    pub params: Vec<Param>,
    bound: Vec<TensorId>,
}

impl Predictor {
    pub fn new(embedding_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::derive_rng(seed, "predictor-init", 0);
        let params = vec![
            Param::new(
                "pred.fc1.w",
                &[embedding_dim, hidden],
                he_normal(&mut rng, embedding_dim, embedding_dim * hidden),
            ),
            Param::zeros("pred.fc1.b", &[hidden]),
            Param::new(
                "pred.fc2.w",
                &[hidden, embedding_dim],
                he_normal(&mut rng, hidden, hidden * embedding_dim),
            ),
            Param::zeros("pred.fc2.b", &[embedding_dim]),
        ];
        Self {
            params,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph, trainable: bool) {
        self.bound = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    p.bind(g)
                } else {
                    g.constant(&p.shape, p.data.clone())
                }
            })
            .collect();
    }

    pub fn forward_bound(&self, g: &mut Graph, z: TensorId) -> Result<TensorId> {
        assert!(!self.bound.is_empty(), "bind() before forward");
        let mut h = g.matmul(z, self.bound[0])?;
        h = g.add_row_broadcast(h, self.bound[1])?;
        h = g.relu(h);
        h = g.matmul(h, self.bound[2])?;
        h = g.add_row_broadcast(h, self.bound[3])?;
        g.l2_normalize_rows(h)
    }

    pub fn grad_map(&self, g: &Graph) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (p, &id) in self.params.iter().zip(&self.bound) {
            let grad = g
                .grad(id)
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            out.insert(p.name.clone(), grad.to_vec());
        }
        Ok(out)
    }

    pub fn state_records(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.data.clone()))
            .collect()
    }

    pub fn load_state_records(
        &mut self,
        prefix: &str,
        records: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let data = records
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
            if data.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "load_state",
                    lhs: p.shape.clone(),
                    rhs: vec![data.len()],
                });
            }
            p.data = data.clone();
        }
        Ok(())
    }
}

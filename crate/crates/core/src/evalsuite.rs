//! Representation-quality evaluation: weighted kNN monitor and linear probe
//! over frozen, unit-normalized backbone features.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{normalize_image, LabeledDataset, Normalization};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{self, TensorRecord};
use crate::tensor::optim::{Adam, Optimizer};
use crate::tensor::{Graph, Param};
use crate::types::{EmbeddingBatch, ImageBatch};

/// M×D unit-norm features with labels; the search structure for kNN and the
/// training table for the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub features: EmbeddingBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureIndex {
    pub fn new(features: EmbeddingBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "feature_index",
                lhs: vec![features.n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(
                "feature_index",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        let dev = features.max_norm_deviation();
        if dev > 1e-5 {
            return Err(Error::NotUnitNorm {
                op: "feature_index",
                row: 0,
                norm: 1.0 + dev,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }
}

/// The k nearest rows of `index` to `q` by cosine similarity, sorted by
/// descending similarity with index-order tie-break.
fn nearest(index: &FeatureIndex, q: &[f32], k: usize) -> Vec<(f32, usize)> {
    let mut sims: Vec<(f32, usize)> = (0..index.features.n)
        .map(|i| {
            let s: f32 = index
                .features
                .row(i)
                .iter()
                .zip(q)
                .map(|(a, b)| a * b)
                .sum();
            (s, i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    sims.truncate(k);
    sims
}

/// Predict one query's class. Weighted mode: class score = Σ exp(sim/τ) over
/// the k nearest; unweighted: majority vote with ties going to the class of
/// the nearest tied neighbor.
pub fn knn_predict(
    index: &FeatureIndex,
    q: &[f32],
    k: usize,
    tau: f32,
    weighted: bool,
) -> usize {
    let picked = nearest(index, q, k);
    if weighted {
        let mut score = vec![0.0f64; index.num_classes];
        for &(sim, i) in &picked {
            score[index.labels[i]] += ((sim / tau) as f64).exp();
        }
        let mut best = 0;
        for c in 1..index.num_classes {
            if score[c] > score[best] {
                best = c;
            }
        }
        best
    } else {
        let mut votes = vec![0usize; index.num_classes];
        for &(_, i) in &picked {
            votes[index.labels[i]] += 1;
        }
        let top = *votes.iter().max().expect("k ≥ 1");
        // first neighbor (nearest) whose class is among the vote leaders
        picked
            .iter()
            .map(|&(_, i)| index.labels[i])
            .find(|&c| votes[c] == top)
            .expect("a leader class exists among the neighbors")
    }
}

pub fn knn_accuracy(
    index: &FeatureIndex,
    queries: &FeatureIndex,
    k: usize,
    tau: f32,
    weighted: bool,
) -> Result<f32> {
    if index.features.n == 0 {
        return Err(Error::invalid("knn_accuracy", "empty index"));
    }
    if k < 1 || k > index.features.n {
        return Err(Error::invalid(
            "knn_accuracy",
            format!("k must be in [1, {}], got {k}", index.features.n),
        ));
    }
    if index.features.d != queries.features.d {
        return Err(Error::ShapeMismatch {
            op: "knn_accuracy",
            lhs: vec![index.features.d],
            rhs: vec![queries.features.d],
        });
    }
    let mut correct = 0usize;
    for i in 0..queries.features.n {
        let pred = knn_predict(index, queries.features.row(i), k, tau, weighted);
        if pred == queries.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f32 / queries.features.n.max(1) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCfg {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate decays exponentially from `lr_start` to `lr_end` over
    /// the epochs.
    pub lr_start: f32,
    pub lr_end: f32,
    pub seed: u64,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr_start: 1e-2,
            lr_end: 1e-6,
            seed: 0,
        }
    }
}

fn probe_lr(cfg: &ProbeCfg, epoch: usize) -> f32 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let t = epoch as f32 / (cfg.epochs - 1) as f32;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// Train a single linear layer (softmax cross-entropy, Adam, no
/// augmentation) on frozen features; returns test accuracy.
pub fn linear_probe(train: &FeatureIndex, test: &FeatureIndex, cfg: &ProbeCfg) -> Result<f32> {
    if train.num_classes != test.num_classes {
        return Err(Error::invalid(
            "linear_probe",
            format!(
                "class count mismatch: {} train vs {} test",
                train.num_classes, test.num_classes
            ),
        ));
    }
    if train.features.n == 0 {
        return Err(Error::invalid("linear_probe", "empty training features"));
    }
    let (d, c) = (train.features.d, train.num_classes);
    let mut params = vec![Param::zeros("probe.w", &[d, c]), Param::zeros("probe.b", &[c])];
    let mut opt = Optimizer::Adam(Adam::new(0.0));
    let mut order: Vec<usize> = (0..train.features.n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = crate::derive_rng(cfg.seed, "probe-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let lr = probe_lr(cfg, epoch);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let n = chunk.len();
            let mut xs = Vec::with_capacity(n * d);
            let mut onehot = vec![0.0f32; n * c];
            for (row, &i) in chunk.iter().enumerate() {
                xs.extend_from_slice(train.features.row(i));
                onehot[row * c + train.labels[i]] = 1.0;
            }
            let mut g = Graph::new();
            let w = params[0].bind(&mut g);
            let b = params[1].bind(&mut g);
            let x = g.constant(&[n, d], xs);
            let logits0 = g.matmul(x, w)?;
            let logits = g.add_row_broadcast(logits0, b)?;
            let logp = g.log_softmax_rows(logits)?;
            let mask = g.constant(&[n, c], onehot);
            let picked = g.mul(logp, mask)?;
            let s = g.sum_all(picked);
            let loss = g.scale(s, -1.0 / n as f32);
            g.backward(loss)?;
            let mut grads = BTreeMap::new();
            grads.insert("probe.w".to_string(), g.grad(w).unwrap().to_vec());
            grads.insert("probe.b".to_string(), g.grad(b).unwrap().to_vec());
            opt.step(lr, &mut params, &grads)?;
        }
    }
    // accuracy on the held-out features
    let (w, b) = (&params[0].data, &params[1].data);
    let mut correct = 0usize;
    for i in 0..test.features.n {
        let x = test.features.row(i);
        let mut best = (f32::NEG_INFINITY, 0usize);
        for class in 0..c {
            let mut logit = b[class];
            for j in 0..d {
                logit += x[j] * w[j * c + class];
            }
            if logit > best.0 {
                best = (logit, class);
            }
        }
        if best.1 == test.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f32 / test.features.n.max(1) as f32)
}

/// Run the encoder in eval mode over a dataset and return l2-normalized
/// backbone (pre-projection) features.
pub fn extract_features(
    enc: &mut Encoder,
    ds: &LabeledDataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<FeatureIndex> {
    let d = enc.feature_dim();
    let mut features = Vec::with_capacity(ds.n * d);
    let mut labels = Vec::with_capacity(ds.n);
    let stride = ds.c * ds.h * ds.w;
    let bs = batch_size.max(1);
    let mut start = 0;
    while start < ds.n {
        let n = bs.min(ds.n - start);
        let mut data = Vec::with_capacity(n * stride);
        for i in start..start + n {
            data.extend(normalize_image(ds.image(i), ds.c, ds.h, ds.w, norm));
            labels.push(ds.label(i));
        }
        let batch = ImageBatch::new(n, ds.c, ds.h, ds.w, data)?;
        let mut g = Graph::new();
        enc.bind(&mut g, false);
        let feats = enc.backbone_bound(&mut g, &batch, false)?;
        let unit = g.l2_normalize_rows(feats)?;
        features.extend_from_slice(g.data(unit));
        start += n;
    }
    FeatureIndex::new(
        EmbeddingBatch {
            data: features,
            n: ds.n,
            d,
        },
        labels,
        ds.num_classes,
    )
}

/// Export features and labels as "UMX1" tensor records for external tooling.
pub fn export_features(index: &FeatureIndex, path: &Path) -> Result<()> {
    let records = vec![
        TensorRecord {
            name: "features".to_string(),
            shape: vec![index.features.n, index.features.d],
            data: index.features.data.clone(),
        },
        TensorRecord {
            name: "labels".to_string(),
            shape: vec![index.labels.len()],
            data: index.labels.iter().map(|&l| l as f32).collect(),
        },
    ];
    checkpoint::write_file(path, &records)
}

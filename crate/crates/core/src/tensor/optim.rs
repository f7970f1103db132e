//! Parameter updates: SGD with momentum and Adam, both with L2 weight decay
//! folded into the gradient. State is keyed by parameter name so parameter
//! sets can grow/shrink between construction and first step (they don't in
//! practice, but checkpoint restore relies on name-addressed state).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    /// One in-place update. `grads` maps param name → gradient buffer; a
    /// missing entry is an error (backward should have reached every param).
    /// Taking an iterator lets callers chain parameter groups (e.g. encoder
    /// plus predictor) into a single step, which matters for Adam's bias-
    /// correction clock.
    pub fn step<'a>(
        &mut self,
        lr: f32,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.apply(lr, params, grads),
            Optimizer::Adam(a) => a.apply(lr, params, grads),
        }
    }

    /// Flatten optimizer state into named records for checkpointing.
    pub fn state_records(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        match self {
            Optimizer::Sgd(s) => {
                for (name, v) in &s.velocity {
                    out.push((format!("opt.vel.{name}"), v.clone()));
                }
            }
            Optimizer::Adam(a) => {
                out.push(("opt.t".to_string(), vec![a.t as f32]));
                for (name, m) in &a.m {
                    out.push((format!("opt.m.{name}"), m.clone()));
                }
                for (name, v) in &a.v {
                    out.push((format!("opt.v.{name}"), v.clone()));
                }
            }
        }
        out
    }

    /// Restore state written by [`Optimizer::state_records`]. Records that do
    /// not belong to this optimizer kind are rejected.
    pub fn load_state_records(&mut self, records: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => {
                s.velocity.clear();
                for (name, data) in records {
                    let key = name
                        .strip_prefix("opt.vel.")
                        .ok_or_else(|| Error::Format(format!("unexpected SGD state record {name}")))?;
                    s.velocity.insert(key.to_string(), data.clone());
                }
            }
            Optimizer::Adam(a) => {
                a.m.clear();
                a.v.clear();
                for (name, data) in records {
                    if name == "opt.t" {
                        a.t = data.first().copied().unwrap_or(0.0) as u64;
                    } else if let Some(key) = name.strip_prefix("opt.m.") {
                        a.m.insert(key.to_string(), data.clone());
                    } else if let Some(key) = name.strip_prefix("opt.v.") {
                        a.v.insert(key.to_string(), data.clone());
                    } else {
                        return Err(Error::Format(format!("unexpected Adam state record {name}")));
                    }
                }
            }
        }
        Ok(())
    }
}

impl Sgd {
    fn apply<'a>(
        &mut self,
        lr: f32,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        for p in params {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            if g.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            let vel = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let grad = g[i] + self.weight_decay * p.data[i];
                vel[i] = self.momentum * vel[i] + grad;
                p.data[i] -= lr * vel[i];
            }
        }
        Ok(())
    }
}

impl Adam {
    fn apply<'a>(
        &mut self,
        lr: f32,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            if g.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let grad = g[i] + self.weight_decay * p.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grads_of(name: &str, g: Vec<f32>) -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), g);
        m
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        for mut opt in [
            Optimizer::Sgd(Sgd::new(0.9, 0.01)),
            Optimizer::Adam(Adam::new(0.01)),
        ] {
            let mut params = [Param::new("p", &[3], vec![1.0, -2.0, 3.0])];
            let before = params[0].data.clone();
            opt.step(0.0, &mut params, &grads_of("p", vec![5.0, -1.0, 2.0]))
                .unwrap();
            assert_eq!(params[0].data, before);
        }
    }

    #[test]
    fn plain_sgd_step_is_p_minus_lr_g() {
        let mut opt = Optimizer::Sgd(Sgd::new(0.0, 0.0));
        let mut params = [Param::new("p", &[2], vec![1.0, 2.0])];
        opt.step(0.1, &mut params, &grads_of("p", vec![0.5, -0.5]))
            .unwrap();
        assert!((params[0].data[0] - 0.95).abs() < 1e-7);
        assert!((params[0].data[1] - 2.05).abs() < 1e-7);
    }

    #[test]
    fn sgd_contracts_quadratic_bowl() {
        // f(p)=‖p‖²: p ← (1−2·lr)·p each step, so 100 steps at lr=0.1 → 0.8¹⁰⁰
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm0: f32 = init.iter().map(|v| v * v).sum::<f32>().sqrt();
        let mut opt = Optimizer::Sgd(Sgd::new(0.0, 0.0));
        let mut params = [Param::new("p", &[4], init)];
        for _ in 0..100 {
            let mut g = Graph::new();
            let p = params[0].bind(&mut g);
            let sq = g.mul(p, p).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss).unwrap();
            let grads = grads_of("p", g.grad(p).unwrap().to_vec());
            opt.step(0.1, &mut params, &grads).unwrap();
        }
        let norm: f32 = params[0].data.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm < 1e-3 * norm0, "‖p‖={norm} vs ‖p₀‖={norm0}");
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut opt = Optimizer::Adam(Adam::new(0.0));
        let mut params = [Param::new("p", &[3], vec![1.0, -0.5, 0.25])];
        for _ in 0..300 {
            let g: Vec<f32> = params[0].data.iter().map(|&p| 2.0 * p).collect();
            opt.step(0.05, &mut params, &grads_of("p", g)).unwrap();
        }
        let norm: f32 = params[0].data.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm < 1e-2, "‖p‖={norm}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut opt = Optimizer::Sgd(Sgd::new(0.0, 0.0));
        let mut params = [Param::new("p", &[1], vec![1.0])];
        let err = opt.step(0.1, &mut params, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p"));
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_grad_signal() {
        let mut opt = Optimizer::Sgd(Sgd::new(0.0, 0.1));
        let mut params = [Param::new("p", &[1], vec![1.0])];
        opt.step(0.5, &mut params, &grads_of("p", vec![0.0])).unwrap();
        assert!((params[0].data[0] - 0.95).abs() < 1e-7); // p − lr·wd·p
    }

    #[test]
    fn optimizer_state_round_trips_through_records() {
        let mut opt = Optimizer::Adam(Adam::new(0.001));
        let mut params = [Param::new("w", &[2], vec![0.3, -0.7])];
        for _ in 0..3 {
            opt.step(0.01, &mut params, &grads_of("w", vec![0.1, 0.2]))
                .unwrap();
        }
        let records: BTreeMap<String, Vec<f32>> =
            opt.state_records().into_iter().collect();
        let mut fresh = Optimizer::Adam(Adam::new(0.001));
        fresh.load_state_records(&records).unwrap();
        assert_eq!(opt, fresh);
        // and the restored copy continues identically
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        opt.step(0.01, &mut p1, &grads_of("w", vec![0.3, -0.1])).unwrap();
        fresh.step(0.01, &mut p2, &grads_of("w", vec![0.3, -0.1])).unwrap();
        assert_eq!(p1[0].data, p2[0].data);
    }
}

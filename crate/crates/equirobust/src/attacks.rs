//! White-box gradient attacks under the l-infinity norm: FGSM and PGD, plus
//! adversarial-accuracy sweeps over an epsilon grid.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use crate::zoo::Classifier;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            seed: 0,
        }
    }

    /// Headline PGD defaults: 20 steps, alpha = eps/8, random start.
    pub fn pgd_default(epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps: 20,
            step_size: epsilon / 8.0,
            random_start: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon must lie in [0,1], got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.kind == AttackKind::Fgsm && self.steps != 1 {
            return Err(Error::invalid(format!(
                "FGSM forces steps=1, got {}",
                self.steps
            )));
        }
        if self.kind == AttackKind::Pgd && self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::invalid("PGD step_size must be positive"));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.step_size > self.epsilon && self.epsilon > 0.0 {
            out.push(format!(
                "step_size {} exceeds epsilon {}; alpha <= epsilon is recommended",
                self.step_size, self.epsilon
            ));
        }
        out
    }

    /// Same attack re-targeted at a different budget; PGD step size is
    /// rescaled proportionally so grid sweeps keep the alpha/epsilon ratio.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut c = *self;
        let ratio = if self.epsilon > 0.0 {
            self.step_size / self.epsilon
        } else {
            1.0 / 8.0
        };
        c.epsilon = epsilon;
        c.step_size = match self.kind {
            AttackKind::Fgsm => epsilon,
            AttackKind::Pgd => epsilon * ratio,
        };
        c
    }
}

/// sign with sign(0) = 0: exactly-zero gradient components stay untouched.
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_inputs(x: &Tensor, y: &[usize], k: usize) -> Result<()> {
    if x.rank() != 4 || x.shape()[0] != y.len() {
        return Err(Error::invalid(format!(
            "attack expects (N,C,H,W) inputs with N={} labels, got {:?}",
            y.len(),
            x.shape()
        )));
    }
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("attack inputs must lie in [0,1]"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean-CE gradient with respect to the input batch. The mean scaling never
/// changes per-sample gradient signs, so sign-based attacks can share one
/// tape across the batch.
fn input_gradient<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    let g = Graph::new();
    let xv = g.input(x.clone(), true);
    let logits = model.forward_eval(&g, xv)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let grads = g.backward(loss)?;
    let dx = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !dx.all_finite() {
        return Err(Error::NonFinite("attack input gradient".into()));
    }
    Ok(dx)
}

pub fn fgsm<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
) -> Result<Tensor> {
    pgd(model, x, y, &AttackConfig::fgsm(epsilon))
}

pub fn pgd<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(x, y, model.num_classes())?;
    let eps = cfg.epsilon;
    let mut cur = x.clone();
    if cfg.random_start && eps > 0.0 {
        let n = x.shape()[0];
        let stride = x.numel() / n;
        let d = cur.data_mut();
        for i in 0..n {
            // per-sample derived seed: deterministic under any worker split
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            for v in &mut d[i * stride..(i + 1) * stride] {
                *v = (*v + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
            }
        }
    }
    for _ in 0..cfg.steps {
        let grad = input_gradient(model, &cur, y)?;
        let cd = cur.data_mut();
        for (i, v) in cd.iter_mut().enumerate() {
            let x0 = x.data()[i];
            let stepped = *v + cfg.step_size * sign0(grad.data()[i]);
            *v = stepped.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    Ok(cur)
}

pub fn attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, y, cfg.epsilon),
        AttackKind::Pgd => pgd(model, x, y, cfg),
    }
}

/// Numerically stable per-sample cross-entropy from logit values.
pub fn per_sample_ce(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(y)
        .map(|(row, &label)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .collect()
}

/// Per-epsilon adversarial accuracy. An epsilon=0 row (clean accuracy) is
/// prepended when the grid does not already start at 0.
pub fn adversarial_accuracy<M: Classifier + ?Sized>(
    model: &M,
    ds: &Dataset,
    cfg: &AttackConfig,
    eps_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if ds.is_empty() {
        return Err(Error::Dataset("adversarial_accuracy on empty dataset".into()));
    }
    if eps_grid.is_empty() {
        return Err(Error::invalid("epsilon grid must be nonempty"));
    }
    if eps_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("epsilon grid must be strictly ascending"));
    }
    let mut grid: Vec<f64> = Vec::new();
    if eps_grid[0] != 0.0 {
        grid.push(0.0);
    }
    grid.extend_from_slice(eps_grid);

    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(grid.len());
    for &eps in &grid {
        let cfg_eps = cfg.with_epsilon(eps);
        let mut correct = 0usize;
        let mut start = 0usize;
        while start < ds.len() {
            let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
            let (xb, yb) = ds.gather(&idx);
            let xa = if eps == 0.0 {
                xb
            } else {
                attack(model, &xb, &yb, &cfg_eps)?
            };
            let preds = model.predict_batch(&xa)?;
            correct += preds.iter().zip(&yb).filter(|(p, y)| p == y).count();
            start += CHUNK;
        }
        out.push((eps, correct as f64 / ds.len() as f64));
    }
    Ok(out)
}

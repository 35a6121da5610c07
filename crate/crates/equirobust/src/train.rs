//! Deterministic desk-scale training: SGD with momentum or Adam, cosine or
//! constant learning-rate schedules, optional PGD adversarial training, and
//! the (spec x seed) evaluation matrix.

use crate::attacks::{adversarial_accuracy, attack, per_sample_ce, AttackConfig, AttackKind};
use crate::data::{corrupt, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::report::{ReportRow, ReportWriter};
use crate::tensor::{Graph, Tensor};
use crate::zoo::{build, Classifier, Model, ModelSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub adversarial_training: Option<AttackConfig>,
    /// Save a checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 128,
            epochs: 30,
            weight_decay: 5e-4,
            seeds: vec![0],
            adversarial_training: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Default inner attack for adversarial training.
    pub fn default_at_attack() -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 0.03,
            steps: 7,
            step_size: 0.03 / 4.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list must be nonempty"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning_rate and weight_decay must be nonnegative"));
        }
        if let Some(at) = &self.adversarial_training {
            at.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

enum OptState {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: usize },
}

impl OptState {
    fn new(cfg: &TrainConfig, model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        match cfg.optimizer {
            Optimizer::SgdMomentum => OptState::Sgd { velocity: zeros },
            Optimizer::Adam => OptState::Adam { m: zeros.clone(), v: zeros, t: 0 },
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, weight_decay: f64) {
        match self {
            OptState::Sgd { velocity } => {
                for (i, (name, p)) in model.params_mut().iter_mut().enumerate() {
                    let decay = if decayable(name) { weight_decay } else { 0.0 };
                    let vel = velocity[i].data_mut();
                    let pd = p.data_mut();
                    for (j, g) in grads[i].data().iter().enumerate() {
                        let g = g + decay * pd[j];
                        vel[j] = 0.9 * vel[j] + g;
                        pd[j] -= lr * vel[j];
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for (i, (name, p)) in model.params_mut().iter_mut().enumerate() {
                    let decay = if decayable(name) { weight_decay } else { 0.0 };
                    let md = m[i].data_mut();
                    let vd = v[i].data_mut();
                    let pd = p.data_mut();
                    for (j, g) in grads[i].data().iter().enumerate() {
                        let g = g + decay * pd[j];
                        md[j] = b1 * md[j] + (1.0 - b1) * g;
                        vd[j] = b2 * vd[j] + (1.0 - b2) * g * g;
                        pd[j] -= lr * (md[j] / bc1) / ((vd[j] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Weight decay applies to conv/dense weights, not normalization or bias
/// parameters.
fn decayable(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b")
        || name.contains("theta"))
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let t = step as f64 / total.max(1) as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Train one model. `seed` overrides the spec's parameter seed and drives
/// the data order, so one (spec, dataset, config, seed) tuple fully
/// determines the result.
pub fn train(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if ds.num_classes != spec.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the spec expects {}",
            ds.num_classes, spec.num_classes
        )));
    }
    let mut seeded = spec.clone();
    seeded.seed = seed;
    let mut model = build(&seeded)?;
    let mut opt = OptState::new(cfg, &model);
    let mut log = TrainLog::default();
    let n = ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut last_ckpt: Option<std::path::PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut xb, yb) = ds.gather(chunk);
            if let Some(at) = &cfg.adversarial_training {
                let mut at = *at;
                at.seed = at.seed ^ seed ^ ((epoch as u64) << 32) ^ bi as u64;
                xb = attack(&model, &xb, &yb, &at)?;
            }
            let g = Graph::new();
            let xv = g.input(xb, false);
            let (logits, pvars) = model.forward_train(&g, xv)?;
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                let at = last_ckpt
                    .as_ref()
                    .map(|p| format!("last good checkpoint at {}", p.display()))
                    .unwrap_or_else(|| "no checkpoint saved yet".into());
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch} batch {bi}; {at}"
                )));
            }
            let logit_vals = g.value(logits);
            let k = spec.num_classes;
            correct += logit_vals
                .data()
                .chunks(k)
                .zip(&yb)
                .filter(|(row, &y)| crate::certify::argmax(row) == y)
                .count();
            loss_sum += loss_val * yb.len() as f64;
            let grads = g.backward(loss)?;
            let grad_ts: Vec<Tensor> = pvars
                .iter()
                .zip(model.params())
                .map(|(v, (_, t))| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            let lr = lr_at(cfg, epoch * steps_per_epoch + bi, total_steps);
            opt.step(&mut model, &grad_ts, lr, cfg.weight_decay);
        }
        let lr = lr_at(cfg, epoch * steps_per_epoch, total_steps);
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
        });
        if let Some(dir) = out_dir {
            let cadence = cfg.checkpoint_every;
            if (cadence > 0 && (epoch + 1) % cadence == 0) || epoch + 1 == cfg.epochs {
                let path = dir.join(format!(
                    "{}-d{}-s{}-e{}.ckpt",
                    spec.architecture_id.as_str(),
                    spec.depth,
                    seed,
                    epoch + 1
                ));
                model.save(&path)?;
                last_ckpt = Some(path);
            }
        }
    }
    Ok((model, log))
}

/// Accuracy and mean cross-entropy over a dataset.
pub fn evaluate<M: Classifier + ?Sized>(model: &M, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Dataset("evaluate on empty dataset".into()));
    }
    const CHUNK: usize = 128;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
        let (xb, yb) = ds.gather(&idx);
        let logits = model.logits_value(&xb)?;
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&yb)
            .filter(|(row, &y)| crate::certify::argmax(row) == y)
            .count();
        loss_sum += per_sample_ce(&logits, &yb).iter().sum::<f64>();
        start += CHUNK;
    }
    Ok((correct as f64 / ds.len() as f64, loss_sum / ds.len() as f64))
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub train: TrainConfig,
    /// Attack prototypes; each is swept over the epsilon grid.
    pub attacks: Vec<AttackConfig>,
    pub eps_grid: Vec<f64>,
    /// Corrupt-then-attack evaluation cells (FGSM at each epsilon).
    pub corruptions: Vec<CorruptionSpec>,
    pub corruption_eps: Vec<f64>,
    pub run_id: String,
}

/// Train and evaluate every (spec, seed) pair. Rows are pushed to `sink` as
/// they are produced, so a failing cell leaves partial results persisted.
pub fn run_matrix(
    specs: &[ModelSpec],
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &MatrixConfig,
    mut sink: Option<&mut ReportWriter>,
) -> Result<Vec<ReportRow>> {
    if specs.is_empty() {
        return Err(Error::invalid("run_matrix needs at least one spec"));
    }
    if let Some(bad) = specs.iter().find(|s| s.num_classes != specs[0].num_classes) {
        return Err(Error::invalid(format!(
            "all specs must share num_classes; `{}` differs",
            bad.architecture_id.as_str()
        )));
    }
    let ds_digest = eval_ds.digest();
    let mut rows = Vec::new();
    let mut push = |row: ReportRow, sink: &mut Option<&mut ReportWriter>| -> Result<()> {
        if let Some(w) = sink {
            w.write_row(&row)?;
        }
        rows.push(row);
        Ok(())
    };
    for spec in specs {
        for &seed in &cfg.train.seeds {
            let (model, log) = train(spec, train_ds, &cfg.train, seed, None)?;
            let mk = |metric: &str, value: f64| {
                ReportRow::new(
                    &cfg.run_id,
                    &ds_digest,
                    spec.architecture_id.as_str(),
                    spec.depth,
                    metric,
                    value,
                )
                .with_seed(seed)
            };
            let (clean_acc, clean_loss) = evaluate(&model, eval_ds)?;
            push(mk("clean_accuracy", clean_acc), &mut sink)?;
            push(mk("clean_loss", clean_loss), &mut sink)?;
            if let (Some(first), Some(last)) = (log.initial_loss(), log.final_loss()) {
                push(mk("train_loss_initial", first), &mut sink)?;
                push(mk("train_loss_final", last), &mut sink)?;
            }
            for atk in &cfg.attacks {
                let name = match atk.kind {
                    AttackKind::Fgsm => "fgsm",
                    AttackKind::Pgd => "pgd",
                };
                let per_eps = adversarial_accuracy(&model, eval_ds, atk, &cfg.eps_grid)?;
                for (eps, acc) in per_eps {
                    if !cfg.eps_grid.contains(&eps) {
                        continue; // the prepended clean row is already reported
                    }
                    push(mk("adv_accuracy", acc).with_attack(name, eps), &mut sink)?;
                }
            }
            for cspec in &cfg.corruptions {
                let corrupted = corrupt(eval_ds, cspec)?;
                for &eps in &cfg.corruption_eps {
                    let atk = AttackConfig::fgsm(eps);
                    let (_, acc) = {
                        let per = adversarial_accuracy(&model, &corrupted, &atk, &[eps.max(1e-9)])?;
                        *per.last().unwrap()
                    };
                    push(
                        mk("corrupt_adv_accuracy", acc)
                            .with_attack("fgsm", eps)
                            .with_corruption(cspec.kind.as_str(), cspec.severity),
                        &mut sink,
                    )?;
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::layers::{Aggregation, ScaleSet};
    use crate::zoo::ArchitectureId;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            architecture_id: ArchitectureId::Baseline,
            depth: 4,
            num_classes: 2,
            in_channels: 3,
            channel_plan: vec![4, 8, 8, 8],
            scale_set: ScaleSet::new(vec![1.0], Aggregation::Average).unwrap(),
            seed: 0,
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 16,
            epochs,
            seeds: vec![0],
            ..TrainConfig::default()
        }
    }

    fn blobs2(n: usize, seed: u64) -> Dataset {
        make_synthetic(SyntheticKind::ScaledBlobs, n, 16, 2, seed).unwrap()
    }

    #[test]
    fn separable_data_is_learned() {
        let ds = blobs2(32, 1);
        let (model, log) = train(&tiny_spec(), &ds, &tiny_cfg(15), 0, None).unwrap();
        let (acc, _) = evaluate(&model, &ds).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = blobs2(16, 2);
        let spec = tiny_spec();
        let mut cfg = tiny_cfg(2);
        cfg.learning_rate = 0.0;
        cfg.weight_decay = 0.0;
        let before = build(&{ let mut s = spec.clone(); s.seed = 0; s }).unwrap();
        let (after, _) = train(&spec, &ds, &cfg, 0, None).unwrap();
        for ((_, a), (_, b)) in before.params().iter().zip(after.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = blobs2(16, 3);
        let cfg = tiny_cfg(3);
        let (a, _) = train(&tiny_spec(), &ds, &cfg, 7, None).unwrap();
        let (b, _) = train(&tiny_spec(), &ds, &cfg, 7, None).unwrap();
        assert_eq!(a.state_digest(), b.state_digest());
        let (c, _) = train(&tiny_spec(), &ds, &cfg, 8, None).unwrap();
        assert_ne!(a.state_digest(), c.state_digest());
    }

    #[test]
    fn adam_also_trains() {
        let ds = blobs2(16, 4);
        let mut cfg = tiny_cfg(8);
        cfg.optimizer = Optimizer::Adam;
        cfg.learning_rate = 0.003;
        let (_, log) = train(&tiny_spec(), &ds, &cfg, 0, None).unwrap();
        assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg(1);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(1);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let ds = make_synthetic(SyntheticKind::ScaledBlobs, 12, 16, 4, 0).unwrap();
        assert!(train(&tiny_spec(), &ds, &tiny_cfg(1), 0, None).is_err());
    }

    #[test]
    fn checkpoints_are_written_on_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let ds = blobs2(16, 5);
        let mut cfg = tiny_cfg(4);
        cfg.checkpoint_every = 2;
        train(&tiny_spec(), &ds, &cfg, 0, Some(dir.path())).unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert!(names.iter().any(|n| n.contains("-e2.ckpt")), "{names:?}");
        assert!(names.iter().any(|n| n.contains("-e4.ckpt")), "{names:?}");
    }

    #[test]
    fn adversarial_training_runs_and_learns() {
        let ds = blobs2(16, 6);
        let mut cfg = tiny_cfg(4);
        cfg.adversarial_training = Some(TrainConfig::default_at_attack());
        let (_, log) = train(&tiny_spec(), &ds, &cfg, 0, None).unwrap();
        assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
    }

    #[test]
    fn evaluate_contract() {
        let ds = blobs2(16, 7);
        let (model, _) = train(&tiny_spec(), &ds, &tiny_cfg(15), 0, None).unwrap();
        let (acc, loss) = evaluate(&model, &ds).unwrap();
        assert!(acc >= 0.99 && loss.is_finite());
    }

    #[test]
    fn matrix_of_one_reduces_to_train_plus_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let ds = blobs2(16, 8);
        let cfg = MatrixConfig {
            train: tiny_cfg(2),
            attacks: vec![AttackConfig::fgsm(0.0)],
            eps_grid: vec![0.02, 0.04],
            corruptions: vec![],
            corruption_eps: vec![],
            run_id: "test".into(),
        };
        let path = dir.path().join("rows.jsonl");
        let mut w = ReportWriter::create(&path).unwrap();
        let rows = run_matrix(&[tiny_spec()], &ds, &ds, &cfg, Some(&mut w)).unwrap();
        // 1 spec x 1 seed x (clean acc + clean loss + 2 train-loss rows) +
        // 1 attack x 2 epsilons
        let adv: Vec<_> = rows.iter().filter(|r| r.metric == "adv_accuracy").collect();
        assert_eq!(adv.len(), 2);
        assert_eq!(rows.len(), 6);
        assert_eq!(crate::report::read_rows(&path).unwrap().len(), rows.len());
        // matches a direct train+evaluate
        let (model, _) = train(&tiny_spec(), &ds, &cfg.train, 0, None).unwrap();
        let (acc, _) = evaluate(&model, &ds).unwrap();
        let clean = rows.iter().find(|r| r.metric == "clean_accuracy").unwrap();
        assert_eq!(clean.value, acc);
    }
}

//! Margin and CLEVER-style certified-radius estimation, orbit gradient
//! diagnostics, and the maximum-invariant-perturbation search.

use crate::attacks::{attack, AttackConfig};
use crate::error::{Error, Result};
use crate::layers::P4;
use crate::tensor::{Graph, Tensor};
use crate::zoo::{Classifier, LinearModel, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Global maximum of sampled gradient norms (default, conservative-leaning).
    MaxSample,
    /// Reverse-Weibull location estimate from per-batch maxima (experimental).
    WeibullMle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub radius: f64,
    pub batches: usize,
    pub samples_per_batch: usize,
    pub q: f64,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            radius: 0.3,
            batches: 50,
            samples_per_batch: 128,
            q: 1.0,
            estimator: Estimator::MaxSample,
            seed: 0,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid("certify radius must be positive"));
        }
        if self.batches == 0 || self.samples_per_batch == 0 {
            return Err(Error::invalid("batches and samples_per_batch must be positive"));
        }
        if !(self.q >= 1.0) {
            return Err(Error::invalid("q must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginValue {
    pub sample: usize,
    pub predicted: usize,
    /// (competitor j, g_{c,j}) for every j != c.
    pub margins: Vec<(usize, f64)>,
}

impl MarginValue {
    pub fn min_margin(&self) -> f64 {
        self.margins
            .iter()
            .map(|&(_, m)| m)
            .fold(f64::INFINITY, f64::min)
    }
}

/// First index attaining the row maximum (deterministic tie-break).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn margins<M: Classifier + ?Sized>(model: &M, x: &Tensor) -> Result<MarginValue> {
    let logits = model.logits_value(x)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits in margin computation".into()));
    }
    margins_of_row(logits.data(), 0)
}

pub fn margins_of_row(row: &[f64], sample: usize) -> Result<MarginValue> {
    let c = argmax(row);
    let margins = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != c)
        .map(|(j, &v)| (j, row[c] - v))
        .collect();
    Ok(MarginValue { sample, predicted: c, margins })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub competitor: usize,
    pub l_hat: f64,
    pub q: f64,
    pub samples: usize,
    pub radius: f64,
    pub estimator: Estimator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertRadius {
    Bounded(f64),
    /// All sampled margin gradients vanished: the margin looks locally
    /// constant and no finite certified radius can be quoted.
    Unbounded,
}

impl CertRadius {
    pub fn bounded(&self) -> Option<f64> {
        match self {
            CertRadius::Bounded(v) => Some(*v),
            CertRadius::Unbounded => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CleverScore {
    pub sample: usize,
    pub predicted: usize,
    pub eps_min: CertRadius,
    /// per-competitor breakdown: (j, margin, Lipschitz estimate).
    pub per_competitor: Vec<(usize, f64, LipschitzEstimate)>,
}

/// Gradient of the margin g_{c,j} at each of a batch of points, q-norms
/// returned per point. One tape serves the whole batch: the loss sums the
/// per-sample margins, whose gradients are row-independent.
fn margin_grad_norms<M: Classifier + ?Sized>(
    model: &M,
    points: &Tensor,
    c: usize,
    j: usize,
    q: f64,
) -> Result<Vec<f64>> {
    let n = points.shape()[0];
    let k = model.num_classes();
    let g = Graph::new();
    let xv = g.input(points.clone(), true);
    let logits = model.forward_eval(&g, xv)?;
    let mut mask = Tensor::zeros(&[n, k]);
    for i in 0..n {
        mask.data_mut()[i * k + c] = 1.0;
        mask.data_mut()[i * k + j] = -1.0;
    }
    let mv = g.constant(mask);
    let prod = g.mul(logits, mv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let dx = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(points.shape()));
    if !dx.all_finite() {
        return Err(Error::NonFinite("margin gradient".into()));
    }
    let stride = points.numel() / n;
    Ok((0..n)
        .map(|i| {
            let row = &dx.data()[i * stride..(i + 1) * stride];
            norm_slice(row, q)
        })
        .collect())
}

fn norm_slice(v: &[f64], q: f64) -> f64 {
    if q == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else if q.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else {
        v.iter().map(|x| x.abs().powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

/// Reverse-Weibull location estimate from batch maxima. Degenerate spreads
/// fall back to the plain maximum.
fn weibull_location(maxima: &[f64]) -> f64 {
    let m = maxima.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lo = maxima.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let spread = m - lo;
    if spread < 1e-12 {
        return m;
    }
    // profile log-likelihood over the location a > max; for each a the
    // Weibull shape/scale of z_i = a - m_i are fit by the standard fixed
    // point, then a is chosen by golden-section search
    let loglik = |a: f64| -> f64 {
        let z: Vec<f64> = maxima.iter().map(|&v| (a - v).max(1e-300)).collect();
        let mut k = 1.0f64;
        for _ in 0..60 {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for &zi in &z {
                let zk = zi.powf(k);
                let lz = zi.ln();
                s0 += zk;
                s1 += zk * lz;
                s2 += lz;
            }
            let denom = s1 / s0 - s2 / z.len() as f64;
            if !(denom > 1e-12) {
                break;
            }
            let nk = 1.0 / denom;
            if (nk - k).abs() < 1e-10 * k.max(1.0) {
                k = nk;
                break;
            }
            k = 0.5 * (k + nk);
        }
        let lam = (z.iter().map(|&zi| zi.powf(k)).sum::<f64>() / z.len() as f64).powf(1.0 / k);
        z.iter()
            .map(|&zi| {
                k.ln() - k * lam.ln() + (k - 1.0) * zi.ln() - (zi / lam).powf(k)
            })
            .sum()
    };
    let (mut a, mut b) = (m + 1e-9 * spread.max(1e-9), m + 10.0 * spread);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c1 = b - phi * (b - a);
        let c2 = a + phi * (b - a);
        if loglik(c1) < loglik(c2) {
            a = c1;
        } else {
            b = c2;
        }
    }
    0.5 * (a + b)
}

pub fn clever_score<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    cfg: &CertifyConfig,
) -> Result<CleverScore> {
    cfg.validate()?;
    let mv = margins(model, x)?;
    let c = mv.predicted;
    let k = model.num_classes();
    let n_s = cfg.samples_per_batch;
    let stride = x.numel();
    let mut per_competitor = Vec::with_capacity(k - 1);
    let mut eps_min = CertRadius::Unbounded;
    for &(j, margin) in &mv.margins {
        let mut batch_maxima = Vec::with_capacity(cfg.batches);
        let mut global_max = 0.0f64;
        for b in 0..cfg.batches {
            // deterministic per (competitor, batch) seed
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (j as u64).wrapping_mul(0x9e37_79b9) ^ ((b as u64) << 24),
            );
            let mut pts = vec![0.0f64; n_s * stride];
            for i in 0..n_s {
                for (d, &xv) in x.data().iter().enumerate() {
                    pts[i * stride + d] = xv + rng.gen_range(-cfg.radius..=cfg.radius);
                }
            }
            let mut shape = vec![n_s];
            shape.extend_from_slice(&x.shape()[1..]);
            let points = Tensor::new(shape, pts)?;
            let norms = margin_grad_norms(model, &points, c, j, cfg.q)?;
            let bm = norms.iter().fold(0.0f64, |a, &v| a.max(v));
            batch_maxima.push(bm);
            global_max = global_max.max(bm);
        }
        // the center point participates so L-hat >= |grad at x|
        let center = margin_grad_norms(model, x, c, j, cfg.q)?[0];
        global_max = global_max.max(center);
        let l_hat = match cfg.estimator {
            Estimator::MaxSample => global_max,
            Estimator::WeibullMle => weibull_location(&batch_maxima).max(global_max),
        };
        let est = LipschitzEstimate {
            competitor: j,
            l_hat,
            q: cfg.q,
            samples: cfg.batches * n_s + 1,
            radius: cfg.radius,
            estimator: cfg.estimator,
        };
        if l_hat > 0.0 {
            let ratio = margin / l_hat;
            eps_min = match eps_min {
                CertRadius::Unbounded => CertRadius::Bounded(ratio),
                CertRadius::Bounded(cur) => CertRadius::Bounded(cur.min(ratio)),
            };
        }
        per_competitor.push((j, margin, est));
    }
    Ok(CleverScore {
        sample: 0,
        predicted: c,
        eps_min,
        per_competitor,
    })
}

/// Closed-form minimal l-infinity flipping radius for a linear model:
/// min_j g_{c,j}(x) / ||w_c - w_j||_1, plus the critical competitor.
pub fn linear_flip_radius(m: &LinearModel, x: &Tensor) -> Result<(f64, usize)> {
    let mv = margins(m, x)?;
    let mut best = (f64::INFINITY, usize::MAX);
    for &(j, margin) in &mv.margins {
        let wd = m.weight_diff(mv.predicted, j);
        let l1: f64 = wd.iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            let r = margin / l1;
            if r < best.0 {
                best = (r, j);
            }
        }
    }
    if best.1 == usize::MAX {
        return Err(Error::invalid("all margin gradients vanish"));
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// gradient q-norms per rotation r in 0..4, one row per competitor.
    pub norms: Vec<Vec<f64>>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Margin-gradient q-norms over the P4 orbit of x, one row per competitor
/// (reported for any model; Theorem 1 only asserts equality for fully
/// equivariant ones).
pub fn orbit_gradient_norms<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    q: f64,
) -> Result<Vec<Vec<f64>>> {
    let mv = margins(model, x)?;
    let mut rows = Vec::with_capacity(mv.margins.len());
    for &(j, _) in &mv.margins {
        let mut row = Vec::with_capacity(4);
        for r in 0..4 {
            let xr = P4::act_input(x, r);
            row.push(margin_grad_norms(model, &xr, mv.predicted, j, q)?[0]);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Numerical Theorem 1 check. Refuses models whose architecture does not
/// satisfy the theorem's hypothesis; report such models through
/// `orbit_gradient_norms` instead.
pub fn theorem1_check(model: &Model, x: &Tensor, q: f64, tolerance: f64) -> Result<Theorem1Report> {
    if !model.spec().architecture_id.is_fully_equivariant() {
        return Err(Error::invalid(format!(
            "theorem1_check requires a fully equivariant model; `{}` does not satisfy the \
             hypothesis (use the diagnostics path for reporting)",
            model.spec().architecture_id.as_str()
        )));
    }
    let norms = orbit_gradient_norms(model, x, q)?;
    let mut max_dev = 0.0f64;
    for row in &norms {
        for &v in &row[1..] {
            max_dev = max_dev.max((v - row[0]).abs());
        }
    }
    Ok(Theorem1Report {
        norms,
        max_deviation: max_dev,
        tolerance,
        passed: max_dev <= tolerance,
    })
}

/// Gradient of logit j with respect to the input at x.
fn logit_gradient<M: Classifier + ?Sized>(model: &M, x: &Tensor, j: usize) -> Result<Tensor> {
    let g = Graph::new();
    let xv = g.input(x.clone(), true);
    let logits = model.forward_eval(&g, xv)?;
    let lj = g.logit_select(logits, 0, j)?;
    let grads = g.backward(lj)?;
    Ok(grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Orbit-averaged gradient field: aligned gradients (inverse rotation of the
/// gradient at the rotated input) averaged over the listed P4 elements.
pub fn orbit_averaged_gradient<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    j: usize,
    elements: &[usize],
) -> Result<Tensor> {
    if elements.is_empty() {
        return Err(Error::invalid("orbit average needs at least one group element"));
    }
    let mut acc = Tensor::zeros(x.shape());
    for &r in elements {
        let xr = P4::act_input(x, r);
        let grad = logit_gradient(model, &xr, j)?;
        let aligned = P4::act_input(&grad, P4::inverse(r));
        for (a, g) in acc.data_mut().iter_mut().zip(aligned.data()) {
            *a += g;
        }
    }
    let n = elements.len() as f64;
    Ok(acc.map(|v| v / n))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub ratio: f64,
    pub on_orbit_change: f64,
    pub off_orbit_change_mean: f64,
    pub trials: usize,
    pub angle_deg: f64,
    pub step: f64,
}

/// Directional suppression diagnostic. The discrete group has no tangent, so
/// a small continuous bilinear rotation stands in for the orbit direction —
/// an approximation, flagged as such in reports.
pub fn suppression_diagnostic<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    angle_deg: f64,
    trials: usize,
    step: f64,
    seed: u64,
) -> Result<SuppressionReport> {
    if trials < 10 {
        return Err(Error::invalid("suppression diagnostic needs at least 10 trials"));
    }
    let mv = margins(model, x)?;
    let c = mv.predicted;
    if step == 0.0 {
        return Ok(SuppressionReport {
            ratio: 1.0,
            on_orbit_change: 0.0,
            off_orbit_change_mean: 0.0,
            trials,
            angle_deg,
            step,
        });
    }
    let rotated = crate::tensor::kernels::rotate_bilinear_value(x, angle_deg.to_radians());
    let mut tangent: Vec<f64> = rotated
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a - b)
        .collect();
    let tnorm = norm_slice(&tangent, 2.0);
    if tnorm < 1e-9 {
        return Err(Error::invalid(format!(
            "degenerate orbit tangent: a {angle_deg} degree rotation changes the input by only \
             {tnorm:.2e} (rotationally symmetric input?)"
        )));
    }
    for v in &mut tangent {
        *v /= tnorm;
    }
    let g0 = logit_gradient(model, x, c)?;
    let perturbed = |dir: &[f64]| -> Result<f64> {
        let xp = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(dir)
                .map(|(a, d)| a + step * d)
                .collect(),
        )?;
        let gp = logit_gradient(model, &xp, c)?;
        Ok(gp
            .data()
            .iter()
            .zip(g0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    };
    let on_orbit = perturbed(&tangent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut off_sum = 0.0;
    for _ in 0..trials {
        use rand_distr::{Distribution, StandardNormal};
        let mut dir: Vec<f64> = (0..x.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        // orthogonalize against the orbit tangent, then normalize
        let dot: f64 = dir.iter().zip(&tangent).map(|(a, b)| a * b).sum();
        for (d, t) in dir.iter_mut().zip(&tangent) {
            *d -= dot * t;
        }
        let n = norm_slice(&dir, 2.0);
        for d in &mut dir {
            *d /= n;
        }
        off_sum += perturbed(&dir)?;
    }
    let off_mean = off_sum / trials as f64;
    let ratio = if on_orbit == 0.0 {
        if off_mean == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        off_mean / on_orbit
    };
    Ok(SuppressionReport {
        ratio,
        on_orbit_change: on_orbit,
        off_orbit_change_mean: off_mean,
        trials,
        angle_deg,
        step,
    })
}

/// Bisection over epsilon with a boolean "prediction preserved" oracle.
/// Returns the largest tested epsilon with a preserved prediction; the flip
/// lies within `tol` above it under a monotone oracle.
fn bisect_preserved(
    mut preserved: impl FnMut(f64) -> Result<bool>,
    eps_hi: f64,
    tol: f64,
) -> Result<f64> {
    if preserved(eps_hi)? {
        return Ok(eps_hi);
    }
    let (mut lo, mut hi) = (0.0f64, eps_hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if preserved(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Largest attack budget under which the model's prediction on x survives.
/// Attack success is treated as monotone in epsilon for the bisection — an
/// approximation for deep models, recorded with results.
pub fn max_invariant_perturbation<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    eps_hi: f64,
    tol: f64,
) -> Result<f64> {
    if !(eps_hi > 0.0 && eps_hi <= 1.0) {
        return Err(Error::invalid("eps_hi must lie in (0,1]"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let pred = model.predict_batch(x)?[0];
    if pred != label {
        return Err(Error::invalid(
            "max_invariant_perturbation is undefined for a misclassified sample",
        ));
    }
    bisect_preserved(
        |eps| {
            let xa = attack(model, x, &[label], &cfg.with_epsilon(eps))?;
            Ok(model.predict_batch(&xa)?[0] == label)
        },
        eps_hi,
        tol,
    )
}

pub const BISECT_TOL: f64 = 1.0 / 512.0;

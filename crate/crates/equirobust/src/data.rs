//! Dataset ingestion (CIFAR binary layout), synthetic generators whose
//! classes are defined by orientation/scale, and the corruption pipeline.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3*32*32 planar pixels

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor, // (N, C, H, W) in [0,1]
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!(
                "images must be (N,C,H,W), got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Dataset("dataset must be nonempty".into()));
        }
        if labels.len() != n {
            return Err(Error::Dataset(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("pixels must lie in [0,1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = (
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let stride = c * h * w;
        Tensor::new(
            vec![1, c, h, w],
            self.images.data()[i * stride..(i + 1) * stride].to_vec(),
        )
        .unwrap()
    }

    /// Rows i in `idx` gathered into a new batch tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let stride = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![idx.len(), c, h, w], data).unwrap(), labels)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        crate::zoo::hex(&h.finalize())
    }
}

pub fn load_cifar_binary(paths: &[impl AsRef<Path>], num_classes: usize) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Dataset("no CIFAR files given".into()));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut hash = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: size {} is not a positive multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        hash.update(&bytes);
        for rec in bytes.chunks(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= num_classes {
                return Err(Error::Dataset(format!(
                    "{}: label byte {label} ≥ {num_classes}",
                    p.as_ref().display()
                )));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        num_classes,
        "cifar",
        format!("cifar-binary sha256:{}", crate::zoo::hex(&hash.finalize())),
    )
}

pub fn export_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let shape = ds.images.shape();
    if shape[1] != 3 || shape[2] != 32 || shape[3] != 32 {
        return Err(Error::Dataset(format!(
            "CIFAR layout requires 3x32x32 images, got {:?}",
            shape
        )));
    }
    let stride = 3 * 32 * 32;
    let mut f = std::fs::File::create(path)?;
    for i in 0..ds.len() {
        f.write_all(&[ds.labels[i] as u8])?;
        let px: Vec<u8> = ds.images.data()[i * stride..(i + 1) * stride]
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        f.write_all(&px)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    OrientedBars,
    ScaledBlobs,
}

/// Seed-reproducible balanced synthetic datasets.
///
/// oriented_bars: each group of k samples shares one base pattern emitted at
/// k quarter-turn rotations; the label is the rotation count, so
/// class(rot90(x)) = (class(x)+1) mod k holds by construction.
///
/// scaled_blobs: anisotropic soft blobs whose class is a size tier, with
/// random continuous orientation as a nuisance factor.
pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    image_size: usize,
    k: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("n must be positive".into()));
    }
    if k == 0 || n % k != 0 {
        return Err(Error::Dataset(format!(
            "n={n} must be a positive multiple of k={k} for balanced classes"
        )));
    }
    if image_size < 8 {
        return Err(Error::Dataset("image_size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (3usize, image_size, image_size);
    let stride = c * h * w;
    let mut data = vec![0.0f64; n * stride];
    let mut labels = vec![0usize; n];
    match kind {
        SyntheticKind::OrientedBars => {
            if k > 4 {
                return Err(Error::Dataset(format!(
                    "oriented_bars supports at most 4 classes, got {k}"
                )));
            }
            let groups = n / k;
            for g in 0..groups {
                let base = bar_base(h, w, &mut rng);
                for r in 0..k {
                    let img = kernels::rot90_value(&base, r);
                    let i = g * k + r;
                    labels[i] = r;
                    data[i * stride..(i + 1) * stride].copy_from_slice(img.data());
                }
            }
        }
        SyntheticKind::ScaledBlobs => {
            for i in 0..n {
                let class = i % k;
                labels[i] = class;
                let img = blob_image(h, w, class, k, &mut rng);
                data[i * stride..(i + 1) * stride].copy_from_slice(img.data());
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, c, h, w], data)?,
        labels,
        k,
        "synthetic",
        format!("synthetic:{kind:?} n={n} size={image_size} k={k} seed={seed}"),
    )
}

/// Horizontal bar with random row band, width, and per-channel intensity,
/// over a dim textured background.
fn bar_base(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut img = Tensor::zeros(&[1, 3, h, w]);
    let row = rng.gen_range(h / 4..3 * h / 4);
    let thickness = rng.gen_range(1..=h / 8.max(1)).max(1);
    let lo = rng.gen_range(0..w / 4);
    let hi = rng.gen_range(3 * w / 4..w);
    let tint: [f64; 3] = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
    ];
    let d = img.data_mut();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = rng.gen_range(0.0..0.12);
                if y >= row && y < (row + thickness).min(h) && x >= lo && x < hi {
                    v = tint[ch] - rng.gen_range(0.0..0.08);
                }
                d[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Soft elliptical blob; class selects the size tier, orientation and
/// eccentricity are random nuisances.
fn blob_image(h: usize, w: usize, class: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let min_r = h as f64 * 0.08;
    let max_r = h as f64 * 0.38;
    let t = if k == 1 { 0.0 } else { class as f64 / (k - 1) as f64 };
    let radius = min_r + t * (max_r - min_r);
    let ecc = rng.gen_range(0.55..0.9);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let cy = h as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let cx = w as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let tint: [f64; 3] = [
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
    ];
    let mut img = Tensor::zeros(&[1, 3, h, w]);
    let d = img.data_mut();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                let q = (u / radius).powi(2) + (v / (radius * ecc)).powi(2);
                let val = tint[ch] * (-q * 2.0).exp() + rng.gen_range(0.0..0.05);
                d[(ch * h + y) * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Saturate,
    Pixelate,
    DefocusBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturate,
        CorruptionKind::Pixelate,
        CorruptionKind::DefocusBlur,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::DefocusBlur => "defocus_blur",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8, // 1..=5
    pub seed: u64,
}

/// Severity parameter tables, fixed constants versioned with the code.
pub fn corruption_param(kind: CorruptionKind, severity: u8) -> Result<f64> {
    if !(1..=5).contains(&severity) {
        return Err(Error::invalid(format!(
            "severity must be 1..=5, got {severity}"
        )));
    }
    let i = severity as usize - 1;
    Ok(match kind {
        CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10][i], // sigma
        CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0][i],  // lambda
        CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.05, 0.07, 0.10][i],  // rate
        CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.20, 0.30][i],    // offset
        CorruptionKind::Contrast => [0.75, 0.60, 0.45, 0.30, 0.20][i],      // gain
        CorruptionKind::Saturate => [1.5, 2.0, 3.0, 4.0, 5.0][i],           // s-curve
        CorruptionKind::Pixelate => [2.0, 4.0, 8.0, 16.0, 32.0][i],         // factor
        CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 5.0][i],        // radius
    })
}

pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let param = corruption_param(spec.kind, spec.severity)?;
    let shape = ds.images.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let stride = c * h * w;
    let mut data = vec![0.0f64; ds.len() * stride];
    for i in 0..ds.len() {
        let img = ds.image(i);
        // per-image derived seed keeps determinism under any worker split
        let out = apply_corruption(&img, spec.kind, param, spec.seed.wrapping_add(i as u64))?;
        data[i * stride..(i + 1) * stride].copy_from_slice(out.data());
    }
    Dataset::new(
        Tensor::new(shape, data)?,
        ds.labels.clone(),
        ds.num_classes,
        ds.split.clone(),
        format!(
            "{} | corrupt:{} severity={} seed={}",
            ds.provenance,
            spec.kind.as_str(),
            spec.severity,
            spec.seed
        ),
    )
}

/// Apply one corruption to a (1,C,H,W) image with an explicit parameter.
/// Outputs are re-clipped to [0,1].
pub fn apply_corruption(
    img: &Tensor,
    kind: CorruptionKind,
    param: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clipped = |t: Tensor| t.map(|v| v.clamp(0.0, 1.0));
    Ok(match kind {
        CorruptionKind::GaussianNoise => {
            use rand_distr::{Distribution, StandardNormal};
            let noise: Vec<f64> = (0..img.numel())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * param
                })
                .collect();
            clipped(Tensor::new(
                img.shape().to_vec(),
                img.data().iter().zip(&noise).map(|(a, b)| a + b).collect(),
            )?)
        }
        CorruptionKind::ShotNoise => {
            use rand_distr::{Distribution, Poisson};
            let data: Vec<f64> = img
                .data()
                .iter()
                .map(|&v| {
                    let lam = v * param;
                    if lam <= 0.0 {
                        0.0
                    } else {
                        let p = Poisson::new(lam).expect("positive lambda");
                        let s: f64 = p.sample(&mut rng);
                        s / param
                    }
                })
                .collect();
            clipped(Tensor::new(img.shape().to_vec(), data)?)
        }
        CorruptionKind::ImpulseNoise => {
            let data: Vec<f64> = img
                .data()
                .iter()
                .map(|&v| {
                    if rng.gen::<f64>() < param {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(img.shape().to_vec(), data)?
        }
        CorruptionKind::Brightness => clipped(img.map(|v| v + param)),
        CorruptionKind::Contrast => {
            let mean = img.data().iter().sum::<f64>() / img.numel() as f64;
            clipped(img.map(|v| (v - mean) * param + mean))
        }
        CorruptionKind::Saturate => {
            // smooth S-curve, identity at param=1
            clipped(img.map(|v| {
                let a = v.max(0.0).powf(param);
                let b = (1.0 - v).max(0.0).powf(param);
                if a + b == 0.0 {
                    v
                } else {
                    a / (a + b)
                }
            }))
        }
        CorruptionKind::Pixelate => {
            let d = param as usize;
            let (oh, ow) = ((img.shape()[2] / d).max(1), (img.shape()[3] / d).max(1));
            let down = kernels::resize_nearest_value(img, oh, ow);
            kernels::resize_nearest_value(&down, img.shape()[2], img.shape()[3])
        }
        CorruptionKind::DefocusBlur => clipped(disk_blur(img, param)),
    })
}

/// Depthwise convolution with a normalized disk kernel, reflect padding.
fn disk_blur(img: &Tensor, radius: f64) -> Tensor {
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut kernel = vec![0.0f64; size * size];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64).sqrt() <= radius + 0.5 {
                kernel[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
                total += 1.0;
            }
        }
    }
    for v in &mut kernel {
        *v /= total;
    }
    let (_, c, h, w) = kernels::dims4(img);
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let kv = kernel[((dy + r) as usize) * size + (dx + r) as usize];
                        if kv == 0.0 {
                            continue;
                        }
                        let sy = reflect_index(y + dy, h as isize);
                        let sx = reflect_index(x + dx, w as isize);
                        acc += kv * img.at4(0, ch, sy as usize, sx as usize);
                    }
                }
                out.set4(0, ch, y as usize, x as usize, acc);
            }
        }
    }
    out
}

fn reflect_index(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j
}

pub fn subsample(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_per_class * ds.num_classes);
    for (class, idx) in per_class.iter_mut().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::Dataset(format!(
                "class {class} has only {} samples, requested {n_per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..n_per_class]);
    }
    chosen.shuffle(&mut rng);
    let (images, labels) = ds.gather(&chosen);
    Dataset::new(
        images,
        labels,
        ds.num_classes,
        ds.split.clone(),
        format!("{} | subsample n_per_class={n_per_class} seed={seed}", ds.provenance),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Dataset {
        make_synthetic(SyntheticKind::ScaledBlobs, 12, 16, 4, seed).unwrap()
    }

    #[test]
    fn dataset_invariants_enforced() {
        let img = Tensor::zeros(&[2, 3, 4, 4]);
        assert!(Dataset::new(img.clone(), vec![0], 2, "t", "p").is_err()); // label count
        assert!(Dataset::new(img.clone(), vec![0, 5], 2, "t", "p").is_err()); // label range
        let bad = Tensor::full(&[1, 3, 4, 4], 1.5);
        assert!(Dataset::new(bad, vec![0], 2, "t", "p").is_err()); // pixel range
        assert!(Dataset::new(img, vec![0, 1], 2, "t", "p").is_ok());
    }

    #[test]
    fn synthetic_is_seed_deterministic_and_balanced() {
        let a = tiny(42);
        let b = tiny(42);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images, tiny(43).images);
        for k in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 3);
        }
    }

    #[test]
    fn synthetic_rejects_bad_shapes() {
        assert!(make_synthetic(SyntheticKind::OrientedBars, 0, 16, 4, 0).is_err());
        assert!(make_synthetic(SyntheticKind::OrientedBars, 10, 16, 4, 0).is_err()); // 10 % 4
        assert!(make_synthetic(SyntheticKind::OrientedBars, 8, 16, 5, 0).is_err()); // k > 4
    }

    #[test]
    fn oriented_bars_rotation_relabels_by_construction() {
        let ds = make_synthetic(SyntheticKind::OrientedBars, 16, 16, 4, 9).unwrap();
        // samples come in groups of 4 sharing a base: rot90 of the class-c
        // member equals the class-(c+1 mod 4) member
        for g in 0..4 {
            for c in 0..4 {
                let img = ds.image(g * 4 + c);
                let next = ds.image(g * 4 + (c + 1) % 4);
                let rot = kernels::rot90_value(&img, 1);
                assert_eq!(rot, next, "group {g} class {c}");
                assert_eq!(ds.labels[g * 4 + c], c);
            }
        }
    }

    #[test]
    fn scaled_blobs_grow_with_class() {
        let ds = make_synthetic(SyntheticKind::ScaledBlobs, 40, 16, 4, 3).unwrap();
        // mean mass strictly increases with size tier
        let mut mass = vec![0.0f64; 4];
        let mut count = vec![0usize; 4];
        for i in 0..ds.len() {
            let img = ds.image(i);
            mass[ds.labels[i]] += img.data().iter().sum::<f64>();
            count[ds.labels[i]] += 1;
        }
        for k in 0..4 {
            mass[k] /= count[k] as f64;
        }
        assert!(mass.windows(2).all(|w| w[0] < w[1]), "{mass:?}");
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // hand-built 2-record file
        let mut bytes = vec![1u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        bytes.push(0u8);
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&[&path], 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.images.data()[0], 1.0); // byte 255 -> exactly 1.0
        assert!((ds.images.data()[3072 + 1] - 1.0 / 255.0).abs() < 1e-15);

        // export and re-load reproduces bytes
        let out = dir.path().join("out.bin");
        export_cifar_binary(&ds, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);

        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(load_cifar_binary(&[&path], 10).is_err());
        std::fs::write(&path, b"").unwrap();
        assert!(load_cifar_binary(&[&path], 10).is_err());
        // label out of range
        let mut bad = vec![9u8];
        bad.extend(std::iter::repeat(0u8).take(3072));
        std::fs::write(&path, &bad).unwrap();
        assert!(load_cifar_binary(&[&path], 4).is_err());
    }

    #[test]
    fn corruption_identity_cases() {
        let ds = tiny(1);
        let img = ds.image(0);
        let g = apply_corruption(&img, CorruptionKind::GaussianNoise, 0.0, 7).unwrap();
        assert_eq!(g, img);
        let c = apply_corruption(&img, CorruptionKind::Contrast, 1.0, 7).unwrap();
        assert!(c.max_abs_diff(&img) < 1e-12);
        let s = apply_corruption(&img, CorruptionKind::Saturate, 1.0, 7).unwrap();
        assert!(s.max_abs_diff(&img) < 1e-12);
        let b = apply_corruption(&img, CorruptionKind::Brightness, 0.0, 7).unwrap();
        assert_eq!(b, img);
    }

    #[test]
    fn pixelate_checkerboard_hand_oracle() {
        // 4x4 checkerboard, single channel replicated to 3
        let mut img = Tensor::zeros(&[1, 3, 4, 4]);
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    img.set4(0, ch, y, x, ((x + y) % 2) as f64);
                }
            }
        }
        let out = apply_corruption(&img, CorruptionKind::Pixelate, 2.0, 0).unwrap();
        // nearest downscale picks source pixels (1,1),(1,3),(3,1),(3,3), all
        // value 0; upscale paints constant blocks
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corruption_pipeline_is_deterministic_and_in_range() {
        let ds = tiny(5);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { kind, severity: 3, seed: 11 };
            let a = corrupt(&ds, &spec).unwrap();
            let b = corrupt(&ds, &spec).unwrap();
            assert_eq!(a.digest(), b.digest(), "{}", kind.as_str());
            assert!(
                a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{}",
                kind.as_str()
            );
        }
    }

    #[test]
    fn severity_tables_are_monotone() {
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::Brightness,
            CorruptionKind::Pixelate,
        ] {
            let p: Vec<f64> = (1..=5).map(|s| corruption_param(kind, s).unwrap()).collect();
            assert!(p.windows(2).all(|w| w[0] < w[1]), "{}", kind.as_str());
        }
        // contrast gain decreases (distance from identity grows)
        let p: Vec<f64> = (1..=5)
            .map(|s| corruption_param(CorruptionKind::Contrast, s).unwrap())
            .collect();
        assert!(p.windows(2).all(|w| w[0] > w[1]));
        assert!(corruption_param(CorruptionKind::Contrast, 0).is_err());
        assert!(corruption_param(CorruptionKind::Contrast, 6).is_err());
    }

    #[test]
    fn defocus_blur_preserves_constant_images() {
        let img = Tensor::full(&[1, 3, 8, 8], 0.4);
        let out = apply_corruption(&img, CorruptionKind::DefocusBlur, 2.0, 0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn subsample_is_balanced_and_deterministic() {
        let ds = make_synthetic(SyntheticKind::ScaledBlobs, 40, 16, 4, 2).unwrap();
        let a = subsample(&ds, 5, 3).unwrap();
        let b = subsample(&ds, 5, 3).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.len(), 20);
        for k in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 5);
        }
        assert!(subsample(&ds, 11, 3).is_err());
        // identity-size subsample keeps every sample
        let full = subsample(&ds, 10, 3).unwrap();
        assert_eq!(full.len(), ds.len());
    }
}

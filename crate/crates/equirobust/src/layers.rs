//! Group-equivariant building blocks: P4 lifting and group convolutions,
//! discrete scale-equivariant convolution, group pooling, group-aware batch
//! normalization, and branch fusion.
//!
//! P4 filter rotation is an index permutation of kernel entries, never an
//! interpolation, so all rotation laws hold to float reassociation error.

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, Padding, Tensor, Var};
use serde::{Deserialize, Serialize};

/// The discrete planar rotation group {0, 90, 180, 270} acting on pixel
/// grids by permutation. `T_r` is the input-space action; the feature-space
/// representation additionally shifts the orientation axis.
#[derive(Clone, Copy, Debug, Default)]
pub struct P4;

impl P4 {
    pub const ELEMENTS: [usize; 4] = [0, 1, 2, 3];

    pub fn compose(a: usize, b: usize) -> usize {
        (a + b) % 4
    }

    pub fn inverse(a: usize) -> usize {
        (4 - a % 4) % 4
    }

    /// Input-space action T_r: spatial rotation by r quarter turns.
    pub fn act_input(t: &Tensor, r: usize) -> Tensor {
        crate::tensor::kernels::rot90_value(t, r)
    }

    /// Feature-space action rho(r) on a P4 feature map: spatial rotation
    /// plus a cyclic shift of the orientation sub-axis.
    pub fn act_feature(t: &Tensor, r: usize) -> Tensor {
        let rotated = crate::tensor::kernels::rot90_value(t, r);
        crate::tensor::kernels::roll_p4_value(&rotated, 1, r)
    }

    pub fn act_input_var(g: &Graph, x: Var, r: usize) -> Var {
        g.rot90(x, r)
    }

    pub fn act_feature_var(g: &Graph, h: Var, r: usize) -> Result<Var> {
        let rotated = g.rot90(h, r);
        g.roll_p4(rotated, r)
    }
}

/// Finite set of scale factors with the aggregation rule for branch outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub factors: Vec<f64>,
    pub aggregation: Aggregation,
    /// When true the owning layer carries one learnable scalar per factor.
    pub learnable_weights: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Concat,
    Average,
}

impl ScaleSet {
    pub fn new(factors: Vec<f64>, aggregation: Aggregation) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::invalid("scale set must be nonempty"));
        }
        if factors.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid(format!(
                "scale factors must be positive, got {:?}",
                factors
            )));
        }
        if factors.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!(
                "scale factors must be sorted ascending, got {:?}",
                factors
            )));
        }
        Ok(ScaleSet {
            factors,
            aggregation,
            learnable_weights: false,
        })
    }

    pub fn with_learnable_weights(mut self) -> Self {
        self.learnable_weights = true;
        self
    }

    /// Default set keeping 32x32 inputs above kernel size at every scale.
    pub fn default_factors() -> Vec<f64> {
        vec![0.75, 1.0, 1.25]
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Mean,
}

/// Lift an image to a P4 feature map: orientation channel r holds the
/// correlation of x with the filter rotated by r quarter turns.
/// x: (N,C,H,W), filters: (K,C,k,k) -> (N, K*4, H', W') orientation-minor.
pub fn p4_lift_conv(g: &Graph, x: Var, filters: Var, pad: Padding) -> Result<Var> {
    let sw = g.shape_of(filters);
    if sw.len() != 4 || sw[2] != sw[3] {
        return Err(Error::invalid(format!(
            "p4_lift_conv requires square kernels, got {:?}",
            sw
        )));
    }
    let mut parts = Vec::with_capacity(4);
    for r in 0..4 {
        let wr = g.rot90(filters, r);
        parts.push(g.conv2d(x, wr, pad)?);
    }
    g.stack_orient([parts[0], parts[1], parts[2], parts[3]])
}

/// P4 group convolution on an orientation-indexed feature map.
/// h: (N, K*4, H, W), filters: (K', K*4, k, k) with the input-channel axis
/// grouped (K, 4) orientation-minor.
pub fn p4_group_conv(g: &Graph, h: Var, filters: Var, pad: Padding) -> Result<Var> {
    let sh = g.shape_of(h);
    let sw = g.shape_of(filters);
    if sh.len() != 4 || sh[1] % 4 != 0 {
        return Err(Error::invalid(format!(
            "p4_group_conv input must carry an orientation axis of length 4, got {:?}",
            sh
        )));
    }
    if sw.len() != 4 || sw[1] != sh[1] {
        return Err(Error::ShapeMismatch {
            op: "p4_group_conv",
            lhs: sh,
            rhs: sw,
        });
    }
    let mut parts = Vec::with_capacity(4);
    for r in 0..4 {
        // filter for output orientation r: roll input orientations by r,
        // then rotate the spatial kernel by r
        let rolled = g.roll_p4(filters, r)?;
        let wr = g.rot90(rolled, r);
        parts.push(g.conv2d(h, wr, pad)?);
    }
    g.stack_orient([parts[0], parts[1], parts[2], parts[3]])
}

/// Reduce over the orientation axis, producing rotation-invariant features.
pub fn group_pool(g: &Graph, h: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => g.group_pool_max(h),
        PoolMode::Mean => g.group_pool_mean(h),
    }
}

/// Batch normalization whose statistics are shared across the orientation
/// axis per filter, so normalization commutes with rho(r).
#[allow(clippy::too_many_arguments)]
pub fn group_batch_norm(
    g: &Graph,
    h: Var,
    gamma: Var,
    beta: Var,
    stats: BnStats,
    eps: f64,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
    g.batch_norm(h, gamma, beta, 4, stats, eps)
}

/// Multi-scale convolution: resize the input by each factor, convolve with
/// shared filters, resize each branch output back to the input resolution,
/// then aggregate. `branch_weights`, when present, computes sum_s w_s phi_s.
pub fn scale_equivariant_conv(
    g: &Graph,
    x: Var,
    filters: Var,
    bias: Option<Var>,
    scales: &ScaleSet,
    branch_weights: Option<Var>,
) -> Result<Var> {
    let sx = g.shape_of(x);
    let sw = g.shape_of(filters);
    if sx.len() != 4 || sw.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "scale_equivariant_conv",
            lhs: sx,
            rhs: sw,
        });
    }
    let (h, w) = (sx[2], sx[3]);
    let k = sw[2];
    let mut branches = Vec::with_capacity(scales.len());
    for &alpha in &scales.factors {
        let (ah, aw) = (
            (alpha * h as f64).round() as usize,
            (alpha * w as f64).round() as usize,
        );
        if ah < k || aw < k {
            return Err(Error::invalid(format!(
                "scale factor {alpha} resizes {h}x{w} below the {k}x{k} kernel"
            )));
        }
        let xi = if ah == h && aw == w {
            x
        } else {
            g.resize_bilinear(x, ah, aw)?
        };
        let mut yi = g.conv2d(xi, filters, Padding::Same)?;
        if let Some(b) = bias {
            yi = g.add_bias(yi, b)?;
        }
        let zi = if ah == h && aw == w {
            yi
        } else {
            g.resize_bilinear(yi, h, w)?
        };
        branches.push(zi);
    }
    if let Some(theta) = branch_weights {
        let st = g.shape_of(theta);
        if st != [scales.len()] {
            return Err(Error::invalid(format!(
                "branch weight count {:?} does not match {} scale factors",
                st,
                scales.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (i, &b) in branches.iter().enumerate() {
            let wi = g.select1(theta, i)?;
            let term = g.scale_by(b, wi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        return Ok(acc.unwrap());
    }
    match scales.aggregation {
        Aggregation::Concat => g.concat_channels(&branches),
        Aggregation::Average => {
            if branches.len() == 1 {
                return Ok(branches[0]);
            }
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = g.add(acc, b)?;
            }
            Ok(g.mul_scalar(acc, 1.0 / branches.len() as f64))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
    WeightedSum,
}

/// Fuse parallel branch outputs. Weighted sum normalizes theta through a
/// softmax so the weights form a convex combination.
pub fn fuse(g: &Graph, branches: &[Var], mode: Fusion, theta: Option<Var>) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::invalid("fuse requires at least one branch"));
    }
    match mode {
        Fusion::Concat => g.concat_channels(branches),
        Fusion::WeightedSum => {
            let shapes: Vec<Vec<usize>> = branches.iter().map(|b| g.shape_of(*b)).collect();
            if shapes.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::invalid(format!(
                    "weighted_sum requires identical branch shapes, got {:?}",
                    shapes
                )));
            }
            let theta = theta.ok_or_else(|| {
                Error::invalid("weighted_sum fusion requires fusion weights")
            })?;
            if g.shape_of(theta) != [branches.len()] {
                return Err(Error::invalid(format!(
                    "fusion weight count {:?} does not match {} branches",
                    g.shape_of(theta),
                    branches.len()
                )));
            }
            let weights = g.softmax1d(theta)?;
            let mut acc: Option<Var> = None;
            for (i, &b) in branches.iter().enumerate() {
                let wi = g.select1(weights, i)?;
                let term = g.scale_by(b, wi)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn p4_composition_closure_and_inverses() {
        let mut r = rng(1);
        let t = Tensor::randn(&[1, 1, 5, 5], &mut r);
        for a in P4::ELEMENTS {
            for b in P4::ELEMENTS {
                let ab = P4::compose(a, b);
                let seq = P4::act_input(&P4::act_input(&t, b), a);
                assert_eq!(seq, P4::act_input(&t, ab));
            }
            let inv = P4::inverse(a);
            assert_eq!(P4::act_input(&P4::act_input(&t, a), inv), t);
        }
    }

    #[test]
    fn lift_with_centered_delta_reproduces_input() {
        let g = Graph::new();
        let mut r = rng(2);
        let x = Tensor::randn(&[1, 1, 6, 6], &mut r);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // centered delta
        let xv = g.input(x.clone(), false);
        let wv = g.input(w, false);
        let lifted = p4_lift_conv(&g, xv, wv, Padding::Same).unwrap();
        let v = g.value(lifted);
        assert_eq!(v.shape(), &[1, 4, 6, 6]);
        for r in 0..4 {
            let slice = crate::tensor::kernels::unstack_orient_value(&v, r);
            assert!(slice.max_abs_diff(&x) < 1e-15, "orientation {r}");
        }
    }

    #[test]
    fn lift_constant_input_all_ones_filter() {
        let g = Graph::new();
        let xv = g.input(Tensor::full(&[1, 1, 6, 6], 1.0), false);
        let wv = g.input(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let lifted = p4_lift_conv(&g, xv, wv, Padding::Valid).unwrap();
        let v = g.value(lifted);
        assert!(v.data().iter().all(|&e| e == 9.0));
    }

    #[test]
    fn lift_rejects_non_square_kernel() {
        let g = Graph::new();
        let xv = g.input(Tensor::zeros(&[1, 1, 6, 6]), false);
        let wv = g.input(Tensor::zeros(&[1, 1, 3, 2]), false);
        assert!(p4_lift_conv(&g, xv, wv, Padding::Valid).is_err());
    }

    #[test]
    fn group_conv_identity_filter_bank_reproduces_input() {
        // identity filter: out filter f' = delta on (f', same orientation)
        let g = Graph::new();
        let mut r = rng(3);
        let k = 2;
        let h = Tensor::randn(&[1, k * 4, 5, 5], &mut r);
        let mut w = Tensor::zeros(&[k, k * 4, 3, 3]);
        for f in 0..k {
            // input channel (f, orientation 0), centered delta
            let c = f * 4;
            let idx = ((f * (k * 4) + c) * 3 + 1) * 3 + 1;
            w.data_mut()[idx] = 1.0;
        }
        let hv = g.input(h.clone(), false);
        let wv = g.input(w, false);
        let out = p4_group_conv(&g, hv, wv, Padding::Same).unwrap();
        let v = g.value(out);
        // output orientation r picks input (f, orientation r) spatially
        // rotated and un-rotated: equals the input feature map
        assert!(v.max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn group_pool_identical_orientations_and_mean() {
        let g = Graph::new();
        let mut r = rng(4);
        let base = Tensor::randn(&[1, 2, 4, 4], &mut r);
        let refs = [&base, &base, &base, &base];
        let h = crate::tensor::kernels::stack_orient_value(&refs);
        let hv = g.input(h, false);
        let maxed = group_pool(&g, hv, PoolMode::Max).unwrap();
        let meaned = group_pool(&g, hv, PoolMode::Mean).unwrap();
        assert!(g.value(maxed).max_abs_diff(&base) < 1e-15);
        assert!(g.value(meaned).max_abs_diff(&base) < 1e-15);
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![], Aggregation::Concat).is_err());
        assert!(ScaleSet::new(vec![-1.0, 1.0], Aggregation::Concat).is_err());
        assert!(ScaleSet::new(vec![2.0, 1.0], Aggregation::Concat).is_err());
        assert!(ScaleSet::new(vec![0.75, 1.0, 1.25], Aggregation::Concat).is_ok());
    }

    #[test]
    fn scale_conv_single_factor_equals_plain_conv_bit_for_bit() {
        let g = Graph::new();
        let mut r = rng(5);
        let x = Tensor::randn(&[2, 3, 8, 8], &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut r);
        let xv = g.input(x, false);
        let wv = g.input(w, false);
        let scales = ScaleSet::new(vec![1.0], Aggregation::Average).unwrap();
        let y = scale_equivariant_conv(&g, xv, wv, None, &scales, None).unwrap();
        let plain = g.conv2d(xv, wv, Padding::Same).unwrap();
        assert_eq!(g.value(y), g.value(plain));
    }

    #[test]
    fn scale_conv_duplicate_branches_average_to_single_branch() {
        let g = Graph::new();
        let mut r = rng(6);
        let x = Tensor::randn(&[1, 2, 8, 8], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let xv = g.input(x, false);
        let wv = g.input(w, false);
        let dup = ScaleSet {
            factors: vec![1.0, 1.0],
            aggregation: Aggregation::Average,
            learnable_weights: false,
        };
        let y = scale_equivariant_conv(&g, xv, wv, None, &dup, None).unwrap();
        let plain = g.conv2d(xv, wv, Padding::Same).unwrap();
        assert_eq!(g.value(y), g.value(plain));
    }

    #[test]
    fn scale_conv_rejects_resize_below_kernel() {
        let g = Graph::new();
        let xv = g.input(Tensor::zeros(&[1, 1, 8, 8]), false);
        let wv = g.input(Tensor::zeros(&[1, 1, 3, 3]), false);
        let scales = ScaleSet::new(vec![0.25, 1.0], Aggregation::Concat).unwrap();
        let err = scale_equivariant_conv(&g, xv, wv, None, &scales, None).unwrap_err();
        assert!(err.to_string().contains("0.25"), "{err}");
    }

    #[test]
    fn fuse_concat_stacks_channels() {
        let g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 8, 4, 4]), false);
        let b = g.input(Tensor::zeros(&[2, 16, 4, 4]), false);
        let y = fuse(&g, &[a, b], Fusion::Concat, None).unwrap();
        assert_eq!(g.shape_of(y), vec![2, 24, 4, 4]);
    }

    #[test]
    fn fuse_weighted_sum_saturated_theta_selects_first_branch() {
        let g = Graph::new();
        let mut r = rng(7);
        let b0 = Tensor::randn(&[1, 2, 3, 3], &mut r);
        let b1 = Tensor::randn(&[1, 2, 3, 3], &mut r);
        let b2 = Tensor::randn(&[1, 2, 3, 3], &mut r);
        let v0 = g.input(b0.clone(), false);
        let v1 = g.input(b1, false);
        let v2 = g.input(b2, false);
        let theta = g.input(Tensor::from_vec(vec![1000.0, 0.0, 0.0]), false);
        let y = fuse(&g, &[v0, v1, v2], Fusion::WeightedSum, Some(theta)).unwrap();
        assert_eq!(g.value(y), b0);
    }

    #[test]
    fn fuse_weighted_sum_rejects_mismatched_shapes() {
        let g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 2, 3, 3]), false);
        let b = g.input(Tensor::zeros(&[1, 3, 3, 3]), false);
        let theta = g.input(Tensor::from_vec(vec![0.0, 0.0]), false);
        let err = fuse(&g, &[a, b], Fusion::WeightedSum, Some(theta)).unwrap_err();
        assert!(err.to_string().contains("[1, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn fusion_weights_form_a_simplex() {
        let g = Graph::new();
        let theta = g.input(Tensor::from_vec(vec![0.3, -1.2, 2.5]), false);
        let w = g.softmax1d(theta).unwrap();
        let wv = g.value(w);
        assert!(wv.data().iter().all(|&v| v > 0.0));
        assert!((wv.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_batch_norm_constant_input_zeroes() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[2, 8, 3, 3], 3.7), false);
        let gamma = g.input(Tensor::full(&[2], 1.0), false);
        let beta = g.input(Tensor::zeros(&[2]), false);
        let (y, stats) = group_batch_norm(&g, x, gamma, beta, BnStats::Batch, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
        let (mean, var) = stats.unwrap();
        assert!((mean[0] - 3.7).abs() < 1e-12 && var[0].abs() < 1e-12);
    }

    #[test]
    fn group_batch_norm_normalizes_per_filter() {
        let g = Graph::new();
        let mut r = rng(8);
        let x = g.input(Tensor::randn(&[4, 8, 5, 5], &mut r), false);
        let gamma = g.input(Tensor::full(&[2], 1.0), false);
        let beta = g.input(Tensor::zeros(&[2]), false);
        let (y, _) = group_batch_norm(&g, x, gamma, beta, BnStats::Batch, 1e-12).unwrap();
        let v = g.value(y);
        // per-filter mean ~0, var ~1 over batch, orientation and space
        let inner = 25;
        for f in 0..2 {
            let mut vals = vec![];
            for n in 0..4 {
                for s in 0..4 {
                    let base = (n * 8 + f * 4 + s) * inner;
                    vals.extend_from_slice(&v.data()[base..base + inner]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10 && (var - 1.0).abs() < 1e-6);
        }
    }
}

//! Central finite-difference oracle for every differentiable op.
//!
//! The oracle is independent of the backward pass: it re-runs the forward
//! graph at perturbed inputs and compares (f(x+h) - f(x-h)) / 2h against the
//! analytic gradient, 20 random draws per layer type, 64-bit, h = 1e-5,
//! relative error < 1e-5.

use equirobust::tensor::{BnStats, PadMode};
use equirobust::{Graph, Padding, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const DRAWS: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor kept away from zero so ReLU/max kinks are not straddled.
fn randn_offset(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| if v.abs() < 1e-2 { v + 0.05 * v.signum().max(0.5) } else { v })
}

fn grad_check<F>(build: F, inputs: &[Tensor])
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |pts: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|t| g.input(t.clone(), false)).collect();
        g.value(build(&g, &vars)).item()
    };

    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < TOL,
                "input {ti} element {ei}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Scalar loss that is sensitive to every output element.
fn mask_loss(g: &Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape_of(y);
    let mut r = rng(seed ^ 0x5eed_1234);
    let mask = g.constant(Tensor::randn(&shape, &mut r));
    let prod = g.mul(y, mask).unwrap();
    g.sum(prod)
}

#[test]
fn gradcheck_elementwise() {
    for s in 0..DRAWS {
        let mut r = rng(s);
        let x = randn_offset(&[6], &mut r);
        let y = randn_offset(&[6], &mut r);
        grad_check(
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let b = g.mul(a, v[0]).unwrap();
                let c = g.sub(b, v[1]).unwrap();
                let d = g.relu(c);
                let e = g.mul_scalar(d, 1.7);
                mask_loss(g, e, s)
            },
            &[x, y],
        );
    }
}

#[test]
fn gradcheck_matmul_and_bias() {
    for s in 0..DRAWS {
        let mut r = rng(100 + s);
        let x = Tensor::randn(&[3, 4], &mut r);
        let w = Tensor::randn(&[4, 5], &mut r);
        let b = Tensor::randn(&[5], &mut r);
        grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                let y = g.add_row(y, v[2]).unwrap();
                mask_loss(g, y, s)
            },
            &[x, w, b],
        );
    }
}

#[test]
fn gradcheck_conv2d_valid_and_same() {
    for s in 0..DRAWS {
        let mut r = rng(200 + s);
        let x = Tensor::randn(&[2, 2, 6, 6], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let pad = if s % 2 == 0 { Padding::Same } else { Padding::Valid };
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], pad).unwrap();
                let y = g.add_bias(y, v[2]).unwrap();
                mask_loss(g, y, s)
            },
            &[x, w, b],
        );
    }
}

/// Direct-loop transposed-convolution oracle for the conv input gradient.
#[test]
fn conv2d_input_gradient_matches_transposed_conv_oracle() {
    for s in 0..DRAWS {
        let mut r = rng(300 + s);
        let x = Tensor::randn(&[1, 2, 5, 5], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let dy = Tensor::randn(&[1, 3, 3, 3], &mut r); // valid output shape

        let g = Graph::new();
        let xv = g.input(x.clone(), true);
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, Padding::Valid).unwrap();
        let mask = g.constant(dy.clone());
        let prod = g.mul(y, mask).unwrap();
        let loss = g.sum(prod);
        let dx = g.backward(loss).unwrap().wrt(xv).unwrap().clone();

        // oracle: dx[n,c,a,b] = sum_{k,u,v} dy[n,k,a-u,b-v] * w[k,c,u,v]
        let mut oracle = Tensor::zeros(&[1, 2, 5, 5]);
        for c in 0..2 {
            for a in 0..5 {
                for b in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for u in 0..3 {
                            for v in 0..3 {
                                if a >= u && b >= v && a - u < 3 && b - v < 3 {
                                    acc += dy.at4(0, k, a - u, b - v)
                                        * w.at4(k, c, u, v);
                                }
                            }
                        }
                    }
                    oracle.set4(0, c, a, b, acc);
                }
            }
        }
        assert!(dx.max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn gradcheck_pooling() {
    for s in 0..DRAWS {
        let mut r = rng(400 + s);
        let x = randn_offset(&[2, 3, 6, 6], &mut r);
        grad_check(
            |g, v| {
                let y = g.maxpool2(v[0]).unwrap();
                let y = g.global_avg_pool(y).unwrap();
                mask_loss(g, y, s)
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    for s in 0..DRAWS {
        let mut r = rng(500 + s);
        let logits = Tensor::randn(&[4, 5], &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        grad_check(
            |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap(),
            &[logits],
        );
    }
}

#[test]
fn gradcheck_batch_norm_standard_and_grouped() {
    for s in 0..DRAWS {
        let mut r = rng(600 + s);
        let group = if s % 2 == 0 { 1 } else { 4 };
        let c = 8;
        let x = Tensor::randn(&[2, c, 3, 3], &mut r);
        let gamma = Tensor::randn(&[c / group], &mut r).map(|v| v + 2.0);
        let beta = Tensor::randn(&[c / group], &mut r);
        grad_check(
            |g, v| {
                let (y, _) = g
                    .batch_norm(v[0], v[1], v[2], group, BnStats::Batch, 1e-5)
                    .unwrap();
                mask_loss(g, y, s)
            },
            &[x, gamma, beta],
        );
    }
}

#[test]
fn gradcheck_rotation_and_orientation_ops() {
    for s in 0..DRAWS {
        let mut r = rng(700 + s);
        let x = Tensor::randn(&[1, 8, 4, 4], &mut r);
        let k = (s % 4) as usize;
        grad_check(
            |g, v| {
                let y = g.rot90(v[0], k);
                let y = g.roll_p4(y, (k + 1) % 4).unwrap();
                let y = g.group_pool_mean(y).unwrap();
                mask_loss(g, y, s)
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_group_pool_max_and_stack() {
    for s in 0..DRAWS {
        let mut r = rng(800 + s);
        let parts: Vec<Tensor> = (0..4).map(|_| randn_offset(&[1, 2, 3, 3], &mut r)).collect();
        grad_check(
            |g, v| {
                let y = g.stack_orient([v[0], v[1], v[2], v[3]]).unwrap();
                let y = g.group_pool_max(y).unwrap();
                mask_loss(g, y, s)
            },
            &parts,
        );
    }
}

#[test]
fn gradcheck_concat_and_fusion() {
    for s in 0..DRAWS {
        let mut r = rng(900 + s);
        let a = Tensor::randn(&[2, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[2, 3, 3, 3], &mut r);
        let theta = Tensor::randn(&[2], &mut r);
        grad_check(
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]]).unwrap();
                // weighted fusion path: softmax weights over two copies
                let w = g.softmax1d(v[2]).unwrap();
                let w0 = g.select1(w, 0).unwrap();
                let w1 = g.select1(w, 1).unwrap();
                let s0 = g.scale_by(cat, w0).unwrap();
                let s1 = g.scale_by(cat, w1).unwrap();
                let y = g.add(s0, s1).unwrap();
                mask_loss(g, y, s)
            },
            &[a, b, theta],
        );
    }
}

#[test]
fn gradcheck_resize_and_pad() {
    for s in 0..DRAWS {
        let mut r = rng(1000 + s);
        let x = Tensor::randn(&[1, 2, 6, 6], &mut r);
        let mode = if s % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
        grad_check(
            |g, v| {
                let up = g.resize_bilinear(v[0], 9, 9).unwrap();
                let down = g.resize_bilinear(up, 6, 6).unwrap();
                let nn = g.resize_nearest(down, 3, 3).unwrap();
                let padded = g.pad2d(nn, 1, mode).unwrap();
                mask_loss(g, padded, s)
            },
            &[x],
        );
    }
}

#[test]
fn gradcheck_logit_select() {
    for s in 0..DRAWS {
        let mut r = rng(1100 + s);
        let logits = Tensor::randn(&[3, 4], &mut r);
        grad_check(
            |g, v| {
                let a = g.logit_select(v[0], 1, 2).unwrap();
                let b = g.logit_select(v[0], 0, 3).unwrap();
                g.sub(a, b).unwrap()
            },
            &[logits],
        );
    }
}

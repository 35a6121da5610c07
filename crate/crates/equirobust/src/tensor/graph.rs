//! Per-forward-pass reverse-mode tape.
//!
//! A `Graph` records one forward pass; `backward` consumes it. Attacks and
//! training re-forward every step, so tapes are short-lived and
//! single-consumer by design. Tensors placed on the tape are immutable.

use super::kernels::{self, PadMode};
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Record an op. `backward` maps (grad_out, parent_values) to per-parent
    /// gradients in parent order.
    fn op(&self, value: Tensor, parents: &[Var], backward: BackFn) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs { Some(backward) } else { None },
            needs_grad: needs,
        })
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(back) = &node.backward else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = back(&g, &parent_vals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), pg.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        Ok(self.op(
            value,
            &[a, b],
            Box::new(|g, _| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        Ok(self.op(
            value,
            &[a, b],
            Box::new(|g, _| vec![g.clone(), g.map(|v| -v)]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        Ok(self.op(
            value,
            &[a, b],
            Box::new(|g, pv| {
                let (x, y) = (pv[0], pv[1]);
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * yi)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| gi * xi)
                    .collect();
                vec![
                    Tensor::new(x.shape().to_vec(), da).unwrap(),
                    Tensor::new(y.shape().to_vec(), db).unwrap(),
                ]
            }),
        ))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * c);
        self.op(value, &[a], Box::new(move |g, _| vec![g.map(|v| v * c)]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v + c);
        self.op(value, &[a], Box::new(|g, _| vec![g.clone()]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.max(0.0));
        self.op(
            value,
            &[a],
            Box::new(|g, pv| {
                let x = pv[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data).unwrap()]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.data().iter().sum());
        self.op(
            value,
            &[a],
            Box::new(|g, pv| {
                let x = pv[0];
                vec![Tensor::full(x.shape(), g.item())]
            }),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.numel() as f64;
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.data().iter().sum::<f64>() / n);
        self.op(
            value,
            &[a],
            Box::new(move |g, pv| {
                let x = pv[0];
                vec![Tensor::full(x.shape(), g.item() / n)]
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.shape().to_vec(),
                nodes[b.0].value.shape().to_vec(),
            )
        };
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = {
            let nodes = self.nodes.borrow();
            matmul_value(&nodes[a.0].value, &nodes[b.0].value, n, k, m)
        };
        Ok(self.op(
            value,
            &[a, b],
            Box::new(move |g, pv| {
                let (x, y) = (pv[0], pv[1]);
                // dA = g @ B^T ; dB = A^T @ g
                let gd = g.data();
                let xd = x.data();
                let yd = y.data();
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for l in 0..m {
                            acc += gd[i * m + l] * yd[j * m + l];
                        }
                        da[i * k + j] = acc;
                    }
                }
                let mut db = vec![0.0; k * m];
                for i in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += xd[l * k + i] * gd[l * m + j];
                        }
                        db[i * m + j] = acc;
                    }
                }
                vec![
                    Tensor::new(vec![n, k], da).unwrap(),
                    Tensor::new(vec![k, m], db).unwrap(),
                ]
            }),
        ))
    }

    /// Broadcast-add a length-K row vector to an (N,K) matrix.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.shape().to_vec(),
                nodes[b.0].value.shape().to_vec(),
            )
        };
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let (n, k) = (sx[0], sx[1]);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let bv = &nodes[b.0].value;
            let mut data = xv.data().to_vec();
            for i in 0..n {
                for j in 0..k {
                    data[i * k + j] += bv.data()[j];
                }
            }
            Tensor::new(vec![n, k], data).unwrap()
        };
        Ok(self.op(
            value,
            &[x, b],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut db = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        db[j] += gd[i * k + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![k], db).unwrap()]
            }),
        ))
    }

    /// Broadcast-add a per-channel bias to an (N,C,H,W) tensor.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.shape().to_vec(),
                nodes[b.0].value.shape().to_vec(),
            )
        };
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let inner = h * w;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let bv = &nodes[b.0].value;
            let mut data = xv.data().to_vec();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * inner;
                    let bias = bv.data()[ci];
                    for v in &mut data[base..base + inner] {
                        *v += bias;
                    }
                }
            }
            Tensor::new(sx.clone(), data).unwrap()
        };
        Ok(self.op(
            value,
            &[x, b],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        db[ci] += gd[base..base + inner].iter().sum::<f64>();
                    }
                }
                vec![g.clone(), Tensor::new(vec![c], db).unwrap()]
            }),
        ))
    }

    // ---- spatial ----

    fn pad_amount(w_shape: &[usize], pad: Padding) -> usize {
        match pad {
            Padding::Valid => 0,
            Padding::Same => (w_shape[2] - 1) / 2,
        }
    }

    pub fn conv2d(&self, x: Var, w: Var, pad: Padding) -> Result<Var> {
        let (sx, sw) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.shape().to_vec(),
                nodes[w.0].value.shape().to_vec(),
            )
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[2] != sw[3] {
            return Err(Error::invalid(format!(
                "conv2d requires a square kernel, got {}x{}",
                sw[2], sw[3]
            )));
        }
        if pad == Padding::Same && sw[2] % 2 == 0 {
            return Err(Error::invalid(
                "conv2d with same padding requires an odd kernel".to_string(),
            ));
        }
        let p = Self::pad_amount(&sw, pad);
        if sx[2] + 2 * p < sw[2] || sx[3] + 2 * p < sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_value(&nodes[x.0].value, &nodes[w.0].value, p)
        };
        Ok(self.op(
            value,
            &[x, w],
            Box::new(move |g, pv| {
                let (xv, wv) = (pv[0], pv[1]);
                vec![
                    kernels::conv2d_bwd_input(g, wv, xv.shape(), p),
                    kernels::conv2d_bwd_filter(g, xv, wv.shape(), p),
                ]
            }),
        ))
    }

    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (value, arg) = {
            let nodes = self.nodes.borrow();
            kernels::maxpool2_value(&nodes[x.0].value)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, pv| {
                let mut dx = Tensor::zeros(pv[0].shape());
                let dxd = dx.data_mut();
                for (o, &src) in arg.iter().enumerate() {
                    dxd[src] += g.data()[o];
                }
                vec![dx]
            }),
        ))
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let inner = (h * w) as f64;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = vec![0.0; n * c];
            for nc in 0..n * c {
                out[nc] = xd[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / inner;
            }
            Tensor::new(vec![n, c], out).unwrap()
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, pv| {
                let mut dx = Tensor::zeros(pv[0].shape());
                let dxd = dx.data_mut();
                for nc in 0..n * c {
                    let gv = g.data()[nc] / inner;
                    for v in &mut dxd[nc * h * w..(nc + 1) * h * w] {
                        *v = gv;
                    }
                }
                vec![dx]
            }),
        ))
    }

    pub fn rot90(&self, x: Var, k: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::rot90_value(&nodes[x.0].value, k)
        };
        self.op(
            value,
            &[x],
            // adjoint of a rotation is the inverse rotation
            Box::new(move |g, _| vec![kernels::rot90_value(g, (4 - k % 4) % 4)]),
        )
    }

    pub fn roll_p4(&self, x: Var, shift: usize) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() < 2 || sx[1] % 4 != 0 {
            return Err(Error::invalid(format!(
                "roll_p4 requires a channel axis divisible by 4, got {:?}",
                sx
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::roll_p4_value(&nodes[x.0].value, 1, shift)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, _| vec![kernels::roll_p4_value(g, 1, (4 - shift % 4) % 4)]),
        ))
    }

    pub fn stack_orient(&self, parts: [Var; 4]) -> Result<Var> {
        let s0 = self.shape_of(parts[0]);
        for p in &parts[1..] {
            let sp = self.shape_of(*p);
            if sp != s0 {
                return Err(Error::ShapeMismatch {
                    op: "stack_orient",
                    lhs: s0,
                    rhs: sp,
                });
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            kernels::stack_orient_value(&refs)
        };
        Ok(self.op(
            value,
            &parts,
            Box::new(|g, _| (0..4).map(|r| kernels::unstack_orient_value(g, r)).collect()),
        ))
    }

    /// Max over the orientation sub-axis: (N, K*4, H, W) -> (N, K, H, W).
    pub fn group_pool_max(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || sx[1] % 4 != 0 {
            return Err(Error::invalid(format!(
                "group_pool_max expects orientation axis of length 4, got shape {:?}",
                sx
            )));
        }
        let (n, c4, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let k = c4 / 4;
        let inner = h * w;
        let (value, arg) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = vec![0.0; n * k * inner];
            let mut arg = vec![0usize; n * k * inner];
            for ni in 0..n {
                for f in 0..k {
                    for px in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for r in 0..4 {
                            let idx = (ni * c4 + f * 4 + r) * inner + px;
                            if xd[idx] > best {
                                best = xd[idx];
                                bi = idx;
                            }
                        }
                        let o = (ni * k + f) * inner + px;
                        out[o] = best;
                        arg[o] = bi;
                    }
                }
            }
            (Tensor::new(vec![n, k, h, w], out).unwrap(), arg)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, pv| {
                let mut dx = Tensor::zeros(pv[0].shape());
                let dxd = dx.data_mut();
                for (o, &src) in arg.iter().enumerate() {
                    dxd[src] += g.data()[o];
                }
                vec![dx]
            }),
        ))
    }

    /// Mean over the orientation sub-axis: (N, K*4, H, W) -> (N, K, H, W).
    pub fn group_pool_mean(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || sx[1] % 4 != 0 {
            return Err(Error::invalid(format!(
                "group_pool_mean expects orientation axis of length 4, got shape {:?}",
                sx
            )));
        }
        let (n, c4, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let k = c4 / 4;
        let inner = h * w;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = vec![0.0; n * k * inner];
            for ni in 0..n {
                for f in 0..k {
                    for px in 0..inner {
                        let mut acc = 0.0;
                        for r in 0..4 {
                            acc += xd[(ni * c4 + f * 4 + r) * inner + px];
                        }
                        out[(ni * k + f) * inner + px] = acc / 4.0;
                    }
                }
            }
            Tensor::new(vec![n, k, h, w], out).unwrap()
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, pv| {
                let mut dx = Tensor::zeros(pv[0].shape());
                let dxd = dx.data_mut();
                let gd = g.data();
                for ni in 0..n {
                    for f in 0..k {
                        for px in 0..inner {
                            let gv = gd[(ni * k + f) * inner + px] / 4.0;
                            for r in 0..4 {
                                dxd[(ni * c4 + f * 4 + r) * inner + px] += gv;
                            }
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels with no inputs".to_string()));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.shape_of(*p)).collect();
        let s0 = &shapes[0];
        for s in &shapes[1..] {
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::invalid(format!(
                    "concat_channels spatial/batch mismatch across branches: {:?}",
                    shapes
                )));
            }
        }
        let n = s0[0];
        let inner = s0[2] * s0[3];
        let cs: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let ctot: usize = cs.iter().sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0; n * ctot * inner];
            for ni in 0..n {
                let mut coff = 0;
                for (pi, p) in parts.iter().enumerate() {
                    let pd = nodes[p.0].value.data();
                    let c = cs[pi];
                    let src = ni * c * inner;
                    let dst = (ni * ctot + coff) * inner;
                    out[dst..dst + c * inner].copy_from_slice(&pd[src..src + c * inner]);
                    coff += c;
                }
            }
            Tensor::new(vec![n, ctot, s0[2], s0[3]], out).unwrap()
        };
        let cs_b = cs.clone();
        let (h, w) = (s0[2], s0[3]);
        Ok(self.op(
            value,
            parts,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut outs = Vec::with_capacity(cs_b.len());
                for (pi, &c) in cs_b.iter().enumerate() {
                    let coff: usize = cs_b[..pi].iter().sum();
                    let mut dg = vec![0.0; n * c * inner];
                    for ni in 0..n {
                        let src = (ni * ctot + coff) * inner;
                        let dst = ni * c * inner;
                        dg[dst..dst + c * inner].copy_from_slice(&gd[src..src + c * inner]);
                    }
                    outs.push(Tensor::new(vec![n, c, h, w], dg).unwrap());
                }
                outs
            }),
        ))
    }

    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::invalid(format!(
                "resize_bilinear: bad shape {:?} -> ({}, {})",
                sx, oh, ow
            )));
        }
        let (h, w) = (sx[2], sx[3]);
        let value = {
            let nodes = self.nodes.borrow();
            kernels::resize_bilinear_value(&nodes[x.0].value, oh, ow)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, _| vec![kernels::resize_bilinear_bwd(g, h, w)]),
        ))
    }

    pub fn resize_nearest(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::invalid(format!(
                "resize_nearest: bad shape {:?} -> ({}, {})",
                sx, oh, ow
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let value = {
            let nodes = self.nodes.borrow();
            kernels::resize_nearest_value(&nodes[x.0].value, oh, ow)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    let obase = nc * oh * ow;
                    for i in 0..oh {
                        let y = kernels::nearest_src_index(i, oh, h);
                        for j in 0..ow {
                            let xx = kernels::nearest_src_index(j, ow, w);
                            dx[base + y * w + xx] += gd[obase + i * ow + j];
                        }
                    }
                }
                vec![Tensor::new(vec![n, c, h, w], dx).unwrap()]
            }),
        ))
    }

    pub fn pad2d(&self, x: Var, p: usize, mode: PadMode) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 {
            return Err(Error::invalid(format!("pad2d: expected rank 4, got {:?}", sx)));
        }
        let (h, w) = (sx[2], sx[3]);
        let value = {
            let nodes = self.nodes.borrow();
            kernels::pad2d_value(&nodes[x.0].value, p, mode)
        };
        Ok(self.op(
            value,
            &[x],
            Box::new(move |g, _| vec![kernels::pad2d_bwd(g, h, w, p, mode)]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.op(
            value,
            &[x],
            Box::new(|g, pv| vec![g.clone().reshape(pv[0].shape().to_vec()).unwrap()]),
        ))
    }

    // ---- losses and selections ----

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.shape_of(logits);
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                sx,
                labels.len()
            )));
        }
        let (n, k) = (sx[0], sx[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let ld = nodes[logits.0].value.data();
            let mut probs = vec![0.0; n * k];
            let mut loss = 0.0;
            for i in 0..n {
                let row = &ld[i * k..(i + 1) * k];
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for j in 0..k {
                    let e = (row[j] - mx).exp();
                    probs[i * k + j] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[i * k + j] /= z;
                }
                loss += -(probs[i * k + labels[i]].max(1e-300)).ln();
            }
            (loss / n as f64, probs)
        };
        let labels = labels.to_vec();
        Ok(self.op(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _| {
                let scale = g.item() / n as f64;
                let mut dl = probs.clone();
                for i in 0..n {
                    dl[i * k + labels[i]] -= 1.0;
                }
                for v in &mut dl {
                    *v *= scale;
                }
                vec![Tensor::new(vec![n, k], dl).unwrap()]
            }),
        ))
    }

    /// Scalar logit f_col(x_row) out of an (N,K) logits matrix.
    pub fn logit_select(&self, logits: Var, row: usize, col: usize) -> Result<Var> {
        let sx = self.shape_of(logits);
        if sx.len() != 2 || row >= sx[0] || col >= sx[1] {
            return Err(Error::invalid(format!(
                "logit_select ({}, {}) out of range for {:?}",
                row, col, sx
            )));
        }
        let (n, k) = (sx[0], sx[1]);
        let value = Tensor::scalar(self.nodes.borrow()[logits.0].value.data()[row * k + col]);
        Ok(self.op(
            value,
            &[logits],
            Box::new(move |g, _| {
                let mut dl = Tensor::zeros(&[n, k]);
                dl.data_mut()[row * k + col] = g.item();
                vec![dl]
            }),
        ))
    }

    /// Softmax over a 1-D vector (fusion weights).
    pub fn softmax1d(&self, theta: Var) -> Result<Var> {
        let sx = self.shape_of(theta);
        if sx.len() != 1 {
            return Err(Error::invalid(format!("softmax1d expects rank 1, got {:?}", sx)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let td = nodes[theta.0].value.data();
            let mx = td.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = td.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            Tensor::from_vec(exps.iter().map(|e| e / z).collect())
        };
        let p = value.data().to_vec();
        Ok(self.op(
            value,
            &[theta],
            Box::new(move |g, _| {
                let dot: f64 = g.data().iter().zip(&p).map(|(gi, pi)| gi * pi).sum();
                let dt = g
                    .data()
                    .iter()
                    .zip(&p)
                    .map(|(gi, pi)| pi * (gi - dot))
                    .collect();
                vec![Tensor::from_vec(dt)]
            }),
        ))
    }

    /// Scalar element of a 1-D vector.
    pub fn select1(&self, v: Var, i: usize) -> Result<Var> {
        let sx = self.shape_of(v);
        if sx.len() != 1 || i >= sx[0] {
            return Err(Error::invalid(format!("select1 {} out of range for {:?}", i, sx)));
        }
        let m = sx[0];
        let value = Tensor::scalar(self.nodes.borrow()[v.0].value.data()[i]);
        Ok(self.op(
            value,
            &[v],
            Box::new(move |g, _| {
                let mut dv = Tensor::zeros(&[m]);
                dv.data_mut()[i] = g.item();
                vec![dv]
            }),
        ))
    }

    /// Multiply a tensor by a scalar variable.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let ss = self.shape_of(s);
        if self.nodes.borrow()[s.0].value.numel() != 1 {
            return Err(Error::invalid(format!("scale_by expects scalar, got {:?}", ss)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.0].value.item();
            nodes[x.0].value.map(|v| v * sv)
        };
        Ok(self.op(
            value,
            &[x, s],
            Box::new(|g, pv| {
                let (x, s) = (pv[0], pv[1]);
                let sv = s.item();
                let dx = g.map(|v| v * sv);
                let ds: f64 = g.data().iter().zip(x.data()).map(|(gi, xi)| gi * xi).sum();
                let mut dst = Tensor::zeros(s.shape());
                dst.data_mut()[0] = ds;
                vec![dx, dst]
            }),
        ))
    }

    // ---- batch normalization ----

    /// Batch normalization with channel groups of size `group` (1 = standard,
    /// 4 = shared across P4 orientations per filter). `gamma`/`beta` have one
    /// entry per group. When `stats` is `Batch`, returns the batch statistics
    /// so the caller can update running averages.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        stats: BnStats,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || sx[1] % group != 0 {
            return Err(Error::invalid(format!(
                "batch_norm: shape {:?} incompatible with group {}",
                sx, group
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let ng = c / group;
        let sg = self.shape_of(gamma);
        if sg != [ng] || self.shape_of(beta) != [ng] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: sg,
                rhs: vec![ng],
            });
        }
        let inner = h * w;
        let m = (n * group * inner) as f64;
        let (mean, var, batch) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            match &stats {
                BnStats::Running { mean, var } => (mean.clone(), var.clone(), false),
                BnStats::Batch => {
                    let mut mean = vec![0.0; ng];
                    let mut var = vec![0.0; ng];
                    for gi in 0..ng {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for s in 0..group {
                                let base = (ni * c + gi * group + s) * inner;
                                acc += xd[base..base + inner].iter().sum::<f64>();
                            }
                        }
                        mean[gi] = acc / m;
                        let mut vacc = 0.0;
                        for ni in 0..n {
                            for s in 0..group {
                                let base = (ni * c + gi * group + s) * inner;
                                for &v in &xd[base..base + inner] {
                                    let d = v - mean[gi];
                                    vacc += d * d;
                                }
                            }
                        }
                        var[gi] = vacc / m;
                    }
                    (mean, var, true)
                }
            }
        };
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let gd = nodes[gamma.0].value.data();
            let bd = nodes[beta.0].value.data();
            let mut out = vec![0.0; xd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let gi = ci / group;
                    let inv = 1.0 / (var[gi] + eps).sqrt();
                    let base = (ni * c + ci) * inner;
                    for px in 0..inner {
                        out[base + px] = gd[gi] * (xd[base + px] - mean[gi]) * inv + bd[gi];
                    }
                }
            }
            Tensor::new(sx.clone(), out).unwrap()
        };
        let stats_out = if batch {
            Some((mean.clone(), var.clone()))
        } else {
            None
        };
        let out = self.op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, pv| {
                let xd = pv[0].data();
                let gammad = pv[1].data();
                let gout = g.data();
                let mut dgamma = vec![0.0; ng];
                let mut dbeta = vec![0.0; ng];
                let mut dx = vec![0.0; xd.len()];
                for gi in 0..ng {
                    let inv = 1.0 / (var[gi] + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for ni in 0..n {
                        for s in 0..group {
                            let base = (ni * c + gi * group + s) * inner;
                            for px in 0..inner {
                                let xhat = (xd[base + px] - mean[gi]) * inv;
                                let dy = gout[base + px];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                        }
                    }
                    dbeta[gi] = sum_dy;
                    dgamma[gi] = sum_dy_xhat;
                    for ni in 0..n {
                        for s in 0..group {
                            let base = (ni * c + gi * group + s) * inner;
                            for px in 0..inner {
                                let xhat = (xd[base + px] - mean[gi]) * inv;
                                let dy = gout[base + px];
                                dx[base + px] = if batch {
                                    gammad[gi] * inv * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                                } else {
                                    gammad[gi] * inv * dy
                                };
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(pv[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(vec![ng], dgamma).unwrap(),
                    Tensor::new(vec![ng], dbeta).unwrap(),
                ]
            }),
        );
        Ok((out, stats_out))
    }
}

/// Statistics source for batch normalization.
#[derive(Clone, Debug)]
pub enum BnStats {
    Batch,
    Running { mean: Vec<f64>, var: Vec<f64> },
}

fn matmul_value(a: &Tensor, b: &Tensor, n: usize, k: usize, m: usize) -> Tensor {
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = ad[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * bd[l * m + j];
            }
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-1.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let g = Graph::new();
        let t = Tensor::new(vec![1, 1, 2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let x = g.input(t.clone(), false);
        let mut y = x;
        for _ in 0..4 {
            y = g.rot90(y, 1);
        }
        assert_eq!(g.value(y), t);
    }

    #[test]
    fn conv2d_all_ones_counting() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 5, 5], 1.0), false);
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = g.conv2d(x, w, Padding::Valid).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert!(v.data().iter().all(|&e| e == 9.0));
    }

    #[test]
    fn backward_sum_of_squares() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]), false);
        let b = g.input(Tensor::from_vec(vec![1.0]), false);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    #[test]
    fn rot90_adjoint_is_inverse_rotation() {
        // backward of rot90(k=1) applies rot270 to the upstream gradient
        let g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = g.rot90(x, 1);
        let mask = g.input(
            Tensor::new(vec![1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
            false,
        );
        let prod = g.mul(y, mask).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let expected = kernels::rot90_value(&g.value(mask), 3);
        assert_eq!(grads.wrt(x).unwrap(), &expected);
    }

    #[test]
    fn softmax_cross_entropy_matches_manual() {
        let g = Graph::new();
        let logits = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        let z: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((g.value(loss).item() - (z - 3.0)).abs() < 1e-12);
    }
}

//! Declarative model zoo: baseline CNN, parallel rotation / rotation+scale
//! GCNNs, cascaded GCNN, weighted parallel GCNN, and fully equivariant 4/10
//! layer stacks, with width rules keeping parameter budgets within 10% of
//! the baseline.

use crate::error::{Error, Result};
use crate::layers::{
    fuse, group_pool, p4_group_conv, p4_lift_conv, scale_equivariant_conv, Aggregation, Fusion,
    PoolMode, ScaleSet,
};
use crate::tensor::{BnStats, Graph, Padding, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"EQRBCKP1";
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    Baseline,
    ParallelRot,
    ParallelRotScale,
    Cascaded,
    WeightedParallel,
    FullyEquivariant,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 6] = [
        ArchitectureId::Baseline,
        ArchitectureId::ParallelRot,
        ArchitectureId::ParallelRotScale,
        ArchitectureId::Cascaded,
        ArchitectureId::WeightedParallel,
        ArchitectureId::FullyEquivariant,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::Baseline => "baseline",
            ArchitectureId::ParallelRot => "parallel_rot",
            ArchitectureId::ParallelRotScale => "parallel_rot_scale",
            ArchitectureId::Cascaded => "cascaded",
            ArchitectureId::WeightedParallel => "weighted_parallel",
            ArchitectureId::FullyEquivariant => "fully_equivariant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture_id `{s}`")))
    }

    /// Architectures whose logits are exactly invariant to input rotation.
    pub fn is_fully_equivariant(&self) -> bool {
        matches!(self, ArchitectureId::FullyEquivariant)
    }
}

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture_id: ArchitectureId,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub channel_plan: Vec<usize>,
    pub scale_set: ScaleSet,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(architecture_id: ArchitectureId, depth: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            architecture_id,
            depth,
            num_classes,
            in_channels: 3,
            channel_plan: Self::default_channel_plan(depth)?,
            scale_set: ScaleSet::new(ScaleSet::default_factors(), Aggregation::Concat)?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_channel_plan(depth: usize) -> Result<Vec<usize>> {
        match depth {
            4 => Ok(vec![32, 64, 128, 128]),
            10 => Ok(vec![32, 32, 64, 64, 128, 128, 256, 256, 256, 256]),
            _ => Err(Error::invalid(format!("depth must be 4 or 10, got {depth}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 4 && self.depth != 10 {
            return Err(Error::invalid(format!(
                "depth must be 4 or 10, got {}",
                self.depth
            )));
        }
        if self.channel_plan.len() != self.depth {
            return Err(Error::invalid(format!(
                "channel_plan length {} does not match depth {}",
                self.channel_plan.len(),
                self.depth
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::invalid("num_classes and in_channels must be positive"));
        }
        if self.channel_plan.iter().any(|&c| c == 0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer tree. Parameter fields are indices into the model's registry;
/// `stats` indexes the running batch-norm statistics.
#[derive(Clone, Debug)]
enum Block {
    Seq(Vec<Block>),
    Parallel {
        branches: Vec<Block>,
        fusion: Fusion,
        theta: Option<usize>,
    },
    Conv {
        w: usize,
    },
    Lift {
        w: usize,
    },
    GroupConv {
        w: usize,
    },
    GroupPool(PoolMode),
    ScaleConv {
        w: usize,
        scales: ScaleSet,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        group: usize,
        stats: usize,
    },
    Relu,
    MaxPool2,
    Gap,
    Dense {
        w: usize,
        b: usize,
    },
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<(String, Tensor)>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
    root: Block,
}

struct Builder {
    params: Vec<(String, Tensor)>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal conv filters: std = sqrt(2 / fan_in).
    fn conv_w(&mut self, name: &str, k_out: usize, c_in: usize, k: usize) -> usize {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let t = Tensor::randn(&[k_out, c_in, k, k], &mut self.rng).map(|v| v * std);
        self.params.push((name.to_string(), t));
        self.params.len() - 1
    }

    fn dense(&mut self, name: &str, c_in: usize, c_out: usize) -> (usize, usize) {
        let std = (2.0 / c_in as f64).sqrt();
        let w = Tensor::randn(&[c_in, c_out], &mut self.rng).map(|v| v * std);
        self.params.push((format!("{name}.w"), w));
        let wi = self.params.len() - 1;
        self.params.push((format!("{name}.b"), Tensor::zeros(&[c_out])));
        (wi, wi + 1)
    }

    fn bn(&mut self, name: &str, n_groups: usize) -> (usize, usize, usize) {
        self.params
            .push((format!("{name}.gamma"), Tensor::full(&[n_groups], 1.0)));
        let gi = self.params.len() - 1;
        self.params
            .push((format!("{name}.beta"), Tensor::zeros(&[n_groups])));
        self.running.push((vec![0.0; n_groups], vec![1.0; n_groups]));
        (gi, gi + 1, self.running.len() - 1)
    }

    fn theta(&mut self, name: &str, n: usize) -> usize {
        self.params.push((name.to_string(), Tensor::zeros(&[n])));
        self.params.len() - 1
    }

    /// conv -> BN -> ReLU
    fn std_block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        let w = self.conv_w(&format!("{name}.conv"), c_out, c_in, 3);
        let (gamma, beta, stats) = self.bn(&format!("{name}.bn"), c_out);
        Block::Seq(vec![
            Block::Conv { w },
            Block::BatchNorm { gamma, beta, group: 1, stats },
            Block::Relu,
        ])
    }

    /// lift -> group BN -> ReLU (orientation axis retained)
    fn lift_block(&mut self, name: &str, c_in: usize, filters: usize) -> Block {
        let w = self.conv_w(&format!("{name}.lift"), filters, c_in, 3);
        let (gamma, beta, stats) = self.bn(&format!("{name}.gbn"), filters);
        Block::Seq(vec![
            Block::Lift { w },
            Block::BatchNorm { gamma, beta, group: 4, stats },
            Block::Relu,
        ])
    }

    /// group conv -> group BN -> ReLU
    fn gconv_block(&mut self, name: &str, in_filters: usize, filters: usize) -> Block {
        let w = self.conv_w(&format!("{name}.gconv"), filters, in_filters * 4, 3);
        let (gamma, beta, stats) = self.bn(&format!("{name}.gbn"), filters);
        Block::Seq(vec![
            Block::GroupConv { w },
            Block::BatchNorm { gamma, beta, group: 4, stats },
            Block::Relu,
        ])
    }

    /// multi-scale conv -> BN -> ReLU; returns (block, out_channels)
    fn scale_block(
        &mut self,
        name: &str,
        c_in: usize,
        filters: usize,
        scales: &ScaleSet,
    ) -> (Block, usize) {
        let w = self.conv_w(&format!("{name}.sconv"), filters, c_in, 3);
        let c_out = match scales.aggregation {
            Aggregation::Concat => filters * scales.len(),
            Aggregation::Average => filters,
        };
        let (gamma, beta, stats) = self.bn(&format!("{name}.bn"), c_out);
        (
            Block::Seq(vec![
                Block::ScaleConv { w, scales: scales.clone() },
                Block::BatchNorm { gamma, beta, group: 1, stats },
                Block::Relu,
            ]),
            c_out,
        )
    }
}

pub fn build(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder::new(spec.seed);
    let plan = &spec.channel_plan;
    let d = spec.depth;
    let cin = spec.in_channels;
    let k = spec.num_classes;
    // max-pool after every second block
    let pool_after = |i: usize| i % 2 == 1;

    let mut blocks: Vec<Block> = Vec::new();
    let head_in;
    match spec.architecture_id {
        ArchitectureId::Baseline => {
            let mut c = cin;
            for (i, &w) in plan.iter().enumerate() {
                blocks.push(b.std_block(&format!("b{i}"), c, w));
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
                c = w;
            }
            head_in = c;
        }
        ArchitectureId::ParallelRot => {
            // first stage: standard + rotation branches, concat back to plan[0]
            let c_std = (plan[0] / 2).max(1);
            let k_rot = plan[0].saturating_sub(c_std).max(1);
            let std_branch = b.std_block("p0.std", cin, c_std);
            let rot_branch = Block::Seq(vec![
                b.lift_block("p0.rot", cin, k_rot),
                Block::GroupPool(PoolMode::Max),
            ]);
            blocks.push(Block::Parallel {
                branches: vec![std_branch, rot_branch],
                fusion: Fusion::Concat,
                theta: None,
            });
            if pool_after(0) {
                blocks.push(Block::MaxPool2);
            }
            let mut c = c_std + k_rot;
            for (i, &w) in plan.iter().enumerate().skip(1) {
                blocks.push(b.std_block(&format!("b{i}"), c, w));
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
                c = w;
            }
            head_in = c;
        }
        ArchitectureId::ParallelRotScale => {
            let n = spec.scale_set.len();
            let k_rot = (plan[0] / 4).max(1);
            let k_scale = ((plan[0] / 4).max(1) / n).max(1);
            let scale_out = match spec.scale_set.aggregation {
                Aggregation::Concat => k_scale * n,
                Aggregation::Average => k_scale,
            };
            let c_std = plan[0]
                .checked_sub(k_rot + scale_out)
                .filter(|&c| c > 0)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "channel_plan[0]={} too narrow to split across three branches",
                        plan[0]
                    ))
                })?;
            let std_branch = b.std_block("p0.std", cin, c_std);
            let rot_branch = Block::Seq(vec![
                b.lift_block("p0.rot", cin, k_rot),
                Block::GroupPool(PoolMode::Max),
            ]);
            let (scale_branch, got) = b.scale_block("p0.scale", cin, k_scale, &spec.scale_set);
            debug_assert_eq!(got, scale_out);
            blocks.push(Block::Parallel {
                branches: vec![std_branch, rot_branch, scale_branch],
                fusion: Fusion::Concat,
                theta: None,
            });
            if pool_after(0) {
                blocks.push(Block::MaxPool2);
            }
            let mut c = c_std + k_rot + scale_out;
            for (i, &w) in plan.iter().enumerate().skip(1) {
                blocks.push(b.std_block(&format!("b{i}"), c, w));
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
                c = w;
            }
            head_in = c;
        }
        ArchitectureId::WeightedParallel => {
            // equal-width branches summed under learnable softmax weights
            let w0 = plan[0];
            let std_branch = b.std_block("p0.std", cin, w0);
            let rot_branch = Block::Seq(vec![
                b.lift_block("p0.rot", cin, w0),
                Block::GroupPool(PoolMode::Max),
            ]);
            let avg_scales = ScaleSet {
                factors: spec.scale_set.factors.clone(),
                aggregation: Aggregation::Average,
                learnable_weights: false,
            };
            let (scale_branch, _) = b.scale_block("p0.scale", cin, w0, &avg_scales);
            let theta = b.theta("p0.fusion_theta", 3);
            blocks.push(Block::Parallel {
                branches: vec![std_branch, rot_branch, scale_branch],
                fusion: Fusion::WeightedSum,
                theta: Some(theta),
            });
            if pool_after(0) {
                blocks.push(Block::MaxPool2);
            }
            let mut c = w0;
            for (i, &w) in plan.iter().enumerate().skip(1) {
                blocks.push(b.std_block(&format!("b{i}"), c, w));
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
                c = w;
            }
            head_in = c;
        }
        ArchitectureId::Cascaded => {
            // standard stage, then a rotation stage, then a scale stage, then
            // standard blocks; the rotation stage is group-pooled before the
            // scale stage consumes it
            let rot_at = d / 2 - 1;
            let scale_at = d / 2;
            let mut c = cin;
            for (i, &w) in plan.iter().enumerate() {
                if i == rot_at {
                    blocks.push(Block::Seq(vec![
                        b.lift_block(&format!("b{i}.rot"), c, w),
                        Block::GroupPool(PoolMode::Max),
                    ]));
                    c = w;
                } else if i == scale_at {
                    // averaged aggregation keeps the stage at full width and
                    // its parameter count equal to the baseline layer
                    let avg = ScaleSet {
                        factors: spec.scale_set.factors.clone(),
                        aggregation: Aggregation::Average,
                        learnable_weights: false,
                    };
                    let (blk, c_out) = b.scale_block(&format!("b{i}.scale"), c, w, &avg);
                    blocks.push(blk);
                    c = c_out;
                } else {
                    blocks.push(b.std_block(&format!("b{i}"), c, w));
                    c = w;
                }
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
            }
            head_in = c;
        }
        ArchitectureId::FullyEquivariant => {
            // all-P4 stack at half width (4 orientation channels per filter
            // keep the parameter budget at baseline level); no standard conv
            let wd = |w: usize| (w / 2).max(1);
            let mut f = wd(plan[0]);
            blocks.push(b.lift_block("b0", cin, f));
            if pool_after(0) {
                blocks.push(Block::MaxPool2);
            }
            for (i, &w) in plan.iter().enumerate().skip(1) {
                let nf = wd(w);
                blocks.push(b.gconv_block(&format!("b{i}"), f, nf));
                if pool_after(i) {
                    blocks.push(Block::MaxPool2);
                }
                f = nf;
            }
            blocks.push(Block::GroupPool(PoolMode::Max));
            head_in = f;
        }
    }
    blocks.push(Block::Gap);
    let (wi, bi) = b.dense("head", head_in, k);
    blocks.push(Block::Dense { w: wi, b: bi });

    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        running: b.running,
        root: Block::Seq(blocks),
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.params
    }

    /// Eval-mode forward; parameters enter the tape without gradients.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let (logits, _, _) = self.forward_inner(g, x, Mode::Eval, false)?;
        Ok(logits)
    }

    /// Training forward: batch-norm uses batch statistics and running
    /// statistics are updated; returns the parameter vars in registry order
    /// for the optimizer.
    pub fn forward_train(&mut self, g: &Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let (logits, pvars, seen) = self.forward_inner(g, x, Mode::Train, true)?;
        for (idx, stats) in seen {
            let (rm, rv) = &mut self.running[idx];
            for (r, s) in rm.iter_mut().zip(&stats.0) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
            }
            for (r, s) in rv.iter_mut().zip(&stats.1) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
            }
        }
        Ok((logits, pvars))
    }

    #[allow(clippy::type_complexity)]
    fn forward_inner(
        &self,
        g: &Graph,
        x: Var,
        mode: Mode,
        param_grad: bool,
    ) -> Result<(Var, Vec<Var>, Vec<(usize, (Vec<f64>, Vec<f64>))>)> {
        let sx = g.shape_of(x);
        if sx.len() != 4 || sx[1] != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "forward expects (N,{},H,W) input, got {:?}",
                self.spec.in_channels, sx
            )));
        }
        let pvars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| g.input(t.clone(), param_grad))
            .collect();
        let mut seen = Vec::new();
        let mut layer_idx = 0usize;
        let logits = self.run_block(g, &self.root, x, mode, &pvars, &mut seen, &mut layer_idx)?;
        Ok((logits, pvars, seen))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        g: &Graph,
        block: &Block,
        x: Var,
        mode: Mode,
        pv: &[Var],
        seen: &mut Vec<(usize, (Vec<f64>, Vec<f64>))>,
        li: &mut usize,
    ) -> Result<Var> {
        let check = |v: Var, li: &mut usize, what: &str| -> Result<Var> {
            *li += 1;
            if !g.value(v).all_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite activation after layer {} ({what})",
                    *li - 1
                )));
            }
            Ok(v)
        };
        match block {
            Block::Seq(items) => {
                let mut v = x;
                for item in items {
                    v = self.run_block(g, item, v, mode, pv, seen, li)?;
                }
                Ok(v)
            }
            Block::Parallel { branches, fusion, theta } => {
                let outs: Vec<Var> = branches
                    .iter()
                    .map(|br| self.run_block(g, br, x, mode, pv, seen, li))
                    .collect::<Result<_>>()?;
                let t = theta.map(|i| pv[i]);
                let v = fuse(g, &outs, *fusion, t)?;
                check(v, li, "fuse")
            }
            Block::Conv { w } => check(g.conv2d(x, pv[*w], Padding::Same)?, li, "conv"),
            Block::Lift { w } => check(p4_lift_conv(g, x, pv[*w], Padding::Same)?, li, "lift"),
            Block::GroupConv { w } => {
                check(p4_group_conv(g, x, pv[*w], Padding::Same)?, li, "group_conv")
            }
            Block::GroupPool(mode_) => check(group_pool(g, x, *mode_)?, li, "group_pool"),
            Block::ScaleConv { w, scales } => check(
                scale_equivariant_conv(g, x, pv[*w], None, scales, None)?,
                li,
                "scale_conv",
            ),
            Block::BatchNorm { gamma, beta, group, stats } => {
                let bstats = match mode {
                    Mode::Train => BnStats::Batch,
                    Mode::Eval => {
                        let (m, v) = &self.running[*stats];
                        BnStats::Running { mean: m.clone(), var: v.clone() }
                    }
                };
                let (y, observed) =
                    g.batch_norm(x, pv[*gamma], pv[*beta], *group, bstats, BN_EPS)?;
                if let Some(obs) = observed {
                    seen.push((*stats, obs));
                }
                check(y, li, "batch_norm")
            }
            Block::Relu => check(g.relu(x), li, "relu"),
            Block::MaxPool2 => check(g.maxpool2(x)?, li, "maxpool"),
            Block::Gap => check(g.global_avg_pool(x)?, li, "global_avg_pool"),
            Block::Dense { w, b } => {
                let y = g.matmul(x, pv[*w])?;
                check(g.add_row(y, pv[*b])?, li, "dense")
            }
        }
    }

    /// Convenience eval: logits tensor for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = self.forward(&g, xv)?;
        Ok(g.value(out))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect())
    }

    pub fn running_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.running
    }

    /// Digest over spec and all learned state; used for reproducibility
    /// assertions in reports.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.digest());
        for (_, t) in &self.params {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for (m, v) in &self.running {
            for x in m.iter().chain(v) {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let spec_json = serde_json::to_vec(&self.spec).expect("spec serializes");
        buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&spec_json);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, t) in &self.params {
            buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.running.len() as u64).to_le_bytes());
        for (m, v) in &self.running {
            buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut h = Sha256::new();
        h.update(&buf);
        buf.extend_from_slice(&h.finalize());
        let mut f = std::fs::File::create(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        f.write_all(&buf).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Model> {
        let err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| err(e.to_string()))?;
        if buf.len() < CKPT_MAGIC.len() + 32 {
            return Err(err("file too short for header and checksum".into()));
        }
        let (body, checksum) = buf.split_at(buf.len() - 32);
        let mut h = Sha256::new();
        h.update(body);
        if h.finalize().as_slice() != checksum {
            return Err(err("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.bytes(8).ok_or_else(|| err("missing magic".into()))?;
        if magic != CKPT_MAGIC {
            return Err(err(format!(
                "bad magic/version {:?}, expected {:?}",
                magic, CKPT_MAGIC
            )));
        }
        let spec_len = r.u32().ok_or_else(|| err("missing spec length".into()))? as usize;
        let spec_json = r.bytes(spec_len).ok_or_else(|| err("missing spec".into()))?;
        let spec: ModelSpec =
            serde_json::from_slice(spec_json).map_err(|e| err(format!("bad spec json: {e}")))?;
        let mut model = build(&spec)?;
        let n_params = r.u64().ok_or_else(|| err("missing param count".into()))? as usize;
        if n_params != model.params.len() {
            return Err(err(format!(
                "parameter count {} does not match spec's {}",
                n_params,
                model.params.len()
            )));
        }
        for (name, t) in &mut model.params {
            let numel = r.u64().ok_or_else(|| err("truncated params".into()))? as usize;
            if numel != t.numel() {
                return Err(err(format!("parameter `{name}` has wrong element count")));
            }
            for v in t.data_mut() {
                *v = r.f64().ok_or_else(|| err("truncated params".into()))?;
            }
        }
        let n_running = r.u64().ok_or_else(|| err("missing stats count".into()))? as usize;
        if n_running != model.running.len() {
            return Err(err("running-stat count does not match spec".into()));
        }
        for (m, v) in &mut model.running {
            let len = r.u64().ok_or_else(|| err("truncated stats".into()))? as usize;
            if len != m.len() {
                return Err(err("running-stat length does not match spec".into()));
            }
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = r.f64().ok_or_else(|| err("truncated stats".into()))?;
            }
        }
        Ok(model)
    }

    /// Load and require the checkpoint to have been produced by `expected`.
    pub fn load_for_spec(path: &Path, expected: &ModelSpec) -> Result<Model> {
        let model = Model::load(path)?;
        if model.spec.digest() != expected.digest() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "spec digest mismatch: checkpoint built for {}/depth{}, expected {}/depth{}",
                    model.spec.architecture_id.as_str(),
                    model.spec.depth,
                    expected.architecture_id.as_str(),
                    expected.depth
                ),
            });
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.bytes(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.bytes(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.bytes(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Anything that maps an image batch to logits on a tape. Attacks and
/// certification are generic over this so analytic linear oracles can stand
/// in for full models in tests.
pub trait Classifier {
    fn forward_eval(&self, g: &Graph, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;

    fn logits_value(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = self.forward_eval(&g, xv)?;
        Ok(g.value(out))
    }

    fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_value(x)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect())
    }
}

impl Classifier for Model {
    fn forward_eval(&self, g: &Graph, x: Var) -> Result<Var> {
        self.forward(g, x)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Linear classifier over flattened pixels: logits = x_flat W + b.
/// Margins, CLEVER scores, and minimal flipping radii all have closed forms,
/// making this the reference oracle for the certification stack.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub w: Tensor, // (d, k)
    pub b: Tensor, // (k)
}

impl LinearModel {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.rank() != 2 || b.rank() != 1 || w.shape()[1] != b.shape()[0] {
            return Err(Error::invalid(format!(
                "linear model expects w (d,k) and b (k), got {:?} and {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(LinearModel { w, b })
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Column c minus column j of W: the margin gradient w_c - w_j.
    pub fn weight_diff(&self, c: usize, j: usize) -> Vec<f64> {
        let (d, k) = (self.w.shape()[0], self.w.shape()[1]);
        (0..d)
            .map(|i| self.w.data()[i * k + c] - self.w.data()[i * k + j])
            .collect()
    }
}

impl Classifier for LinearModel {
    fn forward_eval(&self, g: &Graph, x: Var) -> Result<Var> {
        let sx = g.shape_of(x);
        let n = sx[0];
        let d: usize = sx[1..].iter().product();
        if d != self.input_dim() {
            return Err(Error::invalid(format!(
                "linear model expects {} features, got shape {:?}",
                self.input_dim(),
                sx
            )));
        }
        let flat = g.reshape(x, vec![n, d])?;
        let wv = g.input(self.w.clone(), false);
        let bv = g.input(self.b.clone(), false);
        let y = g.matmul(flat, wv)?;
        g.add_row(y, bv)
    }

    fn num_classes(&self) -> usize {
        self.b.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(arch: ArchitectureId) -> ModelSpec {
        ModelSpec {
            architecture_id: arch,
            depth: 4,
            num_classes: 4,
            in_channels: 3,
            channel_plan: vec![8, 16, 16, 16],
            scale_set: ScaleSet::new(vec![0.75, 1.0, 1.25], Aggregation::Concat).unwrap(),
            seed: 7,
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(ArchitectureId::Baseline);
        s.depth = 5;
        assert!(s.validate().is_err());
        let mut s = small_spec(ArchitectureId::Baseline);
        s.channel_plan.pop();
        assert!(s.validate().is_err());
        assert!(ArchitectureId::parse("parallel_rot").is_ok());
        assert!(ArchitectureId::parse("resnet").is_err());
    }

    #[test]
    fn spec_serialization_round_trips() {
        let s = small_spec(ArchitectureId::Cascaded);
        let json = serde_json::to_string(&s).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.digest(), back.digest());
    }

    #[test]
    fn all_architectures_build_and_forward() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
        for arch in ArchitectureId::ALL {
            let m = build(&small_spec(arch)).unwrap();
            let logits = m.logits(&x).unwrap();
            assert_eq!(logits.shape(), &[2, 4], "{}", arch.as_str());
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn param_count_is_pure_function_of_spec() {
        let a = build(&small_spec(ArchitectureId::ParallelRotScale)).unwrap();
        let b = build(&small_spec(ArchitectureId::ParallelRotScale)).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(a.state_digest(), b.state_digest());
    }

    #[test]
    fn parameter_budgets_within_ten_percent_of_baseline() {
        let base = build(&ModelSpec::new(ArchitectureId::Baseline, 4, 10, 0).unwrap())
            .unwrap()
            .num_params() as f64;
        for arch in ArchitectureId::ALL {
            let spec = ModelSpec::new(arch, 4, 10, 0).unwrap();
            let n = build(&spec).unwrap().num_params() as f64;
            let rel = (n - base).abs() / base;
            assert!(rel <= 0.10, "{}: {} vs {} ({:.3})", arch.as_str(), n, base, rel);
        }
    }

    #[test]
    fn fully_equivariant_has_no_standard_conv() {
        let m = build(&small_spec(ArchitectureId::FullyEquivariant)).unwrap();
        assert!(m.param_names().all(|n| !n.contains(".conv") && !n.contains(".sconv")));
    }

    #[test]
    fn fully_equivariant_logits_rotation_invariant() {
        let m = build(&small_spec(ArchitectureId::FullyEquivariant)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
            let base = m.logits(&x).unwrap();
            for k in 1..4 {
                let rot = m.logits(&crate::layers::P4::act_input(&x, k)).unwrap();
                assert!(rot.max_abs_diff(&base) < 1e-9, "rotation {k}");
            }
        }
    }

    #[test]
    fn baseline_is_not_rotation_invariant() {
        let m = build(&small_spec(ArchitectureId::Baseline)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let base = m.logits(&x).unwrap();
        let rot = m.logits(&crate::layers::P4::act_input(&x, 1)).unwrap();
        assert!(rot.max_abs_diff(&base) > 1e-9);
    }

    #[test]
    fn zero_input_yields_head_bias() {
        for arch in [ArchitectureId::Baseline, ArchitectureId::ParallelRot] {
            let m = build(&small_spec(arch)).unwrap();
            let logits = m.logits(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
            // all conv layers are bias-free and BN affine init is (1, 0), so
            // zero input stays zero until the dense bias
            assert!(logits.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn batching_consistency() {
        let m = build(&small_spec(ArchitectureId::ParallelRotScale)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let batch = Tensor::uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut r);
        let all = m.logits(&batch).unwrap();
        for i in 0..3 {
            let one = Tensor::new(
                vec![1, 3, 16, 16],
                batch.data()[i * 3 * 256..(i + 1) * 3 * 256].to_vec(),
            )
            .unwrap();
            let li = m.logits(&one).unwrap();
            for j in 0..4 {
                assert!((li.data()[j] - all.data()[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build(&small_spec(ArchitectureId::WeightedParallel)).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
            assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
        }
        assert_eq!(m.state_digest(), back.state_digest());
    }

    #[test]
    fn truncated_checkpoint_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build(&small_spec(ArchitectureId::Baseline)).unwrap();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = Model::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn cross_spec_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        build(&small_spec(ArchitectureId::Baseline))
            .unwrap()
            .save(&path)
            .unwrap();
        let other = small_spec(ArchitectureId::Cascaded);
        let err = Model::load_for_spec(&path, &other).unwrap_err();
        assert!(err.to_string().contains("spec digest mismatch"), "{err}");
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut m = build(&small_spec(ArchitectureId::Baseline)).unwrap();
        let before = m.running_stats()[0].clone();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[4, 3, 16, 16], 0.0, 1.0, &mut r);
        let g = Graph::new();
        let xv = g.input(x, false);
        let (_, pvars) = m.forward_train(&g, xv).unwrap();
        assert_eq!(pvars.len(), m.params().len());
        assert_ne!(m.running_stats()[0], before);
    }
}

//! Finite-difference checks for every operator and network block.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, LossConfig, Targets};
use crate::network::{self, Ablation, Fusion, Net, NetworkConfig, NetworkParams};
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Subgraph};
use crate::tensor::{BnMode, ConvSpec, Graph, Real, RunningStats, Shape, Tensor, Var};

pub const F32_TOLERANCE: f64 = 1e-3;
pub const F64_TOLERANCE: f64 = 1e-6;
const EPS_DOUBLE: f64 = 1e-4;
const KINK_SINGLE: f64 = 1e-5;
const KINK_DOUBLE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Single => F32_TOLERANCE,
            Precision::Double => F64_TOLERANCE,
        }
    }

    /// Double precision uses the smallest allowed step and a tighter kink
    /// filter, since its tolerance is three orders of magnitude stricter.
    pub fn config(self) -> GradCheckConfig {
        match self {
            Precision::Single => GradCheckConfig {
                kink_tolerance: KINK_SINGLE,
                ..GradCheckConfig::default()
            },
            Precision::Double => GradCheckConfig {
                eps: EPS_DOUBLE,
                kink_tolerance: KINK_DOUBLE,
                ..GradCheckConfig::default()
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub precision: Precision,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.precision.tolerance())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape length")
}

/// `sum(x * w)` for a fixed random `w`, so gradients are not uniform.
fn project<T: Real>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(x), -1.0, 1.0).cast();
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug)]
enum OpKind {
    Conv(ConvSpec, usize),
    BatchNorm,
    Relu,
    Sigmoid,
    Tanh,
    Upsample,
    MulBroadcast,
    Add,
    Concat,
    Slice,
    AttentionLoss,
    OrientationLoss,
}

struct OpCheck {
    kind: OpKind,
    fault: bool,
}

impl Subgraph for OpCheck {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = match self.kind {
            OpKind::Conv(spec, _) => g.conv2d(v[0], v[1], Some(v[2]), spec)?,
            OpKind::BatchNorm => {
                let c = g.shape(v[0]).c;
                let mut stats = RunningStats::new(c);
                g.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Train)?
            }
            OpKind::Relu => g.relu(v[0]),
            OpKind::Sigmoid => g.sigmoid(v[0]),
            OpKind::Tanh => g.tanh(v[0]),
            OpKind::Upsample => {
                let s = g.shape(v[0]);
                g.upsample_bilinear(v[0], 2 * s.h + 1, 2 * s.w)?
            }
            OpKind::MulBroadcast => g.mul(v[0], v[1])?,
            OpKind::Add => g.add(v[0], v[1])?,
            OpKind::Concat => g.concat_channels(&[v[0], v[1]])?,
            OpKind::Slice => g.slice_channels(v[0], 1, 2)?,
            OpKind::AttentionLoss => {
                let p = g.sigmoid(v[0]);
                let gt = edge_target(g.shape(v[0]));
                return losses::attention_loss(g, p, &gt, &LossConfig::default());
            }
            OpKind::OrientationLoss => {
                let s = g.shape(v[0]);
                let target = orientation_target(s);
                return losses::orientation_loss(g, v[0], &target, &edge_target(s), &LossConfig::default());
            }
        };
        project(g, y, 11)
    }

    fn inject_fault(&self) -> bool {
        self.fault
    }
}

fn edge_target<T: Real>(s: Shape) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data = (0..s.len()).map(|_| if rng.gen_bool(0.3) { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(s, data).expect("shape length")
}

fn orientation_target<T: Real>(s: Shape) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let pi = std::f64::consts::PI;
    let data = (0..s.len()).map(|_| T::from_f64_lossy(rng.gen_range(-pi..pi))).collect();
    Tensor::from_vec(s, data).expect("shape length")
}

fn op_inputs(kind: OpKind, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let x = Shape::new(2, 3, 5, 6);
    match kind {
        OpKind::Conv(_, k) => vec![
            uniform(rng, x, -1.0, 1.0),
            uniform(rng, Shape::new(4, 3, k, k), -0.5, 0.5),
            uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5),
        ],
        OpKind::BatchNorm => vec![
            uniform(rng, x, -2.0, 2.0),
            uniform(rng, Shape::new(1, 3, 1, 1), 0.5, 1.5),
            uniform(rng, Shape::new(1, 3, 1, 1), -0.5, 0.5),
        ],
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Upsample | OpKind::Slice => {
            vec![uniform(rng, x, -2.0, 2.0)]
        }
        OpKind::MulBroadcast => vec![uniform(rng, x, -1.0, 1.0), uniform(rng, Shape::new(2, 1, 5, 6), -1.0, 1.0)],
        OpKind::Add => vec![uniform(rng, x, -1.0, 1.0), uniform(rng, x, -1.0, 1.0)],
        OpKind::Concat => vec![uniform(rng, x, -1.0, 1.0), uniform(rng, Shape::new(2, 2, 5, 6), -1.0, 1.0)],
        OpKind::AttentionLoss => vec![uniform(rng, Shape::new(2, 1, 6, 6), -3.0, 3.0)],
        OpKind::OrientationLoss => vec![uniform(rng, Shape::new(2, 1, 6, 6), -3.0, 3.0)],
    }
}

/// Which part of the network a check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Backbone,
    Sfr,
    Csa,
    Cff,
    Awr,
    Heads,
    EndToEnd,
}

impl Block {
    fn owns(self, name: &str) -> bool {
        match self {
            Block::Backbone => name.starts_with("stem") || name.starts_with("stage") || name.starts_with("decoder"),
            Block::Sfr => name.starts_with("sfr"),
            Block::Csa => name.starts_with("csa"),
            Block::Cff => name.starts_with("cff"),
            Block::Awr => name.starts_with("awr"),
            Block::Heads => name.starts_with("head."),
            Block::EndToEnd => true,
        }
    }
}

/// A network block with its own parameters as the only differentiable inputs
/// besides the block's feature inputs.
struct BlockCheck {
    block: Block,
    cfg: NetworkConfig,
    ablation: Ablation,
    params: NetworkParams<f64>,
    /// Indices of parameters passed as inputs, after the feature inputs.
    owned: Vec<usize>,
    features: usize,
}

impl BlockCheck {
    fn new(block: Block, ablation: Ablation) -> Self {
        let mut cfg = NetworkConfig::reduced();
        if block == Block::EndToEnd {
            cfg.input_height = 32;
            cfg.input_width = 32;
        }
        let mut params = NetworkParams::<f64>::init(&cfg, ablation, 5);
        // Start from an even edge prior so the loss is not dominated by a few terms.
        if let Some(b) = params.get_mut("head.edge.b") {
            b.data_mut().fill(0.0);
        }
        // Non-trivial batch-norm affine terms and biases.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in params.tensors_mut() {
            if t.shape().n == 1 && t.shape().h == 1 {
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
        }
        let owned = params
            .layout()
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| block.owns(&p.name))
            .map(|(i, _)| i)
            .collect();
        let features = match block {
            Block::Backbone | Block::EndToEnd => 1,
            Block::Sfr => 3,
            Block::Csa | Block::Heads => 1,
            Block::Cff => 5,
            Block::Awr => 2,
        };
        Self {
            block,
            cfg,
            ablation,
            params,
            owned,
            features,
        }
    }

    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let c = &self.cfg;
        // The end-to-end case mirrors a single 32x32 training image.
        let n = if self.block == Block::EndToEnd { 1 } else { 2 };
        let (h, w) = (c.input_height, c.input_width);
        let [c1, c2, c3, c4] = c.stage_channels;
        let mut out = match self.block {
            Block::Backbone | Block::EndToEnd => vec![uniform(rng, Shape::new(n, 3, h, w), -1.0, 1.0)],
            Block::Sfr => vec![
                uniform(rng, Shape::new(n, c1, h, w), -1.0, 1.0),
                uniform(rng, Shape::new(n, c2, h / 2, w / 2), -1.0, 1.0),
                uniform(rng, Shape::new(n, c3, h / 4, w / 4), -1.0, 1.0),
            ],
            Block::Csa => vec![uniform(rng, Shape::new(n, c4, h / 8, w / 8), -1.0, 1.0)],
            Block::Cff => {
                let mut v: Vec<_> = (0..3).map(|_| uniform(rng, Shape::new(n, c.sfr_channels, h, w), 0.0, 1.0)).collect();
                v.push(uniform(rng, Shape::new(n, c.csa_channels, h, w), -1.0, 1.0));
                v.push(uniform(rng, Shape::new(n, c.decoder_channels, h, w), -1.0, 1.0));
                v
            }
            Block::Awr => vec![
                uniform(rng, Shape::new(n, c.csa_channels, h, w), -1.0, 1.0),
                uniform(rng, Shape::new(n, c.fusion_channels, h, w), 0.0, 1.0),
            ],
            Block::Heads => vec![uniform(rng, Shape::new(n, self.ablation.head_channels(c), h, w), -1.0, 1.0)],
        };
        out.extend(self.owned.iter().map(|&i| self.params.tensors()[i].clone()));
        out
    }
}

impl Subgraph for BlockCheck {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let (features, owned) = v.split_at(self.features);
        let mut vars = Vec::with_capacity(self.params.tensors().len());
        let mut next = owned.iter();
        for (i, t) in self.params.tensors().iter().enumerate() {
            if self.owned.contains(&i) {
                vars.push(*next.next().expect("owned parameter input"));
            } else {
                vars.push(g.constant(t.cast()));
            }
        }
        let binding = self.params.bind_vars(vars)?;
        let mut stats: Vec<RunningStats<T>> = self.params.stats().iter().map(RunningStats::cast).collect();
        let mut net = Net::new(g, &binding, &mut stats, BnMode::Train);
        let (h, w) = (self.cfg.input_height, self.cfg.input_width);
        let y = match self.block {
            Block::Backbone => {
                let out = network::backbone_forward(&mut net, features[0], &self.cfg)?;
                let d = project(net.g, out.decoder, 31)?;
                let s = project(net.g, out.sides[1], 32)?;
                return Ok(net.g.add(d, s)?);
            }
            Block::Sfr => {
                let s = network::sfr_forward(&mut net, [features[0], features[1], features[2]], h, w)?;
                net.g.concat_channels(&s)?
            }
            Block::Csa => network::csa_forward(&mut net, features[0], &self.cfg, h, w)?,
            Block::Cff => {
                let s = [features[0], features[1], features[2]];
                network::cff_forward(&mut net, s, features[3], features[4], Fusion::Fuse)?
            }
            Block::Awr => {
                let (c, r) = network::awr_forward(&mut net, features[0], features[1])?;
                let pc = project(net.g, c, 33)?;
                let pr = project(net.g, r, 34)?;
                return Ok(net.g.add(pc, pr)?);
            }
            Block::Heads => {
                let out = network::heads_forward(&mut net, features[0])?;
                let e = project(net.g, out.edge_prob, 35)?;
                let o = project(net.g, out.orientation, 36)?;
                return Ok(net.g.add(e, o)?);
            }
            Block::EndToEnd => {
                let out = network::ccenet_forward(&mut net, features[0], &self.cfg, self.ablation)?;
                let s = Shape::new(1, 1, h, w);
                let targets = Targets {
                    edges: edge_target(s),
                    orientation: orientation_target(s),
                };
                let terms = losses::total_loss(
                    net.g,
                    out.heads.edge_prob,
                    out.heads.orientation,
                    &targets,
                    &LossConfig::default(),
                )?;
                return Ok(terms.total);
            }
        };
        project(net.g, y, 30)
    }
}

/// Names of all checks, in run order.
pub const CHECKS: [&str; 21] = [
    "conv2d",
    "conv2d_strided",
    "conv2d_dilated",
    "batch_norm",
    "relu",
    "sigmoid",
    "tanh",
    "bilinear_upsample",
    "mul_broadcast",
    "add",
    "concat",
    "slice",
    "attention_loss",
    "orientation_loss",
    "backbone",
    "sfr",
    "csa",
    "cff",
    "awr",
    "heads",
    "end_to_end",
];

fn op_kind(name: &str) -> Option<OpKind> {
    Some(match name {
        "conv2d" => OpKind::Conv(ConvSpec::same(3, 1), 3),
        "conv2d_strided" => OpKind::Conv(ConvSpec::strided(3, 2), 3),
        "conv2d_dilated" => OpKind::Conv(ConvSpec::same(3, 2), 3),
        "batch_norm" => OpKind::BatchNorm,
        "relu" => OpKind::Relu,
        "sigmoid" => OpKind::Sigmoid,
        "tanh" => OpKind::Tanh,
        "bilinear_upsample" => OpKind::Upsample,
        "mul_broadcast" => OpKind::MulBroadcast,
        "add" => OpKind::Add,
        "concat" => OpKind::Concat,
        "slice" => OpKind::Slice,
        "attention_loss" => OpKind::AttentionLoss,
        "orientation_loss" => OpKind::OrientationLoss,
        _ => return None,
    })
}

fn block(name: &str) -> Option<(Block, Ablation)> {
    Some(match name {
        "backbone" => (Block::Backbone, Ablation::Base),
        "sfr" => (Block::Sfr, Ablation::Full),
        "csa" => (Block::Csa, Ablation::Full),
        "cff" => (Block::Cff, Ablation::Full),
        "awr" => (Block::Awr, Ablation::Full),
        "heads" => (Block::Heads, Ablation::Full),
        "end_to_end" => (Block::EndToEnd, Ablation::Full),
        _ => return None,
    })
}

/// Runs one named check. `fault` flips the sign of conv input gradients on
/// the analytic side, which every check containing a conv must detect.
pub fn run_check(name: &str, precision: Precision, fault: bool) -> Result<CheckOutcome> {
    let name = CHECKS
        .iter()
        .copied()
        .find(|n| *n == name)
        .ok_or_else(|| crate::Error::Invalid(format!("unknown gradient check {name:?}")))?;
    let cfg = precision.config();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let start = Instant::now();
    let report = if let Some(kind) = op_kind(name) {
        let sub = OpCheck { kind, fault };
        let inputs = op_inputs(kind, &mut rng);
        dispatch(&sub, &inputs, &cfg, precision)?
    } else {
        let (b, ablation) = block(name).expect("every check is an op or a block");
        let sub = FaultyBlock {
            inner: BlockCheck::new(b, ablation),
            fault,
        };
        let inputs = smooth_inputs(&sub.inner, &mut rng)?;
        dispatch(&sub, &inputs, &cfg, precision)?
    };
    Ok(CheckOutcome {
        name,
        precision,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Minimum distance of every ReLU input from zero at the evaluation point.
///
/// Single precision rounds the forward pass by about 1e-6; a pre-activation
/// closer to zero than that may take the other ReLU branch than the `f64`
/// reference, and train-mode batch norm spreads the flipped contribution to
/// every gradient. Such points are kinks, not gradient errors.
pub const RELU_MARGIN: f64 = 1e-5;

fn smooth_inputs(check: &BlockCheck, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    for _ in 0..64 {
        let inputs = check.inputs(rng);
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        check.build(&mut g, &vars)?;
        if g.relu_margin().is_none_or(|m| m >= RELU_MARGIN) {
            return Ok(inputs);
        }
    }
    Err(crate::Error::Invalid(format!(
        "no evaluation point with ReLU margin {RELU_MARGIN} found for {:?}",
        check.block
    )))
}

struct FaultyBlock {
    inner: BlockCheck,
    fault: bool,
}

impl Subgraph for FaultyBlock {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        self.inner.build(g, v)
    }

    fn inject_fault(&self) -> bool {
        self.fault
    }
}

fn dispatch<S: Subgraph>(
    sub: &S,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    precision: Precision,
) -> Result<GradCheckReport> {
    match precision {
        Precision::Single => grad_check::<f32, S>(sub, inputs, cfg),
        Precision::Double => grad_check::<f64, S>(sub, inputs, cfg),
    }
}

/// Every check in both precisions.
pub fn run_suite(fault: bool) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(2 * CHECKS.len());
    for precision in [Precision::Single, Precision::Double] {
        for name in CHECKS {
            out.push(run_check(name, precision, fault)?);
        }
    }
    Ok(out)
}

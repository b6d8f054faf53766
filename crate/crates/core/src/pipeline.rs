//! Run configuration and the generate / train / eval / ablate workflows.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, uniform_thresholds, EvalConfig, EvalImage, EvalSummary};
use crate::losses::{total_loss, LossConfig, Sgd, SgdConfig, Targets};
use crate::network::{ccenet_forward, predict, Ablation, Net, NetworkConfig, NetworkParams};
use crate::synthetic::{read_dataset, scene_specs, write_dataset, Sample, SceneMix, MANIFEST_NAME};
use crate::tensor::{io as tensor_io, BnMode, Graph, Tensor};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OCTK_THREADS";
pub const CONFIG_FILE: &str = "run_config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Worker threads from `OCTK_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Every setting of a run, serializable as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_size: usize,
    pub max_shapes: usize,
    pub texture_max: f64,
    pub shadow_probability: f64,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub ablation: Ablation,
    /// Iterations per ablation row; 0 uses `iterations`.
    pub ablation_iterations: u64,
    pub eval_thresholds: usize,
    /// Matching distance in pixels; `None` is 0.0075 of the diagonal.
    pub match_distance: Option<f64>,
    pub eval_batch: usize,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            train_scenes: 500,
            test_scenes: 100,
            scene_size: 64,
            max_shapes: 4,
            texture_max: 0.6,
            shadow_probability: 0.5,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            sgd: SgdConfig {
                lr_step: 1500,
                ..SgdConfig::default()
            },
            iterations: 2000,
            checkpoint_every: 500,
            ablation: Ablation::Full,
            ablation_iterations: 0,
            eval_thresholds: 99,
            match_distance: None,
            eval_batch: 10,
            resume: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    pub const KEYS: [&'static str; 35] = [
        "seed",
        "data_dir",
        "out_dir",
        "train_scenes",
        "test_scenes",
        "scene_size",
        "max_shapes",
        "texture_max",
        "shadow_probability",
        "stage_channels",
        "blocks_per_stage",
        "sfr_channels",
        "csa_channels",
        "fusion_channels",
        "decoder_channels",
        "dilation",
        "lambda",
        "mini_batch",
        "alpha",
        "gamma",
        "smooth_l1_beta",
        "lr",
        "momentum",
        "weight_decay",
        "iter_size",
        "lr_step",
        "iterations",
        "checkpoint_every",
        "ablation",
        "ablation_iterations",
        "eval_thresholds",
        "match_distance",
        "eval_batch",
        "resume",
        "checkpoint",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "test_scenes" => self.test_scenes = parse(key, v)?,
            "scene_size" => self.scene_size = parse(key, v)?,
            "max_shapes" => self.max_shapes = parse(key, v)?,
            "texture_max" => self.texture_max = parse(key, v)?,
            "shadow_probability" => self.shadow_probability = parse(key, v)?,
            "stage_channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                self.network.stage_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four comma-separated widths")))?;
            }
            "blocks_per_stage" => self.network.blocks_per_stage = parse(key, v)?,
            "sfr_channels" => self.network.sfr_channels = parse(key, v)?,
            "csa_channels" => self.network.csa_channels = parse(key, v)?,
            "fusion_channels" => self.network.fusion_channels = parse(key, v)?,
            "decoder_channels" => self.network.decoder_channels = parse(key, v)?,
            "dilation" => self.network.dilation = parse(key, v)?,
            "lambda" => self.loss.lambda = parse(key, v)?,
            "mini_batch" => self.loss.mini_batch = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "smooth_l1_beta" => self.loss.smooth_l1_beta = parse(key, v)?,
            "lr" => self.sgd.base_lr = parse(key, v)?,
            "momentum" => self.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "iter_size" => self.sgd.iter_size = parse(key, v)?,
            "lr_step" => self.sgd.lr_step = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "ablation_iterations" => self.ablation_iterations = parse(key, v)?,
            "eval_thresholds" => self.eval_thresholds = parse(key, v)?,
            "match_distance" => {
                self.match_distance = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "resume" => self.resume = optional_path(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let n = &self.network;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "train_scenes" => self.train_scenes.to_string(),
            "test_scenes" => self.test_scenes.to_string(),
            "scene_size" => self.scene_size.to_string(),
            "max_shapes" => self.max_shapes.to_string(),
            "texture_max" => self.texture_max.to_string(),
            "shadow_probability" => self.shadow_probability.to_string(),
            "stage_channels" => n.stage_channels.map(|c| c.to_string()).join(","),
            "blocks_per_stage" => n.blocks_per_stage.to_string(),
            "sfr_channels" => n.sfr_channels.to_string(),
            "csa_channels" => n.csa_channels.to_string(),
            "fusion_channels" => n.fusion_channels.to_string(),
            "decoder_channels" => n.decoder_channels.to_string(),
            "dilation" => n.dilation.to_string(),
            "lambda" => self.loss.lambda.to_string(),
            "mini_batch" => self.loss.mini_batch.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "gamma" => self.loss.gamma.to_string(),
            "smooth_l1_beta" => self.loss.smooth_l1_beta.to_string(),
            "lr" => self.sgd.base_lr.to_string(),
            "momentum" => self.sgd.momentum.to_string(),
            "weight_decay" => self.sgd.weight_decay.to_string(),
            "iter_size" => self.sgd.iter_size.to_string(),
            "lr_step" => self.sgd.lr_step.to_string(),
            "iterations" => self.iterations.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "ablation" => self.ablation.to_string(),
            "ablation_iterations" => self.ablation_iterations.to_string(),
            "eval_thresholds" => self.eval_thresholds.to_string(),
            "match_distance" => self.match_distance.map_or_else(|| "auto".into(), |d| d.to_string()),
            "eval_batch" => self.eval_batch.to_string(),
            "resume" => show_path(&self.resume),
            "checkpoint" => show_path(&self.checkpoint),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# occedge run configuration\n");
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).expect("string write");
        }
        s
    }

    /// Network configuration with the input extents of the scenes.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_height: self.scene_size,
            input_width: self.scene_size,
            ..self.network.clone()
        }
    }

    pub fn scene_mix(&self) -> SceneMix {
        SceneMix {
            width: self.scene_size,
            height: self.scene_size,
            max_shapes: self.max_shapes,
            texture_max: self.texture_max,
            shadow_probability: self.shadow_probability,
            ..SceneMix::default()
        }
    }

    pub fn eval_config(&self, threads: usize) -> EvalConfig {
        EvalConfig {
            thresholds: uniform_thresholds(self.eval_thresholds),
            max_distance: self.match_distance,
            threads,
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        self.loss.validate()?;
        self.sgd.validate()?;
        if !self.scene_size.is_multiple_of(8) {
            return Err(Error::Config(format!("scene_size {} must be a multiple of 8", self.scene_size)));
        }
        if !(1..=5).contains(&self.max_shapes) {
            return Err(Error::Config("max_shapes must be 1..=5".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_max) || !(0.0..=1.0).contains(&self.shadow_probability) {
            return Err(Error::Config("texture_max and shadow_probability must lie in [0, 1]".into()));
        }
        if self.eval_thresholds == 0 || self.eval_batch == 0 {
            return Err(Error::Config("eval_thresholds and eval_batch must be positive".into()));
        }
        if let Some(d) = self.match_distance {
            if !(d > 0.0) {
                return Err(Error::Config("match_distance must be positive".into()));
            }
        }
        Ok(())
    }

    /// Writes the configuration into `dir` before any other output.
    pub fn record(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir.join("train").join(MANIFEST_NAME)
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir.join("test").join(MANIFEST_NAME)
    }
}

/// Master seed of the held-out split, decorrelated from the training split.
fn test_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Writes the train and test splits under `data_dir`.
pub fn generate(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    cfg.record(&cfg.data_dir)?;
    let mix = cfg.scene_mix();
    let train = write_dataset(&scene_specs(cfg.seed, cfg.train_scenes, &mix), &cfg.data_dir.join("train"))?;
    let test = write_dataset(&scene_specs(test_seed(cfg.seed), cfg.test_scenes, &mix), &cfg.data_dir.join("test"))?;
    Ok((train, test))
}

/// Loads every sample of a manifest, failing on the first broken entry.
pub fn load_split(manifest: &Path) -> Result<Vec<Sample>> {
    let data = read_dataset(manifest)?;
    if let Some((line, err)) = data.errors.into_iter().next() {
        return Err(Error::format(manifest, format!("entry on line {line}: {err}")));
    }
    if data.samples.is_empty() {
        return Err(Error::format(manifest, "no samples"));
    }
    Ok(data.samples)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub al_sum: f64,
    pub sl_sum: f64,
    pub total: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "iteration,lr,AL_sum,SL_sum,total";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.iteration, self.lr, self.al_sum, self.sl_sum, self.total)
    }
}

/// Deterministic minibatch order: a fresh permutation per epoch.
struct Sampler {
    seed: u64,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Self { seed, n, epoch: None }
    }

    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch);
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().expect("epoch set").1[(position % self.n as u64) as usize]
    }

    fn batch(&mut self, iteration: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|k| self.index(iteration * size as u64 + k)).collect()
    }
}

/// Parameters plus optimizer state on disk.
pub fn save_checkpoint(dir: &Path, params: &NetworkParams<f32>, sgd: &Sgd<f32>) -> Result<()> {
    params.save(dir)?;
    let opt = dir.join("optimizer");
    fs::create_dir_all(&opt).map_err(|e| Error::io(&opt, e))?;
    for ((info, v), a) in params.layout().params().iter().zip(sgd.velocity()).zip(sgd.accumulated()) {
        tensor_io::save(v, &opt.join(format!("{}.velocity.octk", info.name)))?;
        tensor_io::save(a, &opt.join(format!("{}.accum.octk", info.name)))?;
    }
    let state = opt.join("state.txt");
    fs::write(&state, format!("pending = {}\n", sgd.pending())).map_err(|e| Error::io(&state, e))
}

/// Loads a checkpoint; the optimizer state is restored into `sgd` when given.
pub fn load_checkpoint(
    dir: &Path,
    cfg: &NetworkConfig,
    ablation: Ablation,
    sgd: Option<&mut Sgd<f32>>,
) -> Result<NetworkParams<f32>> {
    let params = NetworkParams::<f32>::load(dir, cfg, ablation)?;
    if let Some(sgd) = sgd {
        let opt = dir.join("optimizer");
        let mut velocity = Vec::new();
        let mut accum = Vec::new();
        for info in params.layout().params() {
            velocity.push(tensor_io::load(&opt.join(format!("{}.velocity.octk", info.name)))?);
            accum.push(tensor_io::load(&opt.join(format!("{}.accum.octk", info.name)))?);
        }
        let state = opt.join("state.txt");
        let text = fs::read_to_string(&state).map_err(|e| Error::io(&state, e))?;
        let pending = text
            .trim()
            .strip_prefix("pending = ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&state, "expected `pending = N`"))?;
        sgd.restore(velocity, accum, pending)?;
    }
    Ok(params)
}

pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub log: Vec<LogRow>,
    /// The final checkpoint directory.
    pub checkpoint: PathBuf,
}

fn stack_batch(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<f32>, Targets<f32>)> {
    let images: Vec<Tensor<f32>> = idx.iter().map(|&i| samples[i].image()).collect();
    let maps: Vec<_> = idx.iter().map(|&i| (&samples[i].edges, &samples[i].orientation)).collect();
    Ok((Tensor::stack(&images)?, Targets::from_maps(&maps)?))
}

/// Trains `cfg.ablation` on `samples` for `cfg.iterations` minibatches.
///
/// Writes the configuration, a CSV log with one row per minibatch, periodic
/// checkpoints and `checkpoints/final` under `cfg.out_dir`. `progress` sees
/// every log row as it is produced.
pub fn train(cfg: &RunConfig, samples: &[Sample], mut progress: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_cfg = cfg.network_config();
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (net_cfg.input_height, net_cfg.input_width)) {
        return Err(Error::Config(format!(
            "sample {} is {}x{}, configuration expects scene_size {}",
            s.name, s.width, s.height, cfg.scene_size
        )));
    }
    cfg.record(&cfg.out_dir)?;
    let mut params = NetworkParams::<f32>::init(&net_cfg, cfg.ablation, cfg.seed);
    let mut sgd = Sgd::new(cfg.sgd.clone(), &params);
    if let Some(dir) = &cfg.resume {
        params = load_checkpoint(dir, &net_cfg, cfg.ablation, Some(&mut sgd))?;
    }
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "{}", LogRow::HEADER).map_err(|e| Error::io(&log_path, e))?;
    let ckpt_root = cfg.out_dir.join("checkpoints");
    let mut sampler = Sampler::new(cfg.seed, samples.len());
    let mut log = Vec::new();

    while params.iteration < cfg.iterations {
        let it = params.iteration;
        let lr = cfg.sgd.lr_at(it);
        let (images, targets) = stack_batch(samples, &sampler.batch(it, cfg.loss.mini_batch))?;
        let mut g = Graph::<f32>::new();
        let binding = params.bind(&mut g);
        let x = g.constant(images);
        let mut stats = params.stats().to_vec();
        let mut net = Net::new(&mut g, &binding, &mut stats, BnMode::Train);
        let out = ccenet_forward(&mut net, x, &net_cfg, cfg.ablation)?;
        let terms = total_loss(&mut g, out.heads.edge_prob, out.heads.orientation, &targets, &cfg.loss)?;
        let row = LogRow {
            iteration: it + 1,
            lr,
            al_sum: f64::from(g.value(terms.al_sum).item()),
            sl_sum: f64::from(g.value(terms.sl_sum).item()),
            total: f64::from(g.value(terms.total).item()),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", row.iteration)));
        }
        let grads = g.backward(terms.total)?;
        let grads: Vec<Tensor<f32>> = binding
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        sgd.step(&mut params, &grads, lr)
            .map_err(|e| Error::NonFinite(format!("iteration {}: {e}", row.iteration)))?;
        params.stats_mut().clone_from_slice(&stats);
        params.iteration += 1;

        writeln!(log_file, "{}", row.csv()).map_err(|e| Error::io(&log_path, e))?;
        progress(&row);
        log.push(row);
        if cfg.checkpoint_every > 0 && params.iteration.is_multiple_of(cfg.checkpoint_every) && params.iteration < cfg.iterations {
            save_checkpoint(&ckpt_root.join(format!("iter_{:06}", params.iteration)), &params, &sgd)?;
        }
    }
    let checkpoint = ckpt_root.join("final");
    save_checkpoint(&checkpoint, &params, &sgd)?;
    Ok(TrainOutcome {
        params,
        log,
        checkpoint,
    })
}

/// Edge probability and orientation maps for each sample, in order.
pub fn predict_samples(
    params: &NetworkParams<f32>,
    samples: &[Sample],
    net_cfg: &NetworkConfig,
    ablation: Ablation,
    batch: usize,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(Sample::image).collect();
        let p = predict(params, &Tensor::stack(&images)?, net_cfg, ablation)?;
        for i in 0..chunk.len() {
            out.push((
                p.edge_prob.batch_item(i).into_vec(),
                p.orientation.batch_item(i).into_vec(),
            ));
        }
    }
    Ok(out)
}

/// Mean predicted edge probability on shadow-boundary pixels against the
/// mean on occlusion-edge pixels of the same scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistractorStats {
    pub scenes: usize,
    pub shadow_pixels: usize,
    pub edge_pixels: usize,
    pub mean_shadow: f64,
    pub mean_edge: f64,
}

impl DistractorStats {
    pub fn ratio(&self) -> f64 {
        self.mean_shadow / self.mean_edge
    }
}

pub fn distractor_stats(samples: &[Sample], predictions: &[(Vec<f32>, Vec<f32>)]) -> Option<DistractorStats> {
    let (mut scenes, mut ns, mut ne, mut ss, mut se) = (0, 0, 0, 0.0, 0.0);
    for (s, (prob, _)) in samples.iter().zip(predictions) {
        let Some(shadow) = &s.shadow_edges else { continue };
        if shadow.is_empty() {
            continue;
        }
        scenes += 1;
        for (i, &p) in prob.iter().enumerate() {
            if shadow.values()[i] != 0 {
                ns += 1;
                ss += f64::from(p);
            }
            if s.edges.values()[i] != 0 {
                ne += 1;
                se += f64::from(p);
            }
        }
    }
    (ns > 0 && ne > 0).then(|| DistractorStats {
        scenes,
        shadow_pixels: ns,
        edge_pixels: ne,
        mean_shadow: ss / ns as f64,
        mean_edge: se / ne as f64,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub epr: EvalSummary,
    pub opr: EvalSummary,
    pub distractors: Option<DistractorStats>,
}

impl EvalReport {
    pub fn summary_text(&self) -> String {
        let mut s = format!("EPR {}\nOPR {}\n", self.epr.summary_line(), self.opr.summary_line());
        if let Some(d) = &self.distractors {
            writeln!(
                s,
                "SHADOW mean_prob={:.4} EDGE mean_prob={:.4} ratio={:.4} scenes={}",
                d.mean_shadow,
                d.mean_edge,
                d.ratio(),
                d.scenes
            )
            .expect("string write");
        }
        s
    }

    /// `epr_curve.csv`, `opr_curve.csv` and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.epr.write_curve(&dir.join("epr_curve.csv"))?;
        self.opr.write_curve(&dir.join("opr_curve.csv"))?;
        let path = dir.join("summary.txt");
        fs::write(&path, self.summary_text()).map_err(|e| Error::io(&path, e))
    }
}

/// EPR, OPR and shadow statistics of `predictions` against `samples`.
pub fn evaluate_predictions(
    samples: &[Sample],
    predictions: &[(Vec<f32>, Vec<f32>)],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let images: Vec<EvalImage<'_>> = samples
        .iter()
        .zip(predictions)
        .map(|(s, (p, o))| EvalImage {
            prob: p,
            orientation: Some(o),
            gt_edges: &s.edges,
            gt_orientation: Some(&s.orientation),
        })
        .collect();
    let (epr, opr) = evaluate(&images, eval)?;
    Ok(EvalReport {
        epr,
        opr: opr.expect("orientations supplied"),
        distractors: distractor_stats(samples, predictions),
    })
}

/// Evaluates trained parameters on a split and writes the report to `dir`.
pub fn evaluate_params(
    cfg: &RunConfig,
    params: &NetworkParams<f32>,
    samples: &[Sample],
    threads: usize,
    dir: &Path,
) -> Result<EvalReport> {
    let preds = predict_samples(params, samples, &cfg.network_config(), cfg.ablation, cfg.eval_batch)?;
    let report = evaluate_predictions(samples, &preds, &cfg.eval_config(threads))?;
    report.write(dir)?;
    Ok(report)
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub result: std::result::Result<EvalReport, String>,
}

/// Trains and evaluates every ablation row under the same seed and schedule.
/// A failing row is recorded and the remaining rows still run.
pub fn ablate(
    cfg: &RunConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    threads: usize,
    progress: impl FnMut(Ablation, &LogRow),
) -> Result<Vec<AblationRow>> {
    let rows = ablate_rows(cfg, &Ablation::ALL, train_set, test_set, threads, progress)?;
    let table = ablation_table(&rows);
    let path = cfg.out_dir.join("ablation.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Trains and evaluates the listed rows only, in order; writes no table.
pub fn ablate_rows(
    cfg: &RunConfig,
    which: &[Ablation],
    train_set: &[Sample],
    test_set: &[Sample],
    threads: usize,
    mut progress: impl FnMut(Ablation, &LogRow),
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.record(&cfg.out_dir)?;
    let mut rows = Vec::with_capacity(which.len());
    for &ablation in which {
        let dir = cfg.out_dir.join("rows").join(ablation.to_string());
        let row_cfg = RunConfig {
            ablation,
            out_dir: dir.clone(),
            iterations: if cfg.ablation_iterations > 0 {
                cfg.ablation_iterations
            } else {
                cfg.iterations
            },
            resume: None,
            ..cfg.clone()
        };
        let result = train(&row_cfg, train_set, |r| progress(ablation, r))
            .and_then(|t| evaluate_params(&row_cfg, &t.params, test_set, threads, &dir.join("eval")))
            .map_err(|e| e.to_string());
        rows.push(AblationRow { ablation, result });
    }
    Ok(rows)
}

/// CSV with one line per row; failed rows keep their label and the error.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,epr_ods,epr_ois,epr_ap,opr_ods,opr_ois,opr_ap,status\n");
    for r in rows {
        match &r.result {
            Ok(rep) => writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},ok",
                r.ablation.label(),
                rep.epr.ods,
                rep.epr.ois,
                rep.epr.ap,
                rep.opr.ods,
                rep.opr.ois,
                rep.opr.ap
            ),
            Err(e) => writeln!(s, "{},,,,,,,failed: {}", r.ablation.label(), e.replace(',', ";")),
        }
        .expect("string write");
    }
    s
}

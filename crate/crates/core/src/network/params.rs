use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ablation, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Graph, Real, RunningStats, Shape, Tensor, Var};

/// Initial edge probability. Starting near the edge frequency keeps the first
/// updates from silencing every feature to push the background down.
pub const EDGE_PRIOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Only convolution weights take weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Names and shapes of every learnable tensor and batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    params: Vec<ParamInfo>,
    bns: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
    bn_index: HashMap<String, usize>,
}

impl Layout {
    pub(super) fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool) {
        self.push(format!("{name}.w"), Shape::new(out_c, in_c, k, k), ParamKind::ConvWeight);
        if bias {
            self.push(format!("{name}.b"), Shape::new(1, out_c, 1, 1), ParamKind::ConvBias);
        }
    }

    pub(super) fn bn(&mut self, name: &str, channels: usize) {
        self.push(format!("{name}.scale"), Shape::new(1, channels, 1, 1), ParamKind::BnScale);
        self.push(format!("{name}.shift"), Shape::new(1, channels, 1, 1), ParamKind::BnShift);
        assert!(
            self.bn_index.insert(name.to_string(), self.bns.len()).is_none(),
            "duplicate batch norm {name}"
        );
        self.bns.push((name.to_string(), channels));
    }

    fn push(&mut self, name: String, shape: Shape, kind: ParamKind) {
        assert!(
            self.param_index.insert(name.clone(), self.params.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.params.push(ParamInfo { name, shape, kind });
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn batch_norms(&self) -> &[(String, usize)] {
        &self.bns
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_index.get(name).copied()
    }

    pub fn bn_index(&self, name: &str) -> Option<usize> {
        self.bn_index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.shape.len()).sum()
    }
}

/// All learnable tensors, batch-norm running statistics and the iteration counter.
#[derive(Clone, Debug)]
pub struct NetworkParams<T: Real = f32> {
    layout: Arc<Layout>,
    tensors: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
    pub iteration: u64,
}

impl<T: Real> NetworkParams<T> {
    /// Fan-in scaled uniform init for convolutions, unit scale / zero shift for
    /// batch norm, zero biases except the edge head, whose bias starts at the
    /// logit of [`EDGE_PRIOR`].
    pub fn init(cfg: &NetworkConfig, ablation: Ablation, seed: u64) -> Self {
        let layout = Arc::new(super::layout(cfg, ablation));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::ConvWeight => {
                    let fan_in = (p.shape.c * p.shape.h * p.shape.w) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let data = (0..p.shape.len())
                        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(p.shape, data).expect("layout shape")
                }
                ParamKind::BnScale => Tensor::ones(p.shape),
                ParamKind::ConvBias if p.name == "head.edge.b" => {
                    let logit = (EDGE_PRIOR / (1.0 - EDGE_PRIOR)).ln();
                    Tensor::full(p.shape, T::from_f64_lossy(logit))
                }
                ParamKind::ConvBias | ParamKind::BnShift => Tensor::zeros(p.shape),
            })
            .collect();
        let stats = layout.bns.iter().map(|(_, c)| RunningStats::new(*c)).collect();
        Self {
            layout,
            tensors,
            stats,
            iteration: 0,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.param_index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.param_index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Binding {
            layout: self.layout.clone(),
            vars,
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_constants(&self, g: &mut Graph<T>) -> Binding {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Binding {
            layout: self.layout.clone(),
            vars,
        }
    }

    /// Uses caller-provided leaves (one per parameter, layout order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Binding> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter leaves, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Binding {
            layout: self.layout.clone(),
            vars,
        })
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            stats: self.stats.iter().map(RunningStats::cast).collect(),
            iteration: self.iteration,
        }
    }

    /// Writes one `OCTK` file per tensor plus a text manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# occedge checkpoint\n");
        writeln!(manifest, "iteration = {}", self.iteration).expect("string write");
        for (info, t) in self.layout.params.iter().zip(&self.tensors) {
            let file = format!("{}.octk", info.name);
            tensor_io::save(t, &dir.join(&file))?;
            let s = info.shape;
            writeln!(manifest, "param {} {} {}x{}x{}x{}", info.name, file, s.n, s.c, s.h, s.w).expect("string write");
        }
        for ((name, c), st) in self.layout.bns.iter().zip(&self.stats) {
            let (mf, vf) = (format!("{name}.running_mean.octk"), format!("{name}.running_var.octk"));
            tensor_io::save(&Tensor::vector(st.mean.clone()), &dir.join(&mf))?;
            tensor_io::save(&Tensor::vector(st.var.clone()), &dir.join(&vf))?;
            writeln!(manifest, "stats {name} {mf} {vf} {c}").expect("string write");
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, checking every entry against the layout of `cfg`/`ablation`.
    pub fn load(dir: &Path, cfg: &NetworkConfig, ablation: Ablation) -> Result<Self> {
        let mut params = Self::init(cfg, ablation, 0);
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seen_params = vec![false; params.tensors.len()];
        let mut seen_stats = vec![false; params.stats.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(&path, format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["iteration", "=", n] => {
                    params.iteration = n.parse().map_err(|_| bad(format!("bad iteration {n:?}")))?;
                }
                ["param", name, file, _shape] => {
                    let i = params
                        .layout
                        .param_index(name)
                        .ok_or_else(|| bad(format!("parameter {name} not in the configured network")))?;
                    let t: Tensor<T> = tensor_io::load(&dir.join(file))?;
                    let want = params.layout.params[i].shape;
                    if t.shape() != want {
                        return Err(bad(format!("{name} has shape {}, configuration expects {want}", t.shape())));
                    }
                    params.tensors[i] = t;
                    seen_params[i] = true;
                }
                ["stats", name, mean_file, var_file, _c] => {
                    let i = params
                        .layout
                        .bn_index(name)
                        .ok_or_else(|| bad(format!("batch norm {name} not in the configured network")))?;
                    let mean: Tensor<T> = tensor_io::load(&dir.join(mean_file))?;
                    let var: Tensor<T> = tensor_io::load(&dir.join(var_file))?;
                    let want = params.layout.bns[i].1;
                    if mean.len() != want || var.len() != want {
                        return Err(bad(format!("{name} stats have {} channels, expected {want}", mean.len())));
                    }
                    params.stats[i] = RunningStats {
                        mean: mean.into_vec(),
                        var: var.into_vec(),
                    };
                    seen_stats[i] = true;
                }
                _ => return Err(bad(format!("unrecognized entry {line:?}"))),
            }
        }
        if let Some(i) = seen_params.iter().position(|s| !s) {
            return Err(Error::format(&path, format!("missing parameter {}", params.layout.params[i].name)));
        }
        if let Some(i) = seen_stats.iter().position(|s| !s) {
            return Err(Error::format(&path, format!("missing stats for {}", params.layout.bns[i].0)));
        }
        Ok(params)
    }
}

/// Graph leaves for one set of parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    layout: Arc<Layout>,
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.layout
            .param_index(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("network has no parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.layout.param_index(name).is_some()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

//! Residual encoder/decoder with side-output refinement, dilated context,
//! feature fusion and attention reweighting.

mod params;

use std::fmt;
use std::str::FromStr;

pub use params::{Binding, Layout, NetworkParams, ParamInfo, ParamKind, EDGE_PRIOR};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvSpec, Graph, Real, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Widths of the four encoder stages.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub sfr_channels: usize,
    pub csa_channels: usize,
    pub fusion_channels: usize,
    pub decoder_channels: usize,
    pub dilation: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: 2,
            sfr_channels: 8,
            csa_channels: 16,
            fusion_channels: 16,
            decoder_channels: 16,
            dilation: 2,
            input_height: 64,
            input_width: 64,
        }
    }
}

impl NetworkConfig {
    /// A narrow variant for finite-difference checks.
    pub fn reduced() -> Self {
        Self {
            stage_channels: [2, 3, 3, 4],
            blocks_per_stage: 1,
            sfr_channels: 2,
            csa_channels: 2,
            fusion_channels: 2,
            decoder_channels: 2,
            dilation: 2,
            input_height: 16,
            input_width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.sfr_channels,
            self.csa_channels,
            self.fusion_channels,
            self.decoder_channels,
            self.blocks_per_stage,
            self.dilation,
        ];
        if self.stage_channels.iter().chain(&widths).any(|&c| c == 0) {
            return Err(Error::Config("channel counts, block count and dilation must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || !self.input_height.is_multiple_of(8) || !self.input_width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input extents {}x{} must be positive multiples of 8",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    fn decoder_mid_channels(&self) -> usize {
        self.stage_channels[1]
    }
}

/// The cumulative rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    Base,
    Sfr,
    Csa,
    /// SFR and CSA streams concatenated without the fusion block.
    Concat,
    /// SFR and CSA fused by conv, batch norm and ReLU.
    Cff,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Concat,
    Fuse,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::Sfr,
        Ablation::Csa,
        Ablation::Concat,
        Ablation::Cff,
        Ablation::Full,
    ];

    /// Rejects combinations that skip a prerequisite module.
    pub fn from_flags(sfr: bool, csa: bool, fusion: Option<Fusion>, awr: bool) -> Result<Self> {
        match (sfr, csa, fusion, awr) {
            (false, false, None, false) => Ok(Ablation::Base),
            (true, false, None, false) => Ok(Ablation::Sfr),
            (false, true, None, false) => Ok(Ablation::Csa),
            (true, true, Some(Fusion::Concat), false) => Ok(Ablation::Concat),
            (true, true, Some(Fusion::Fuse), false) => Ok(Ablation::Cff),
            (true, true, Some(Fusion::Fuse), true) => Ok(Ablation::Full),
            (true, true, None, _) => Err(Error::Config("SFR together with CSA needs a fusion mode".into())),
            (_, _, Some(_), _) if !(sfr && csa) => Err(Error::Config("fusion requires both SFR and CSA".into())),
            _ => Err(Error::Config("AWR requires the fused (CFF) stream".into())),
        }
    }

    pub fn uses_sfr(self) -> bool {
        matches!(self, Ablation::Sfr | Ablation::Concat | Ablation::Cff | Ablation::Full)
    }

    pub fn uses_csa(self) -> bool {
        matches!(self, Ablation::Csa | Ablation::Concat | Ablation::Cff | Ablation::Full)
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            Ablation::Concat => Some(Fusion::Concat),
            Ablation::Cff | Ablation::Full => Some(Fusion::Fuse),
            _ => None,
        }
    }

    pub fn uses_awr(self) -> bool {
        self == Ablation::Full
    }

    /// Row label used in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Sfr => "+SFR",
            Ablation::Csa => "+CSA",
            Ablation::Concat => "+SFR+CSA(CONCAT)",
            Ablation::Cff => "+SFR+CSA(CFF)",
            Ablation::Full => "+SFR+CSA(CFF)+AWR",
        }
    }

    /// Channel count reaching the heads.
    pub fn head_channels(self, cfg: &NetworkConfig) -> usize {
        let s = 3 * cfg.sfr_channels;
        let h = cfg.csa_channels;
        let d = cfg.decoder_channels;
        match self {
            Ablation::Base => d,
            Ablation::Sfr => s + d,
            Ablation::Csa => h + d,
            Ablation::Concat => s + h + d,
            Ablation::Cff | Ablation::Full => cfg.fusion_channels,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let key = match self {
            Ablation::Base => "base",
            Ablation::Sfr => "sfr",
            Ablation::Csa => "csa",
            Ablation::Concat => "concat",
            Ablation::Cff => "cff",
            Ablation::Full => "full",
        };
        f.write_str(key)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts the short keys (`base`, `sfr`, `csa`, `concat`, `cff`, `full`),
    /// `+`-joined module lists such as `sfr+csa+cff+awr`, and the table labels.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "base" => return Ok(Ablation::Base),
            "concat" => return Ok(Ablation::Concat),
            // A bare "cff" names the fused row, which implies both streams.
            "cff" => return Ok(Ablation::Cff),
            "full" => return Ok(Ablation::Full),
            _ => {}
        }
        let (mut sfr, mut csa, mut fusion, mut awr) = (false, false, None, false);
        for part in lower.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "sfr" => sfr = true,
                "csa" => csa = true,
                "csa(cff)" => (csa, fusion) = (true, Some(Fusion::Fuse)),
                "csa(concat)" => (csa, fusion) = (true, Some(Fusion::Concat)),
                "cff" => fusion = Some(Fusion::Fuse),
                "awr" => awr = true,
                other => return Err(Error::Config(format!("unknown ablation module {other:?} in {s:?}"))),
            }
        }
        Ablation::from_flags(sfr, csa, fusion, awr)
    }
}

/// Layer names and shapes for a given configuration and ablation row.
pub fn layout(cfg: &NetworkConfig, ablation: Ablation) -> Layout {
    let mut l = Layout::default();
    let [c1, _, _, c4] = cfg.stage_channels;
    l.conv("stem", c1, 3, 3, false);
    l.bn("stem.bn", c1);
    let mut in_c = c1;
    for (s, &out_c) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let p = format!("stage{}.block{}", s + 1, b + 1);
            l.conv(&format!("{p}.conv1"), out_c, in_c, 3, false);
            l.bn(&format!("{p}.bn1"), out_c);
            l.conv(&format!("{p}.conv2"), out_c, out_c, 3, false);
            l.bn(&format!("{p}.bn2"), out_c);
            if block_stride(s, b) != 1 || in_c != out_c {
                l.conv(&format!("{p}.proj"), out_c, in_c, 1, false);
                l.bn(&format!("{p}.proj.bn"), out_c);
            }
            in_c = out_c;
        }
    }
    let mid = cfg.decoder_mid_channels();
    l.conv("decoder.conv1", mid, c4, 3, false);
    l.bn("decoder.conv1.bn", mid);
    l.conv("decoder.conv2", cfg.decoder_channels, mid, 3, true);
    if ablation.uses_sfr() {
        for i in 0..3 {
            l.conv(&format!("sfr{}", i + 1), cfg.sfr_channels, cfg.stage_channels[i], 1, false);
            l.bn(&format!("sfr{}.bn", i + 1), cfg.sfr_channels);
        }
    }
    if ablation.uses_csa() {
        l.conv("csa.dilated", c4, c4, 3, false);
        l.bn("csa.dilated.bn", c4);
        for i in 1..=2 {
            l.conv(&format!("csa.block{i}"), c4, c4, 3, false);
            l.bn(&format!("csa.block{i}.bn"), c4);
        }
        l.conv("csa.reduce", cfg.csa_channels, c4, 1, true);
    }
    if ablation.fusion() == Some(Fusion::Fuse) {
        let in_c = Ablation::Concat.head_channels(cfg);
        l.conv("cff", cfg.fusion_channels, in_c, 1, false);
        l.bn("cff.bn", cfg.fusion_channels);
    }
    if ablation.uses_awr() {
        l.conv("awr", 1, cfg.csa_channels, 3, true);
    }
    let head_c = ablation.head_channels(cfg);
    l.conv("head.edge", 1, head_c, 3, true);
    l.conv("head.orientation", 1, head_c, 3, true);
    l
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

/// Graph context shared by the module builders: parameter leaves, running
/// statistics and the batch-norm mode.
pub struct Net<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a Binding,
    pub stats: &'a mut [RunningStats<T>],
    pub mode: BnMode,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a Binding, stats: &'a mut [RunningStats<T>], mode: BnMode) -> Self {
        Self { g, params, stats, mode }
    }

    fn conv(&mut self, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = self.params.get(&format!("{name}.w"))?;
        let bias_name = format!("{name}.b");
        let b = if self.params.has(&bias_name) {
            Some(self.params.get(&bias_name)?)
        } else {
            None
        };
        Ok(self.g.conv2d(x, w, b, spec)?)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let scale = self.params.get(&format!("{name}.scale"))?;
        let shift = self.params.get(&format!("{name}.shift"))?;
        let i = self
            .params
            .layout()
            .bn_index(name)
            .ok_or_else(|| Error::Invalid(format!("network has no batch norm {name}")))?;
        Ok(self.g.batch_norm(x, scale, shift, &mut self.stats[i], self.mode)?)
    }

    fn conv_bn(&mut self, name: &str, x: Var, spec: ConvSpec, bn: &str) -> Result<Var> {
        let y = self.conv(name, x, spec)?;
        self.bn(bn, y)
    }

    fn conv_bn_relu(&mut self, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let y = self.conv_bn(name, x, spec, &format!("{name}.bn"))?;
        Ok(self.g.relu(y))
    }

    /// Bilinear resize; a no-op at matching extents.
    fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.g.shape(x);
        if s.h == h && s.w == w {
            Ok(x)
        } else {
            Ok(self.g.upsample_bilinear(x, h, w)?)
        }
    }
}

/// Encoder taps and decoder output.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub sides: [Var; 3],
    pub deep: Var,
    pub decoder: Var,
}

pub fn backbone_forward<T: Real>(net: &mut Net<'_, T>, image: Var, cfg: &NetworkConfig) -> Result<BackboneOutput> {
    let s = net.g.shape(image);
    if s.c != 3 {
        return Err(Error::Invalid(format!("image must have 3 channels, got {}", s.c)));
    }
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(8) || !s.w.is_multiple_of(8) {
        return Err(Error::Invalid(format!("image extents {}x{} are not divisible by 8", s.h, s.w)));
    }
    let (full_h, full_w) = (s.h, s.w);
    let mut x = net.conv("stem", image, ConvSpec::same(3, 1))?;
    x = net.bn("stem.bn", x)?;
    x = net.g.relu(x);
    let mut in_c = cfg.stage_channels[0];
    let mut taps = Vec::with_capacity(3);
    for (si, &out_c) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let p = format!("stage{}.block{}", si + 1, b + 1);
            let stride = block_stride(si, b);
            // The last stage grows its receptive field by dilation after its single downsampling.
            let dilation = if si == 3 && b > 0 { cfg.dilation } else { 1 };
            let first = if stride == 2 {
                ConvSpec::strided(3, 2)
            } else {
                ConvSpec::same(3, dilation)
            };
            let mut y = net.conv_bn(&format!("{p}.conv1"), x, first, &format!("{p}.bn1"))?;
            y = net.g.relu(y);
            y = net.conv_bn(&format!("{p}.conv2"), y, ConvSpec::same(3, dilation), &format!("{p}.bn2"))?;
            let skip = if stride != 1 || in_c != out_c {
                net.conv_bn(&format!("{p}.proj"), x, ConvSpec::strided(1, stride), &format!("{p}.proj.bn"))?
            } else {
                x
            };
            let sum = net.g.add(y, skip)?;
            x = net.g.relu(sum);
            in_c = out_c;
        }
        if si < 3 {
            taps.push(x);
        }
    }
    let deep = x;
    let ds = net.g.shape(deep);
    let up = net.resize(deep, ds.h * 2, ds.w * 2)?;
    let y = net.conv_bn_relu("decoder.conv1", up, ConvSpec::same(3, 1))?;
    let y = net.resize(y, full_h, full_w)?;
    let decoder = net.conv("decoder.conv2", y, ConvSpec::same(3, 1))?;
    Ok(BackboneOutput {
        sides: [taps[0], taps[1], taps[2]],
        deep,
        decoder,
    })
}

/// Channel-reduced, upsampled side outputs.
pub fn sfr_forward<T: Real>(net: &mut Net<'_, T>, sides: [Var; 3], height: usize, width: usize) -> Result<[Var; 3]> {
    let mut out = [sides[0]; 3];
    for (i, side) in sides.into_iter().enumerate() {
        let y = net.conv_bn_relu(&format!("sfr{}", i + 1), side, ConvSpec::same(1, 1))?;
        out[i] = net.resize(y, height, width)?;
    }
    Ok(out)
}

/// Contour-sensitive map from the deep feature.
pub fn csa_forward<T: Real>(
    net: &mut Net<'_, T>,
    deep: Var,
    cfg: &NetworkConfig,
    height: usize,
    width: usize,
) -> Result<Var> {
    let mut y = net.conv_bn_relu("csa.dilated", deep, ConvSpec::same(3, cfg.dilation))?;
    for i in 1..=2 {
        y = net.conv_bn_relu(&format!("csa.block{i}"), y, ConvSpec::same(3, 1))?;
    }
    let y = net.conv("csa.reduce", y, ConvSpec::same(1, 1))?;
    net.resize(y, height, width)
}

/// Concatenates the streams; with `Fusion::Fuse` also applies conv, batch norm and ReLU.
pub fn cff_forward<T: Real>(net: &mut Net<'_, T>, s: [Var; 3], h: Var, d: Var, fusion: Fusion) -> Result<Var> {
    let cat = net.g.concat_channels(&[s[0], s[1], s[2], h, d])?;
    match fusion {
        Fusion::Concat => Ok(cat),
        Fusion::Fuse => net.conv_bn_relu("cff", cat, ConvSpec::same(1, 1)),
    }
}

/// Attention map `C = sigmoid(conv(H))` and the reweighted features `R = F * C`.
pub fn awr_forward<T: Real>(net: &mut Net<'_, T>, h: Var, f: Var) -> Result<(Var, Var)> {
    let logits = net.conv("awr", h, ConvSpec::same(3, 1))?;
    let c = net.g.sigmoid(logits);
    let r = net.g.mul(f, c)?;
    Ok((c, r))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub edge_logits: Var,
    pub edge_prob: Var,
    pub orientation: Var,
}

pub fn heads_forward<T: Real>(net: &mut Net<'_, T>, x: Var) -> Result<HeadOutput> {
    let edge_logits = net.conv("head.edge", x, ConvSpec::same(3, 1))?;
    let edge_prob = net.g.sigmoid(edge_logits);
    let raw = net.conv("head.orientation", x, ConvSpec::same(3, 1))?;
    let squashed = net.g.tanh(raw);
    let orientation = net.g.scale(squashed, T::from_f64_lossy(std::f64::consts::PI));
    Ok(HeadOutput {
        edge_logits,
        edge_prob,
        orientation,
    })
}

/// Every named intermediate map of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub s: Option<[Var; 3]>,
    pub h: Option<Var>,
    pub d: Var,
    pub f: Option<Var>,
    pub c: Option<Var>,
    pub r: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub heads: HeadOutput,
    pub features: FeatureVars,
    /// Tensor fed to the heads.
    pub head_input: Var,
}

/// Composes the modules enabled by `ablation`; disabled streams are simply absent.
pub fn ccenet_forward<T: Real>(
    net: &mut Net<'_, T>,
    image: Var,
    cfg: &NetworkConfig,
    ablation: Ablation,
) -> Result<ForwardOutput> {
    let shape = net.g.shape(image);
    let (h, w) = (shape.h, shape.w);
    let bb = backbone_forward(net, image, cfg)?;
    let s = if ablation.uses_sfr() {
        Some(sfr_forward(net, bb.sides, h, w)?)
    } else {
        None
    };
    let hmap = if ablation.uses_csa() {
        Some(csa_forward(net, bb.deep, cfg, h, w)?)
    } else {
        None
    };
    let d = bb.decoder;
    let mut f = None;
    let mut c = None;
    let mut r = None;
    let head_input = match (s, hmap, ablation.fusion()) {
        (None, None, _) => d,
        (Some(s), None, _) => net.g.concat_channels(&[s[0], s[1], s[2], d])?,
        (None, Some(hm), _) => net.g.concat_channels(&[hm, d])?,
        (Some(s), Some(hm), Some(mode)) => {
            let fused = cff_forward(net, s, hm, d, mode)?;
            f = Some(fused);
            if ablation.uses_awr() {
                let (cm, rm) = awr_forward(net, hm, fused)?;
                c = Some(cm);
                r = Some(rm);
                rm
            } else {
                fused
            }
        }
        (Some(_), Some(_), None) => unreachable!("ablation rows with both streams always fuse"),
    };
    let heads = heads_forward(net, head_input)?;
    Ok(ForwardOutput {
        heads,
        features: FeatureVars { s, h: hmap, d, f, c, r },
        head_input,
    })
}

/// Intermediate maps copied out of a finished graph.
#[derive(Clone, Debug)]
pub struct FeatureBundle<T: Real = f32> {
    pub s: Option<[Tensor<T>; 3]>,
    pub h: Option<Tensor<T>>,
    pub d: Tensor<T>,
    pub f: Option<Tensor<T>>,
    pub c: Option<Tensor<T>>,
    pub r: Option<Tensor<T>>,
}

impl<T: Real> FeatureBundle<T> {
    pub fn collect(g: &Graph<T>, vars: &FeatureVars) -> Self {
        let get = |v: Var| g.value(v).clone();
        Self {
            s: vars.s.map(|s| s.map(get)),
            h: vars.h.map(get),
            d: get(vars.d),
            f: vars.f.map(get),
            c: vars.c.map(get),
            r: vars.r.map(get),
        }
    }
}

/// Network outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real = f32> {
    pub edge_prob: Tensor<T>,
    pub orientation: Tensor<T>,
    pub features: FeatureBundle<T>,
}

/// Inference on a batch without keeping the graph.
pub fn predict<T: Real>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
    cfg: &NetworkConfig,
    ablation: Ablation,
) -> Result<Prediction<T>> {
    let mut g = Graph::new();
    let binding = params.bind_constants(&mut g);
    let x = g.constant(image.clone());
    let mut stats = params.stats().to_vec();
    let mut net = Net::new(&mut g, &binding, &mut stats, BnMode::Infer);
    let out = ccenet_forward(&mut net, x, cfg, ablation)?;
    Ok(Prediction {
        edge_prob: g.value(out.heads.edge_prob).clone(),
        orientation: g.value(out.heads.orientation).clone(),
        features: FeatureBundle::collect(&g, &out.features),
    })
}

//! Teacher/student feature networks (PDN-style conv stacks), the bottlenecked
//! feature encoder, the feature converter, and teacher-output standardization.
//!
//! Every network maps a `[N, 3, S, S]` input (or, for the converter, a feature
//! map) to `[N, feature_dim, S/4, S/4]` features.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaceError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdnVariant {
    S,
    M,
    Tiny,
}

impl std::str::FromStr for PdnVariant {
    type Err = SpaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(PdnVariant::S),
            "m" => Ok(PdnVariant::M),
            "tiny" | "tiny-for-test" => Ok(PdnVariant::Tiny),
            other => Err(SpaceError::config(format!("unknown pdn_variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for PdnVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PdnVariant::S => "s",
            PdnVariant::M => "m",
            PdnVariant::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub feature_dim: usize,
    pub pdn_variant: PdnVariant,
    pub fe_bottleneck_dim: usize,
    pub fm_layers: usize,
    pub fm_kernel: usize,
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            feature_dim: 384,
            pdn_variant: PdnVariant::M,
            fe_bottleneck_dim: 256,
            fm_layers: 3,
            fm_kernel: 3,
            input_size: 256,
        }
    }
}

impl NetworkConfig {
    pub fn tiny() -> Self {
        NetworkConfig {
            feature_dim: 32,
            pdn_variant: PdnVariant::Tiny,
            fe_bottleneck_dim: 32,
            fm_layers: 3,
            fm_kernel: 3,
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.fe_bottleneck_dim == 0 {
            return Err(SpaceError::config("feature_dim and fe_bottleneck_dim must be positive"));
        }
        if self.fm_kernel.is_multiple_of(2) {
            return Err(SpaceError::config(format!("fm_kernel must be odd, got {}", self.fm_kernel)));
        }
        if self.input_size < 32 || !self.input_size.is_power_of_two() {
            return Err(SpaceError::config(format!(
                "input_size must be a power of two >= 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// `(C, H_f, W_f)` produced by every network for this input size.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let s = self.input_size / 4;
        (self.feature_dim, s, s)
    }

    fn pdn_widths(&self) -> (usize, usize) {
        match self.pdn_variant {
            PdnVariant::M => (256, 512),
            PdnVariant::S => (128, 256),
            PdnVariant::Tiny => ((self.feature_dim / 2).max(8), self.feature_dim),
        }
    }

    fn encoder_width(&self) -> usize {
        match self.pdn_variant {
            PdnVariant::M => 64,
            PdnVariant::S => 32,
            PdnVariant::Tiny => 32,
        }
    }
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| SpaceError::config(format!("missing parameter '{name}'")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeroed(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Same parameter names and shapes as `reference`.
    pub fn check_layout(&self, reference: &ParamSet, what: &str) -> Result<()> {
        if self.tensors.len() != reference.tensors.len() {
            return Err(SpaceError::config(format!(
                "{what}: expected {} parameters, found {}",
                reference.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &reference.tensors {
            let got = self.get(name).map_err(|_| {
                SpaceError::config(format!("{what}: missing parameter '{name}'"))
            })?;
            if got.shape() != t.shape() {
                return Err(SpaceError::config(format!(
                    "{what}: parameter '{name}' has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Enter every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            ids: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub ids: BTreeMap<String, NodeId>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| SpaceError::config(format!("missing bound parameter '{name}'")))
    }

    fn conv(&self, g: &mut Graph, x: NodeId, layer: &str, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.get(&format!("{layer}.weight"))?;
        let b = self.get(&format!("{layer}.bias"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn deconv(&self, g: &mut Graph, x: NodeId, layer: &str, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.get(&format!("{layer}.weight"))?;
        let b = self.get(&format!("{layer}.bias"))?;
        g.conv_transpose2d(x, w, Some(b), stride, pad)
    }
}

fn init_conv(p: &mut ParamSet, rng: &mut impl Rng, name: &str, out_c: usize, in_c: usize, k: usize) {
    let fan_in = in_c * k * k;
    let wb = (6.0 / fan_in as f32).sqrt();
    let bb = 1.0 / (fan_in as f32).sqrt();
    let w = (0..out_c * fan_in).map(|_| rng.random_range(-wb..wb)).collect();
    let b = (0..out_c).map(|_| rng.random_range(-bb..bb)).collect();
    p.insert(&format!("{name}.weight"), Tensor::new(vec![out_c, in_c, k, k], w).expect("conv init"));
    p.insert(&format!("{name}.bias"), Tensor::new(vec![out_c], b).expect("conv init"));
}

fn init_deconv(p: &mut ParamSet, rng: &mut impl Rng, name: &str, in_c: usize, out_c: usize, k: usize) {
    let fan_in = out_c * k * k;
    let wb = (6.0 / fan_in as f32).sqrt();
    let bb = 1.0 / (fan_in as f32).sqrt();
    let w = (0..in_c * fan_in).map(|_| rng.random_range(-wb..wb)).collect();
    let b = (0..out_c).map(|_| rng.random_range(-bb..bb)).collect();
    p.insert(&format!("{name}.weight"), Tensor::new(vec![in_c, out_c, k, k], w).expect("deconv init"));
    p.insert(&format!("{name}.bias"), Tensor::new(vec![out_c], b).expect("deconv init"));
}

/// Patch description network shared by teacher and student.
pub fn init_pdn(cfg: &NetworkConfig, rng: &mut impl Rng) -> ParamSet {
    let (w1, w2) = cfg.pdn_widths();
    let c = cfg.feature_dim;
    let mut p = ParamSet::default();
    match cfg.pdn_variant {
        PdnVariant::Tiny => {
            init_conv(&mut p, rng, "conv1", w1, 3, 3);
            init_conv(&mut p, rng, "conv2", c, w1, 3);
        }
        PdnVariant::S | PdnVariant::M => {
            init_conv(&mut p, rng, "conv1", w1, 3, 3);
            init_conv(&mut p, rng, "conv2", w2, w1, 3);
            init_conv(&mut p, rng, "conv3", w2, w2, 3);
            init_conv(&mut p, rng, "conv4", c, w2, 3);
        }
    }
    p
}

pub fn pdn_forward(cfg: &NetworkConfig, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
    match cfg.pdn_variant {
        PdnVariant::Tiny => {
            let h = p.conv(g, x, "conv1", 1, 1)?;
            let h = g.relu(h);
            let h = g.avg_pool2(h)?;
            let h = p.conv(g, h, "conv2", 1, 1)?;
            g.avg_pool2(h)
        }
        PdnVariant::S | PdnVariant::M => {
            let h = p.conv(g, x, "conv1", 1, 1)?;
            let h = g.relu(h);
            let h = g.avg_pool2(h)?;
            let h = p.conv(g, h, "conv2", 1, 1)?;
            let h = g.relu(h);
            let h = g.avg_pool2(h)?;
            let h = p.conv(g, h, "conv3", 1, 1)?;
            let h = g.relu(h);
            p.conv(g, h, "conv4", 1, 1)
        }
    }
}

/// Number of stride-2 stages that bring the input down to 8×8.
fn encoder_downsamples(cfg: &NetworkConfig) -> usize {
    (cfg.input_size / 8).trailing_zeros() as usize
}

/// Number of doubling deconvs taking the 4×4 seed up to the feature size.
fn decoder_upsamples(cfg: &NetworkConfig) -> usize {
    (cfg.feature_shape().1 / 4).trailing_zeros() as usize
}

/// Strided conv encoder to a 1×1 latent of `fe_bottleneck_dim`, then a
/// transposed-conv decoder back to the feature shape.
pub fn init_encoder(cfg: &NetworkConfig, rng: &mut impl Rng) -> ParamSet {
    let e = cfg.encoder_width();
    let mut p = ParamSet::default();
    let mut in_c = 3;
    for i in 0..encoder_downsamples(cfg) {
        init_conv(&mut p, rng, &format!("enc{}", i + 1), e, in_c, 4);
        in_c = e;
    }
    init_conv(&mut p, rng, "latent", cfg.fe_bottleneck_dim, e, 8);
    init_deconv(&mut p, rng, "seed", cfg.fe_bottleneck_dim, e, 4);
    for i in 0..decoder_upsamples(cfg) {
        init_deconv(&mut p, rng, &format!("dec{}", i + 1), e, e, 4);
    }
    init_conv(&mut p, rng, "head", cfg.feature_dim, e, 3);
    p
}

pub fn encoder_forward(cfg: &NetworkConfig, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for i in 0..encoder_downsamples(cfg) {
        h = p.conv(g, h, &format!("enc{}", i + 1), 2, 1)?;
        h = g.relu(h);
    }
    h = p.conv(g, h, "latent", 1, 0)?;
    h = p.deconv(g, h, "seed", 1, 0)?;
    h = g.relu(h);
    for i in 0..decoder_upsamples(cfg) {
        h = p.deconv(g, h, &format!("dec{}", i + 1), 2, 1)?;
        h = g.relu(h);
    }
    p.conv(g, h, "head", 1, 1)
}

/// `fm_layers` same-padding convs, ReLU between, plus an identity skip.
pub fn init_converter(cfg: &NetworkConfig, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::default();
    for i in 0..cfg.fm_layers {
        init_conv(&mut p, rng, &format!("conv{}", i + 1), cfg.feature_dim, cfg.feature_dim, cfg.fm_kernel);
    }
    p
}

pub fn converter_forward(cfg: &NetworkConfig, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
    let (_, c, _, _) = g.value(f).dims4()?;
    if c != cfg.feature_dim {
        return Err(SpaceError::config(format!(
            "feature converter expects {} channels, got {c}",
            cfg.feature_dim
        )));
    }
    if cfg.fm_layers == 0 {
        return Ok(f);
    }
    let pad = cfg.fm_kernel / 2;
    let mut h = f;
    for i in 0..cfg.fm_layers {
        if i > 0 {
            h = g.relu(h);
        }
        h = p.conv(g, h, &format!("conv{}", i + 1), 1, pad)?;
    }
    g.add(f, h)
}

/// A `C × H_f × W_f` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, c, h, w) = values.dims4()?;
        if n != 1 {
            return Err(SpaceError::contract(format!("feature map must hold one item, got batch {n}")));
        }
        Ok(FeatureMap {
            values: values.reshape(&[c, h, w])?,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// As a batch-1 `[1, C, H, W]` tensor for graph input.
    pub fn batched(&self) -> Tensor {
        let (c, h, w) = self.dims();
        self.values.clone().reshape(&[1, c, h, w]).expect("feature map layout")
    }
}

/// All four networks plus the EMA shadow of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub config: NetworkConfig,
    pub teacher: ParamSet,
    pub student: ParamSet,
    pub student_ema: ParamSet,
    pub encoder: ParamSet,
    pub fm: ParamSet,
}

impl Networks {
    pub fn init(config: NetworkConfig, teacher_seed: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut trng = ChaCha8Rng::seed_from_u64(teacher_seed);
        let teacher = init_pdn(&config, &mut trng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = init_pdn(&config, &mut rng);
        let encoder = init_encoder(&config, &mut rng);
        let fm = init_converter(&config, &mut rng);
        Ok(Networks {
            student_ema: student.clone(),
            config,
            teacher,
            student,
            encoder,
            fm,
        })
    }

    /// Check every parameter set against the layout implied by `config`.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = Networks::init(self.config.clone(), 0, 0)?;
        self.teacher.check_layout(&fresh.teacher, "teacher")?;
        self.student.check_layout(&fresh.student, "student")?;
        self.student_ema.check_layout(&fresh.student, "student_ema")?;
        self.encoder.check_layout(&fresh.encoder, "encoder")?;
        self.fm.check_layout(&fresh.fm, "fm")?;
        Ok(())
    }
}

fn run_frozen(
    params: &ParamSet,
    input: &Tensor,
    f: impl FnOnce(&mut Graph, &Bound, NodeId) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let (_, c, h, w) = input.dims4()?;
    let x = g.constant(input.clone().reshape(&[input.numel() / (c * h * w), c, h, w])?);
    let out = f(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

/// Forward a `[3, S, S]` (or batched) input through a PDN without tracking gradients.
pub fn pdn_features(cfg: &NetworkConfig, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    run_frozen(params, x, |g, p, x| pdn_forward(cfg, g, p, x))
}

pub fn teacher_forward(nets: &Networks, x: &Tensor) -> Result<FeatureMap> {
    FeatureMap::new(pdn_features(&nets.config, &nets.teacher, x)?)
}

pub fn student_forward(nets: &Networks, x: &Tensor) -> Result<FeatureMap> {
    FeatureMap::new(pdn_features(&nets.config, &nets.student, x)?)
}

pub fn encoder_features(nets: &Networks, x: &Tensor) -> Result<FeatureMap> {
    let t = run_frozen(&nets.encoder, x, |g, p, x| encoder_forward(&nets.config, g, p, x))?;
    FeatureMap::new(t)
}

pub fn fm_forward(nets: &Networks, f: &FeatureMap) -> Result<FeatureMap> {
    let t = run_frozen(&nets.fm, &f.batched(), |g, p, x| converter_forward(&nets.config, g, p, x))?;
    FeatureMap::new(t)
}

/// Per-channel mean and standard deviation of teacher outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl TeacherStats {
    pub fn identity(channels: usize) -> Self {
        TeacherStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Pool per-channel statistics over every position of every map
    /// (population variance, std floored at [`STD_FLOOR`]).
    pub fn from_features<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in maps {
            let (c, h, w) = m.dims();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(SpaceError::contract("teacher feature maps disagree on channels"));
            }
            let d = m.values.data();
            for ch in 0..c {
                for &v in &d[ch * h * w..(ch + 1) * h * w] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(SpaceError::config("teacher statistics need at least one training image"));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                (((q / n) - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR)
            })
            .collect();
        Ok(TeacherStats { mean, std })
    }

    pub fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift = self.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        (scale, shift)
    }
}

pub fn compute_teacher_stats(nets: &Networks, inputs: &[Tensor]) -> Result<TeacherStats> {
    if inputs.is_empty() {
        return Err(SpaceError::config("teacher statistics need at least one training image"));
    }
    let maps = inputs
        .iter()
        .map(|x| teacher_forward(nets, x))
        .collect::<Result<Vec<_>>>()?;
    TeacherStats::from_features(&maps)
}

/// `(f − mean_c) / std_c`.
pub fn normalize_teacher(f: &FeatureMap, stats: &TeacherStats) -> Result<FeatureMap> {
    per_channel(f, stats, |v, m, s| (v - m) / s)
}

pub fn denormalize_teacher(f: &FeatureMap, stats: &TeacherStats) -> Result<FeatureMap> {
    per_channel(f, stats, |v, m, s| v * s + m)
}

fn per_channel(f: &FeatureMap, stats: &TeacherStats, op: impl Fn(f32, f32, f32) -> f32) -> Result<FeatureMap> {
    let (c, h, w) = f.dims();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(SpaceError::contract(format!(
            "teacher stats have {} channels, features have {c}",
            stats.mean.len()
        )));
    }
    let mut d = f.values.data().to_vec();
    for ch in 0..c {
        for v in &mut d[ch * h * w..(ch + 1) * h * w] {
            *v = op(*v, stats.mean[ch], stats.std[ch]);
        }
    }
    Ok(FeatureMap {
        values: Tensor::new(vec![c, h, w], d)?,
    })
}

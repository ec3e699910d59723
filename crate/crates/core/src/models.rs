//! Residual dilated CNNs: the multi-head MR-to-CT synthesis network and the
//! imitation network that predicts PET residual maps from a (pCT, CT) pair.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality, HU_AIR};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{DropoutMode, Graph, Real, Tensor, Var};

/// Architecture of one backbone: a stem convolution, residual blocks of one
/// dilated convolution each, a shared activation, and `heads` independent
/// 1x1 output convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub heads: usize,
    /// Dropout applied to the trunk features before the heads; 0 disables.
    pub dropout: f64,
    /// Network inputs are `value / input_scale`.
    pub input_scale: f64,
    /// Head outputs map to `output_scale * y + output_offset`.
    pub output_scale: f64,
    pub output_offset: f64,
}

impl Architecture {
    pub fn synthesis(heads: usize) -> Self {
        Self {
            in_channels: 1,
            channels: 16,
            kernel: 3,
            dilations: vec![1, 1, 2, 2, 4, 4],
            heads,
            dropout: 0.0,
            input_scale: 1.0,
            output_scale: 1000.0,
            output_offset: 0.0,
        }
    }

    pub fn imitation() -> Self {
        Self {
            in_channels: 2,
            input_scale: 1000.0,
            output_scale: 1.0,
            ..Self::synthesis(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.heads == 0 {
            return Err(Error::contract("architecture needs inputs, channels and heads"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::contract("architecture kernel size must be odd"));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::contract("dilations must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout rate must lie in [0, 1)"));
        }
        if !(self.input_scale > 0.0) || !self.output_scale.is_finite() || self.output_scale == 0.0 {
            return Err(Error::contract("architecture scales must be finite and non-zero"));
        }
        Ok(())
    }

    /// Encodes the descriptor as `arch.*` tensors stored next to the weights.
    pub fn to_params(&self, kind: ModelKind, out: &mut ParamSet) {
        let scalar = |v: f64| Tensor::new(vec![1], vec![v as f32]).expect("scalar");
        out.insert("arch.kind", scalar(kind.code()));
        out.insert("arch.in_channels", scalar(self.in_channels as f64));
        out.insert("arch.channels", scalar(self.channels as f64));
        out.insert("arch.kernel", scalar(self.kernel as f64));
        out.insert(
            "arch.dilations",
            Tensor::new(
                vec![self.dilations.len()],
                self.dilations.iter().map(|&d| d as f32).collect(),
            )
            .expect("dilations"),
        );
        out.insert("arch.heads", scalar(self.heads as f64));
        out.insert("arch.dropout", scalar(self.dropout));
        out.insert("arch.input_scale", scalar(self.input_scale));
        out.insert("arch.output_scale", scalar(self.output_scale));
        out.insert("arch.output_offset", scalar(self.output_offset));
    }

    pub fn from_params(params: &ParamSet) -> Result<(ModelKind, Self)> {
        let get = |name: &str| -> Result<&Tensor<f32>> {
            params
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{name}`")))
        };
        let scalar = |name: &str| -> Result<f64> {
            let t = get(name)?;
            if t.numel() != 1 {
                return Err(Error::contract(format!("`{name}` must hold one value")));
            }
            Ok(t.data()[0] as f64)
        };
        let count = |name: &str| -> Result<usize> {
            let v = scalar(name)?;
            if v < 0.0 || v != libm::trunc(v) {
                return Err(Error::contract(format!("`{name}` must be a count, got {v}")));
            }
            Ok(v as usize)
        };
        let kind = ModelKind::from_code(scalar("arch.kind")?)?;
        let arch = Self {
            in_channels: count("arch.in_channels")?,
            channels: count("arch.channels")?,
            kernel: count("arch.kernel")?,
            dilations: get("arch.dilations")?.data().iter().map(|&d| d as usize).collect(),
            heads: count("arch.heads")?,
            dropout: scalar("arch.dropout")?,
            input_scale: scalar("arch.input_scale")?,
            output_scale: scalar("arch.output_scale")?,
            output_offset: scalar("arch.output_offset")?,
        };
        arch.validate()?;
        Ok((kind, arch))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Synthesis,
    Imitation,
}

impl ModelKind {
    fn code(self) -> f64 {
        match self {
            ModelKind::Synthesis => 1.0,
            ModelKind::Imitation => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            1 => Ok(ModelKind::Synthesis),
            2 => Ok(ModelKind::Imitation),
            _ => Err(Error::contract(format!("unknown model kind code {v}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Synthesis => "synthesis",
            ModelKind::Imitation => "imitation",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stem_alpha: usize,
    blocks: Vec<(usize, Conv)>,
    out_alpha: usize,
    heads: Vec<Conv>,
}

/// Parameters plus the positions of each layer inside them.
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    params: ParamSet,
    layout: Layout,
}

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor<f32> {
    let std = gain * libm::sqrt(2.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}

impl Network {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (c, k) = (arch.channels, arch.kernel);
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet, name: &str, f: usize, cin: usize, k: usize, gain: f64| Conv {
            weight: p.insert(
                &format!("{name}.weight"),
                he_normal(&[f, cin, k, k], cin * k * k, gain, rng),
            ),
            bias: p.insert(&format!("{name}.bias"), Tensor::zeros(&[f])),
        };
        let alpha = |p: &mut ParamSet, name: &str| p.insert(name, Tensor::full(&[c], 0.25f32));

        let stem = conv(&mut p, "stem", c, arch.in_channels, k, 1.0);
        let stem_alpha = alpha(&mut p, "stem.alpha");
        let mut blocks = Vec::with_capacity(arch.dilations.len());
        for i in 0..arch.dilations.len() {
            let a = alpha(&mut p, &format!("block{i}.alpha"));
            // residual branches start small so the trunk is close to identity
            blocks.push((a, conv(&mut p, &format!("block{i}"), c, c, k, 0.5)));
        }
        let out_alpha = alpha(&mut p, "trunk.alpha");
        let heads = (0..arch.heads)
            .map(|j| conv(&mut p, &format!("head{j}"), 1, c, 1, 0.5))
            .collect();
        Ok(Self {
            layout: Layout {
                stem,
                stem_alpha,
                blocks,
                out_alpha,
                heads,
            },
            arch,
            params: p,
        })
    }

    /// Rebuilds a network from stored parameters. Names and shapes must match
    /// the layout implied by `arch`.
    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        let mut skeleton = Self::new(arch, &mut Rng::new(0))?;
        let mut weights = ParamSet::new();
        for (name, t) in params.iter() {
            if !name.starts_with("arch.") {
                weights.insert(name, t.clone());
            }
        }
        skeleton.params.check_compatible(&weights)?;
        skeleton.params = weights;
        Ok(skeleton)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Names of the parameters owned by head `j`.
    pub fn head_param_names(&self, j: usize) -> [String; 2] {
        [format!("head{j}.weight"), format!("head{j}.bias")]
    }

    /// Trunk features `[N, C, H, W]` for network-scaled input `x`.
    fn trunk<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let l = &self.layout;
        let conv = |g: &mut Graph<T>, x: Var, c: Conv, d: usize| -> Result<Var> {
            let y = g.conv2d(x, vars[c.weight], d)?;
            g.add_channel_bias(y, vars[c.bias])
        };
        let mut h = conv(g, x, l.stem, 1)?;
        h = g.prelu(h, vars[l.stem_alpha])?;
        for ((alpha, c), &d) in l.blocks.iter().zip(&self.arch.dilations) {
            let a = g.prelu(h, vars[*alpha])?;
            let branch = conv(g, a, *c, d)?;
            h = g.add(h, branch)?;
        }
        let f = g.prelu(h, vars[l.out_alpha])?;
        if self.arch.dropout > 0.0 {
            g.dropout(f, self.arch.dropout, mode, rng)
        } else {
            Ok(f)
        }
    }

    /// Output of every head in physical units, each `[N, 1, H, W]`.
    ///
    /// `input` is in physical units with shape `[N, in_channels, H, W]`;
    /// `vars` are the bound parameters in [`ParamSet`] order.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.arch.in_channels {
            return Err(Error::shape(
                "network input",
                &[0, self.arch.in_channels, 0, 0],
                &shape,
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::contract("bound parameter count does not match the network"));
        }
        let x = g.mul_scalar(input, T::from_f64(1.0 / self.arch.input_scale));
        let f = self.trunk(g, vars, x, mode, rng)?;
        let mut outs = Vec::with_capacity(self.arch.heads);
        for head in &self.layout.heads {
            let y = g.conv2d(f, vars[head.weight], 1)?;
            let y = g.add_channel_bias(y, vars[head.bias])?;
            let y = g.mul_scalar(y, T::from_f64(self.arch.output_scale));
            outs.push(if self.arch.output_offset != 0.0 {
                g.add_scalar(y, T::from_f64(self.arch.output_offset))
            } else {
                y
            });
        }
        Ok(outs)
    }
}

/// Packs images into one `[N, C, H, W]` tensor, channel-major per sample.
pub fn batch_tensor<T: Real>(samples: &[&[&Image2D]]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .and_then(|s| s.first())
        .ok_or_else(|| Error::contract("empty batch"))?;
    let channels = samples[0].len();
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * channels * h * w);
    for s in samples {
        if s.len() != channels {
            return Err(Error::contract("batch samples have different channel counts"));
        }
        for img in s.iter() {
            first.check_grid("batch_tensor", img)?;
            data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(vec![samples.len(), channels, h, w], data)
}

fn to_images<T: Real>(
    g: &Graph<T>,
    outs: &[Var],
    like: &Image2D,
    modality: Modality,
) -> Result<Vec<Image2D>> {
    outs.iter()
        .map(|&v| {
            let data = g.value(v).data().iter().map(|x| x.to_f64() as f32).collect();
            like.with_data(modality, data)
        })
        .collect()
}

/// Multi-head MR-to-pseudo-CT network.
#[derive(Clone, Debug)]
pub struct SynthesisModel {
    pub net: Network,
    /// Input width and height.
    pub size: usize,
}

impl SynthesisModel {
    pub fn new(arch: Architecture, size: usize, rng: &mut Rng) -> Result<Self> {
        if arch.in_channels != 1 {
            return Err(Error::contract("synthesis network takes one MR channel"));
        }
        Ok(Self {
            net: Network::new(arch, rng)?,
            size,
        })
    }

    pub fn heads(&self) -> usize {
        self.net.arch.heads
    }

    pub fn dropout(&self) -> f64 {
        self.net.arch.dropout
    }

    fn check_input(&self, mr: &Image2D) -> Result<()> {
        mr.expect_modality("synth_forward", Modality::Mr)?;
        if mr.width() != self.size || mr.height() != self.size {
            return Err(Error::shape(
                "synth_forward",
                &[self.size, self.size],
                &[mr.height(), mr.width()],
            ));
        }
        Ok(())
    }

    /// All head outputs for one MR image, in HU.
    pub fn synth_forward(&self, mr: &Image2D, mode: DropoutMode, rng: &mut Rng) -> Result<Vec<Image2D>> {
        self.check_input(mr)?;
        let mut g = Graph::<f32>::new();
        let vars = self.net.params.bind(&mut g, false).vars;
        let x = g.constant(batch_tensor(&[&[mr]])?);
        let outs = self.net.forward(&mut g, &vars, x, mode, rng)?;
        to_images(&g, &outs, mr, Modality::CtHu)
    }

    /// Attenuation-ready pCTs: every head output with air outside the head
    /// outline. The loss only constrains pixels inside the head, so raw
    /// outputs there are arbitrary.
    pub fn synthesize(&self, mr: &Image2D, head_mask: &Image2D, mode: DropoutMode, rng: &mut Rng) -> Result<Vec<Image2D>> {
        self.synth_forward(mr, mode, rng)?
            .into_iter()
            .map(|p| p.fill_outside(head_mask, HU_AIR))
            .collect()
    }

    /// `m` stochastic passes of a single-head dropout model.
    pub fn mc_dropout_sample(&self, mr: &Image2D, m: usize, rng: &mut Rng) -> Result<Vec<Image2D>> {
        if self.dropout() == 0.0 {
            return Err(Error::contract("MC dropout sampling needs a dropout rate above 0"));
        }
        if self.heads() != 1 {
            return Err(Error::contract("MC dropout sampling expects a single-head model"));
        }
        self.check_input(mr)?;
        (0..m)
            .map(|_| {
                self.synth_forward(mr, DropoutMode::Sample, rng)
                    .map(|mut v| v.remove(0))
            })
            .collect()
    }

    /// Single-head model made of the shared trunk and head `j`.
    pub fn select_head(&self, j: usize) -> Result<Self> {
        if j >= self.heads() {
            return Err(Error::contract(format!("head {j} out of range ({} heads)", self.heads())));
        }
        let mut arch = self.net.arch.clone();
        arch.heads = 1;
        let skeleton = Network::new(arch.clone(), &mut Rng::new(0))?;
        let mut params = ParamSet::new();
        for (name, _) in skeleton.params.iter() {
            let src = match name.strip_prefix("head0.") {
                Some(rest) => format!("head{j}.{rest}"),
                None => String::from(name),
            };
            let t = self
                .net
                .params
                .get(&src)
                .ok_or_else(|| Error::contract(format!("missing parameter {src}")))?;
            params.insert(name, t.clone());
        }
        Ok(Self {
            net: Network::from_params(arch, params)?,
            size: self.size,
        })
    }
}

/// Predicts the signed PET residual map from a (pCT, CT) pair.
#[derive(Clone, Debug)]
pub struct ImitationModel {
    pub net: Network,
}

impl ImitationModel {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        if arch.in_channels != 2 || arch.heads != 1 {
            return Err(Error::contract(
                "imitation network takes (pCT, CT) and has one output",
            ));
        }
        Ok(Self {
            net: Network::new(arch, rng)?,
        })
    }

    /// Graph form: `pct` and `ct` are `[N, 1, H, W]` in HU.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        pct: Var,
        ct: Var,
    ) -> Result<Var> {
        let x = g.concat(&[pct, ct], 1)?;
        let mut rng = Rng::new(0);
        let mut outs = self.net.forward(g, vars, x, DropoutMode::Off, &mut rng)?;
        Ok(outs.remove(0))
    }

    pub fn imitation_forward(&self, pct: &Image2D, ct: &Image2D) -> Result<Image2D> {
        pct.expect_modality("imitation_forward", Modality::CtHu)?;
        ct.expect_modality("imitation_forward", Modality::CtHu)?;
        pct.check_grid("imitation_forward", ct)?;
        let mut g = Graph::<f32>::new();
        let vars = self.net.params.bind(&mut g, false).vars;
        let p = g.constant(batch_tensor(&[&[pct]])?);
        let c = g.constant(batch_tensor(&[&[ct]])?);
        let out = self.forward_graph(&mut g, &vars, p, c)?;
        Ok(to_images(&g, &[out], pct, Modality::Residual)?.remove(0))
    }
}

/// Either model, as loaded from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Synthesis(SynthesisModel),
    Imitation(ImitationModel),
}

impl SynthesisModel {
    /// Weights plus the `arch.*` descriptor entries.
    pub fn to_checkpoint(&self) -> ParamSet {
        let mut p = self.net.params.clone();
        self.net.arch.to_params(ModelKind::Synthesis, &mut p);
        p.insert(
            "arch.size",
            Tensor::new(vec![1], vec![self.size as f32]).expect("scalar"),
        );
        p
    }

    pub fn from_checkpoint(params: ParamSet) -> Result<Self> {
        match AnyModel::from_checkpoint(params)? {
            AnyModel::Synthesis(m) => Ok(m),
            AnyModel::Imitation(_) => Err(Error::contract(
                "expected a synthesis checkpoint, found an imitation checkpoint",
            )),
        }
    }
}

impl ImitationModel {
    pub fn to_checkpoint(&self) -> ParamSet {
        let mut p = self.net.params.clone();
        self.net.arch.to_params(ModelKind::Imitation, &mut p);
        p
    }

    pub fn from_checkpoint(params: ParamSet) -> Result<Self> {
        match AnyModel::from_checkpoint(params)? {
            AnyModel::Imitation(m) => Ok(m),
            AnyModel::Synthesis(_) => Err(Error::contract(
                "expected an imitation checkpoint, found a synthesis checkpoint",
            )),
        }
    }
}

impl AnyModel {
    pub fn from_checkpoint(params: ParamSet) -> Result<Self> {
        let (kind, arch) = Architecture::from_params(&params)?;
        match kind {
            ModelKind::Synthesis => {
                let size = params
                    .get("arch.size")
                    .map(|t| t.data()[0] as usize)
                    .ok_or_else(|| Error::contract("checkpoint lacks `arch.size`"))?;
                let mut weights = ParamSet::new();
                for (name, t) in params.iter() {
                    if name != "arch.size" {
                        weights.insert(name, t.clone());
                    }
                }
                Ok(AnyModel::Synthesis(SynthesisModel {
                    net: Network::from_params(arch, weights)?,
                    size,
                }))
            }
            ModelKind::Imitation => Ok(AnyModel::Imitation(ImitationModel {
                net: Network::from_params(arch, params)?,
            })),
        }
    }
}

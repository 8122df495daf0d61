//! One scale branch: stacked blocks of gated factor modules, the factor
//! signature built from all block gates, and the fusion head that merges the
//! pooled final feature map with the projected signature.
//!
//! Each block computes
//!
//! ```text
//! y = shortcut(x) + Σ_k g_k · FM_k(x),    g = sigmoid(A · avgpool(x) + c)
//! ```
//!
//! and the ablation [`Mode`]s replace pieces of that formula:
//!
//! | mode          | gates                | signature | fusion head       |
//! |---------------|----------------------|-----------|-------------------|
//! | `full`        | learned, in (0, 1)   | yes       | (p_conv + p_fs)/2 |
//! | `fusion_only` | learned, in (0, 1)   | yes       | p_conv            |
//! | `resnext`     | fixed at 1           | no        | p_conv            |
//! | `resnet`      | one wide module      | no        | p_conv            |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, Module, LINEAR_GAIN, RELU_GAIN};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::{Element, PoolKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    FusionOnly,
    Resnext,
    Resnet,
}

impl Mode {
    pub fn has_gate_network(self) -> bool {
        matches!(self, Mode::Full | Mode::FusionOnly)
    }

    pub fn has_signature(self) -> bool {
        self.has_gate_network()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::FusionOnly => "fusion_only",
            Mode::Resnext => "resnext",
            Mode::Resnet => "resnet",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "fusion_only" | "fusion-only" => Ok(Mode::FusionOnly),
            "resnext" => Ok(Mode::Resnext),
            "resnet" => Ok(Mode::Resnet),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected full, fusion_only, resnext or resnet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmKind {
    /// 1×1 reduce → relu → 3×3 (stage stride) → relu → 1×1 expand.
    ConvBottleneck,
    /// Two affine layers with relu, on flattened vector inputs.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(blocks: usize, channels: usize, stride: usize) -> Self {
        StageSpec {
            blocks,
            channels,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub factors_per_block: usize,
    pub stage_plan: Vec<StageSpec>,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub fm_kind: FmKind,
    pub mode: Mode,
    pub feature_dim: usize,
    /// Total inner width of a block's factor modules relative to its channel
    /// width; each module gets `channels · ratio / K` (at least 1).
    pub bottleneck_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale configuration used by tests and the synthetic benchmark.
    pub fn toy() -> Self {
        BackboneConfig {
            num_blocks: 4,
            factors_per_block: 4,
            stage_plan: vec![
                StageSpec::new(2, 16, 1),
                StageSpec::new(1, 32, 2),
                StageSpec::new(1, 64, 2),
            ],
            stem_channels: 16,
            stem_stride: 2,
            fm_kind: FmKind::ConvBottleneck,
            mode: Mode::Full,
            feature_dim: 128,
            bottleneck_ratio: 1.0,
        }
    }

    /// Reference size: 16 blocks of 32 factor modules, signature length 512.
    pub fn paper() -> Self {
        BackboneConfig {
            num_blocks: 16,
            factors_per_block: 32,
            stage_plan: vec![
                StageSpec::new(3, 256, 1),
                StageSpec::new(4, 512, 2),
                StageSpec::new(6, 1024, 2),
                StageSpec::new(3, 2048, 2),
            ],
            stem_channels: 64,
            stem_stride: 2,
            fm_kind: FmKind::ConvBottleneck,
            mode: Mode::Full,
            feature_dim: 1024,
            bottleneck_ratio: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_blocks == 0 || self.factors_per_block == 0 || self.feature_dim == 0 {
            return bad("num_blocks, factors_per_block and feature_dim must be positive".into());
        }
        if self.stem_channels == 0 || self.stem_stride == 0 {
            return bad("stem_channels and stem_stride must be positive".into());
        }
        if self.stage_plan.is_empty() {
            return bad("stage_plan must have at least one stage".into());
        }
        if let Some(s) = self
            .stage_plan
            .iter()
            .find(|s| s.blocks == 0 || s.channels == 0 || s.stride == 0)
        {
            return bad(format!("stage {s:?} has a zero field"));
        }
        let total: usize = self.stage_plan.iter().map(|s| s.blocks).sum();
        if total != self.num_blocks {
            return bad(format!(
                "stage_plan has {total} blocks but num_blocks is {}",
                self.num_blocks
            ));
        }
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio.is_finite()) {
            return bad("bottleneck_ratio must be positive".into());
        }
        Ok(())
    }

    /// Factor-signature length `N · K`; zero in modes without a signature.
    pub fn signature_len(&self) -> usize {
        if self.mode.has_signature() {
            self.num_blocks * self.factors_per_block
        } else {
            0
        }
    }

    /// Inner width of one factor module at `channels`.
    pub fn factor_width(&self, channels: usize) -> usize {
        let w = (channels as f64 * self.bottleneck_ratio / self.factors_per_block as f64).round();
        (w as usize).max(1)
    }

    pub fn final_channels(&self) -> usize {
        self.stage_plan.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// `(in_channels, out_channels, stride)` for every block in order.
    pub fn block_layout(&self) -> Vec<(usize, usize, usize)> {
        let mut layout = Vec::with_capacity(self.num_blocks);
        let mut c_in = self.stem_channels;
        for stage in &self.stage_plan {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                layout.push((c_in, stage.channels, stride));
                c_in = stage.channels;
            }
        }
        layout
    }
}

/// One latent-factor subnetwork.
#[derive(Debug, Clone)]
pub enum FactorModule<E: Element> {
    Conv {
        reduce: Conv<E>,
        mid: Conv<E>,
        expand: Conv<E>,
    },
    Dense {
        first: Linear<E>,
        second: Linear<E>,
    },
}

impl<E: Element> FactorModule<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        kind: FmKind,
        c_in: usize,
        width: usize,
        c_out: usize,
        stride: usize,
        rng: &Rng,
    ) -> Result<Self> {
        Ok(match kind {
            FmKind::ConvBottleneck => FactorModule::Conv {
                reduce: Conv::new(&format!("{name}.reduce"), c_in, width, 1, 1, true, RELU_GAIN, rng)?,
                mid: Conv::new(&format!("{name}.mid"), width, width, 3, stride, true, RELU_GAIN, rng)?,
                expand: Conv::new(&format!("{name}.expand"), width, c_out, 1, 1, true, LINEAR_GAIN, rng)?,
            },
            FmKind::Dense => FactorModule::Dense {
                first: Linear::new(&format!("{name}.first"), c_in, width, RELU_GAIN, rng)?,
                second: Linear::new(&format!("{name}.second"), width, c_out, RELU_GAIN, rng)?,
            },
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            FactorModule::Conv {
                reduce,
                mid,
                expand,
            } => {
                if x.ndim() != 4 || x.shape()[1] != reduce.in_channels() {
                    return Err(Error::shape("factor module", x.shape(), reduce.weight.shape()));
                }
                let h = reduce.forward(x)?.relu();
                let h = mid.forward(&h)?.relu();
                expand.forward(&h)
            }
            FactorModule::Dense { first, second } => {
                if x.ndim() != 2 || x.shape()[1] != first.inputs() {
                    return Err(Error::shape("factor module", x.shape(), first.weight.shape()));
                }
                let h = first.forward(x)?.relu();
                Ok(second.forward(&h)?.relu())
            }
        }
    }
}

impl<E: Element> Module<E> for FactorModule<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        match self {
            FactorModule::Conv {
                reduce,
                mid,
                expand,
            } => [reduce.parameters(), mid.parameters(), expand.parameters()].concat(),
            FactorModule::Dense { first, second } => {
                [first.parameters(), second.parameters()].concat()
            }
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        match self {
            FactorModule::Conv {
                reduce,
                mid,
                expand,
            } => {
                let mut v = reduce.parameters_mut();
                v.extend(mid.parameters_mut());
                v.extend(expand.parameters_mut());
                v
            }
            FactorModule::Dense { first, second } => {
                let mut v = first.parameters_mut();
                v.extend(second.parameters_mut());
                v
            }
        }
    }
}

/// Spatial average when `x` is a `[B, C, H, W]` map; vector inputs pass through.
fn squeeze_spatial<E: Element>(x: &Tensor<E>, kind: PoolKind) -> Result<Tensor<E>> {
    if x.ndim() == 4 {
        x.global_pool(kind)
    } else {
        Ok(x.clone())
    }
}

/// Factor selection: global average pool → affine to K values → sigmoid.
#[derive(Debug, Clone)]
pub struct GateNetwork<E: Element> {
    pub affine: Linear<E>,
}

impl<E: Element> GateNetwork<E> {
    pub fn new(name: &str, c_in: usize, factors: usize, rng: &Rng) -> Result<Self> {
        Ok(GateNetwork {
            affine: Linear::new(name, c_in, factors, LINEAR_GAIN, rng)?,
        })
    }

    /// Gate vector `[B, K]`, every entry in (0, 1).
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let pooled = squeeze_spatial(x, PoolKind::Average)?;
        Ok(self.affine.forward(&pooled)?.sigmoid())
    }
}

#[derive(Debug, Clone)]
pub enum Shortcut<E: Element> {
    Identity,
    Conv(Conv<E>),
    Dense(Linear<E>),
}

impl<E: Element> Shortcut<E> {
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            Shortcut::Identity => Ok(x.clone()),
            Shortcut::Conv(c) => c.forward(x),
            Shortcut::Dense(l) => l.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<E: Element> {
    pub mode: Mode,
    pub factors: Vec<FactorModule<E>>,
    pub gate: Option<GateNetwork<E>>,
    pub shortcut: Shortcut<E>,
    pub stride: usize,
}

impl<E: Element> Block<E> {
    pub fn new(
        name: &str,
        config: &BackboneConfig,
        (c_in, c_out, stride): (usize, usize, usize),
        rng: &Rng,
    ) -> Result<Self> {
        let k = config.factors_per_block;
        let width = config.factor_width(c_out);
        let kind = config.fm_kind;
        let factors = if config.mode == Mode::Resnet {
            vec![FactorModule::new(
                &format!("{name}.holistic"),
                kind,
                c_in,
                width * k,
                c_out,
                stride,
                rng,
            )?]
        } else {
            (0..k)
                .map(|i| {
                    FactorModule::new(&format!("{name}.fm{i}"), kind, c_in, width, c_out, stride, rng)
                })
                .collect::<Result<_>>()?
        };
        let gate = config
            .mode
            .has_gate_network()
            .then(|| GateNetwork::new(&format!("{name}.gate"), c_in, k, rng))
            .transpose()?;
        let needs_projection = c_in != c_out || (stride != 1 && kind == FmKind::ConvBottleneck);
        let shortcut = match (needs_projection, kind) {
            (false, _) => Shortcut::Identity,
            (true, FmKind::ConvBottleneck) => Shortcut::Conv(Conv::new(
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                1,
                stride,
                false,
                LINEAR_GAIN,
                rng,
            )?),
            (true, FmKind::Dense) => Shortcut::Dense(Linear::new(
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                LINEAR_GAIN,
                rng,
            )?),
        };
        Ok(Block {
            mode: config.mode,
            factors,
            gate,
            shortcut,
            stride,
        })
    }

    /// Returns the block output and its gate vector `[B, K]`; the gate vector
    /// is all ones in `resnext` mode and absent in `resnet` mode.
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let batch = x.shape()[0];
        let k = self.factors.len();
        let gates = match (&self.gate, self.mode) {
            (Some(g), _) => Some(g.forward(x)?),
            (None, Mode::Resnext) => Some(Tensor::full(&[batch, k], E::one())?),
            (None, _) => None,
        };
        let mut y = self.shortcut.forward(x)?;
        for (i, fm) in self.factors.iter().enumerate() {
            let out = fm.forward(x)?;
            if out.shape() != y.shape() {
                return Err(Error::shape("block residual", y.shape(), out.shape()));
            }
            let term = match (&gates, self.mode) {
                (Some(g), Mode::Full | Mode::FusionOnly) => {
                    let mut gshape = vec![1; out.ndim()];
                    gshape[0] = batch;
                    out.mul(&g.narrow(1, i, 1)?.reshape(&gshape)?)?
                }
                _ => out,
            };
            y = y.add(&term)?;
        }
        Ok((y, gates))
    }
}

impl<E: Element> Module<E> for Block<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v: Vec<&Parameter<E>> = self.factors.iter().flat_map(|f| f.parameters()).collect();
        if let Some(g) = &self.gate {
            v.extend(g.affine.parameters());
        }
        match &self.shortcut {
            Shortcut::Identity => {}
            Shortcut::Conv(c) => v.extend(c.parameters()),
            Shortcut::Dense(l) => v.extend(l.parameters()),
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v: Vec<&mut Parameter<E>> = self
            .factors
            .iter_mut()
            .flat_map(|f| f.parameters_mut())
            .collect();
        if let Some(g) = &mut self.gate {
            v.extend(g.affine.parameters_mut());
        }
        match &mut self.shortcut {
            Shortcut::Identity => {}
            Shortcut::Conv(c) => v.extend(c.parameters_mut()),
            Shortcut::Dense(l) => v.extend(l.parameters_mut()),
        }
        v
    }
}

/// Concatenated gate vectors of all blocks, block-major: `[B, N·K]`.
#[derive(Debug, Clone)]
pub struct FactorSignature<E: Element>(pub Tensor<E>);

impl<E: Element> FactorSignature<E> {
    /// Signature length `N · K`.
    pub fn len(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.0
    }

    /// Signature of one sample in the batch.
    pub fn sample(&self, index: usize) -> &[E] {
        let n = self.len();
        &self.0.data()[index * n..(index + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct BackboneOutput<E: Element> {
    /// Output of the last block: `[B, C, h, w]` (or `[B, C]` for dense modules).
    pub features: Tensor<E>,
    pub signature: Option<FactorSignature<E>>,
}

#[derive(Debug, Clone)]
pub enum Stem<E: Element> {
    Conv(Conv<E>),
    Dense(Linear<E>),
}

#[derive(Debug, Clone)]
pub struct Backbone<E: Element> {
    pub config: BackboneConfig,
    pub input_hw: (usize, usize),
    pub stem: Stem<E>,
    pub blocks: Vec<Block<E>>,
}

pub const INPUT_CHANNELS: usize = 3;

impl<E: Element> Backbone<E> {
    pub fn new(name: &str, config: &BackboneConfig, input_hw: (usize, usize), rng: &Rng) -> Result<Self> {
        config.validate()?;
        let stem = match config.fm_kind {
            FmKind::ConvBottleneck => Stem::Conv(Conv::new(
                &format!("{name}.stem"),
                INPUT_CHANNELS,
                config.stem_channels,
                3,
                config.stem_stride,
                true,
                RELU_GAIN,
                rng,
            )?),
            FmKind::Dense => Stem::Dense(Linear::new(
                &format!("{name}.stem"),
                INPUT_CHANNELS * input_hw.0 * input_hw.1,
                config.stem_channels,
                RELU_GAIN,
                rng,
            )?),
        };
        let blocks = config
            .block_layout()
            .into_iter()
            .enumerate()
            .map(|(i, layout)| Block::new(&format!("{name}.block{i}"), config, layout, rng))
            .collect::<Result<_>>()?;
        Ok(Backbone {
            config: config.clone(),
            input_hw,
            stem,
            blocks,
        })
    }

    /// Runs the stem and all blocks on a `[B, 3, H, W]` batch.
    pub fn forward(&self, images: &Tensor<E>) -> Result<BackboneOutput<E>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || (s[2], s[3]) != self.input_hw {
            return Err(Error::Dimension(format!(
                "backbone expects [B, {INPUT_CHANNELS}, {}, {}] images, got {s:?}",
                self.input_hw.0, self.input_hw.1
            )));
        }
        let mut x = match &self.stem {
            Stem::Conv(c) => c.forward(images)?.relu(),
            Stem::Dense(l) => l
                .forward(&images.reshape(&[s[0], s[1] * s[2] * s[3]])?)?
                .relu(),
        };
        let mut gates = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, g) = block.forward(&x)?;
            x = y;
            gates.extend(g);
        }
        let signature = if self.config.mode.has_signature() {
            Some(FactorSignature(Tensor::concat(&gates, 1)?))
        } else {
            None
        };
        Ok(BackboneOutput {
            features: x,
            signature,
        })
    }
}

impl<E: Element> Module<E> for Backbone<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v = match &self.stem {
            Stem::Conv(c) => c.parameters(),
            Stem::Dense(l) => l.parameters(),
        };
        for b in &self.blocks {
            v.extend(b.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v = match &mut self.stem {
            Stem::Conv(c) => c.parameters_mut(),
            Stem::Dense(l) => l.parameters_mut(),
        };
        for b in &mut self.blocks {
            v.extend(b.parameters_mut());
        }
        v
    }
}

/// Pools the final map, projects it and (in full mode) averages it with the
/// projected factor signature.
#[derive(Debug, Clone)]
pub struct FusionHead<E: Element> {
    pub mode: Mode,
    pub pool: PoolKind,
    pub project_features: Linear<E>,
    pub project_signature: Option<Linear<E>>,
}

impl<E: Element> FusionHead<E> {
    pub fn new(name: &str, config: &BackboneConfig, pool: PoolKind, rng: &Rng) -> Result<Self> {
        let d = config.feature_dim;
        let project_signature = (config.mode == Mode::Full)
            .then(|| Linear::new(&format!("{name}.proj_fs"), config.signature_len(), d, LINEAR_GAIN, rng))
            .transpose()?;
        Ok(FusionHead {
            mode: config.mode,
            pool,
            project_features: Linear::new(
                &format!("{name}.proj_conv"),
                config.final_channels(),
                d,
                LINEAR_GAIN,
                rng,
            )?,
            project_signature,
        })
    }

    /// Branch feature `[B, d]`.
    pub fn forward(
        &self,
        features: &Tensor<E>,
        signature: Option<&FactorSignature<E>>,
    ) -> Result<Tensor<E>> {
        let pooled = squeeze_spatial(features, self.pool)?;
        let p_conv = self.project_features.forward(&pooled)?;
        match (self.mode, &self.project_signature) {
            (Mode::Full, Some(proj)) => {
                let sig = signature.ok_or_else(|| {
                    Error::Contract("full mode needs a factor signature".into())
                })?;
                let p_fs = proj.forward(sig.tensor())?;
                Ok(p_conv.add(&p_fs)?.scale(E::of(0.5)))
            }
            _ => Ok(p_conv),
        }
    }
}

impl<E: Element> Module<E> for FusionHead<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v = self.project_features.parameters();
        if let Some(p) = &self.project_signature {
            v.extend(p.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v = self.project_features.parameters_mut();
        if let Some(p) = &mut self.project_signature {
            v.extend(p.parameters_mut());
        }
        v
    }
}

//! The two segmentation networks, built as compute graphs.
//!
//! The global segmentation module (GSM) pairs a residual conv encoder with
//! a U-Net style decoder; the local refinement module (LRM) is a plain 2D
//! U-Net. Width and depth are configurable; channel width doubles per
//! level. All convolutions are 3x3 same-size (1x1 for projections and the
//! head), so spatial extents survive every level and the output map aligns
//! pixel-for-pixel with the input slice.
//!
//! Encoder parameters live under the `encoder.` prefix; the pretraining
//! stage builds the identical encoder and its checkpoints load into the
//! GSM by name.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, ComputeGraph, EngineError, GraphBuilder, ParamStore, Sig, Source};
use crate::tensor::Tensor;
use crate::volume::SliceGrid;

pub const GSM_IN_CHANNELS: usize = 3;
pub const LRM_IN_CHANNELS: usize = 5;
pub const OUT_CHANNELS: usize = 1;
/// The probability cut that turns stage-one maps into binary candidates.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self, patch_xy: usize) -> Result<(), NetworkError> {
        if self.depth < 2 {
            return Err(NetworkError::ConfigInvalid(format!(
                "depth {} < 2",
                self.depth
            )));
        }
        if self.base_channels < 2 {
            return Err(NetworkError::ConfigInvalid(format!(
                "base_channels {} < 2",
                self.base_channels
            )));
        }
        let down_factor = 1usize << (self.depth - 1);
        if patch_xy == 0 || !patch_xy.is_multiple_of(down_factor) {
            return Err(NetworkError::ConfigInvalid(format!(
                "patch {patch_xy} not divisible by 2^(depth-1) = {down_factor}"
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid net config: {0}")]
    ConfigInvalid(String),
    #[error("slice grids of one input must share extents")]
    GridShapeMismatch,
    #[error("channel 4 at pixel {index} is not channel 3 thresholded at 0.5")]
    InconsistentLrmInput { index: usize },
    #[error("value {value} at pixel {index} outside its channel range")]
    ChannelOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// conv(3x3) -> relu -> conv(3x3), plus a shortcut (1x1-projected when
/// channel counts differ), added and rectified.
fn residual_block(
    b: &mut GraphBuilder,
    src: Source,
    prefix: &str,
    cout: usize,
) -> Result<Source, EngineError> {
    let Sig::Map { c: cin, .. } = b.source_sig(src) else {
        return Err(EngineError::ShapeMismatch(format!(
            "{prefix}: residual block needs a feature map"
        )));
    };
    let c1 = b.conv2d(src, &format!("{prefix}.conv1"), cout, 3, 1, 1)?;
    let r1 = b.relu(c1);
    let c2 = b.conv2d(r1, &format!("{prefix}.conv2"), cout, 3, 1, 1)?;
    let shortcut = if cin == cout {
        src
    } else {
        b.conv2d(src, &format!("{prefix}.proj"), cout, 1, 1, 0)?
    };
    let sum = b.add(c2, shortcut)?;
    Ok(b.relu(sum))
}

/// conv(3x3) -> relu -> conv(3x3) -> relu.
fn double_conv(
    b: &mut GraphBuilder,
    src: Source,
    prefix: &str,
    cout: usize,
) -> Result<Source, EngineError> {
    let c1 = b.conv2d(src, &format!("{prefix}.conv1"), cout, 3, 1, 1)?;
    let r1 = b.relu(c1);
    let c2 = b.conv2d(r1, &format!("{prefix}.conv2"), cout, 3, 1, 1)?;
    Ok(b.relu(c2))
}

/// Encoder tower under the `encoder.` namespace: one block per level,
/// max-pooled between levels. Returns the per-level outputs, finest first.
pub(crate) fn encoder_levels(
    b: &mut GraphBuilder,
    input: Source,
    cfg: &NetConfig,
    residual: bool,
) -> Result<Vec<Source>, EngineError> {
    let mut levels = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for i in 0..cfg.depth {
        if i > 0 {
            x = b.maxpool(x)?;
        }
        let prefix = format!("encoder.l{i}");
        x = if residual {
            residual_block(b, x, &prefix, cfg.channels(i))?
        } else {
            double_conv(b, x, &prefix, cfg.channels(i))?
        };
        levels.push(x);
    }
    Ok(levels)
}

/// U-Net decoder: upsample, concatenate the skip, double conv; then a 1x1
/// head squashed through a sigmoid.
fn decoder_and_head(
    b: &mut GraphBuilder,
    levels: &[Source],
    cfg: &NetConfig,
) -> Result<Source, EngineError> {
    let mut d = *levels.last().expect("depth >= 2");
    for i in (0..cfg.depth - 1).rev() {
        let up = b.upsample(d)?;
        let cat = b.concat(&[up, levels[i]])?;
        d = double_conv(b, cat, &format!("decoder.l{i}"), cfg.channels(i))?;
    }
    let logits = b.conv2d(d, "head.final", OUT_CHANNELS, 1, 1, 0)?;
    Ok(b.sigmoid(logits))
}

fn build_segmenter(
    cfg: &NetConfig,
    patch_xy: usize,
    in_channels: usize,
    residual: bool,
) -> Result<ComputeGraph, NetworkError> {
    cfg.validate(patch_xy)?;
    let mut b = GraphBuilder::new();
    let input = b.input(
        "image",
        Sig::Map {
            c: in_channels,
            h: patch_xy,
            w: patch_xy,
        },
    )?;
    let levels = encoder_levels(&mut b, input, cfg, residual)?;
    let out = decoder_and_head(&mut b, &levels, cfg)?;
    Ok(b.build(out)?)
}

/// Stage one: residual encoder + U-Net decoder over 3-channel input.
pub fn build_gsm(cfg: &NetConfig, patch_xy: usize) -> Result<ComputeGraph, NetworkError> {
    build_segmenter(cfg, patch_xy, GSM_IN_CHANNELS, true)
}

/// Stage two: plain U-Net over 5-channel input.
pub fn build_lrm(cfg: &NetConfig, patch_xy: usize) -> Result<ComputeGraph, NetworkError> {
    build_segmenter(cfg, patch_xy, LRM_IN_CHANNELS, false)
}

/// Stage-one input: one PET slice twice, one CT slice.
#[derive(Debug, Clone)]
pub struct GsmInput {
    pub pet: SliceGrid,
    pub ct: SliceGrid,
}

impl GsmInput {
    pub fn new(pet: SliceGrid, ct: SliceGrid) -> Result<Self, NetworkError> {
        if pet.rows() != ct.rows() || pet.cols() != ct.cols() {
            return Err(NetworkError::GridShapeMismatch);
        }
        Ok(Self { pet, ct })
    }

    fn channels(&self) -> [&SliceGrid; GSM_IN_CHANNELS] {
        [&self.pet, &self.pet, &self.ct]
    }
}

/// Stage-two input: PET twice, CT, the stage-one probability map, and its
/// 0.5-thresholded binary form.
#[derive(Debug, Clone)]
pub struct LrmInput {
    pub pet: SliceGrid,
    pub ct: SliceGrid,
    pub prob: SliceGrid,
    pub binary: SliceGrid,
}

impl LrmInput {
    pub fn new(
        pet: SliceGrid,
        ct: SliceGrid,
        prob: SliceGrid,
        binary: SliceGrid,
    ) -> Result<Self, NetworkError> {
        let shape = (pet.rows(), pet.cols());
        for g in [&ct, &prob, &binary] {
            if (g.rows(), g.cols()) != shape {
                return Err(NetworkError::GridShapeMismatch);
            }
        }
        for (i, (&p, &bin)) in prob.data().iter().zip(binary.data()).enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(NetworkError::ChannelOutOfRange { index: i, value: p });
            }
            let expect = f64::from(p >= BINARY_THRESHOLD);
            if bin != expect {
                return Err(NetworkError::InconsistentLrmInput { index: i });
            }
        }
        Ok(Self {
            pet,
            ct,
            prob,
            binary,
        })
    }

    /// Builds the binary channel from the probability map.
    pub fn from_prob(pet: SliceGrid, ct: SliceGrid, prob: SliceGrid) -> Result<Self, NetworkError> {
        let binary = SliceGrid::new(
            prob.rows(),
            prob.cols(),
            prob.data()
                .iter()
                .map(|&p| f64::from(p >= BINARY_THRESHOLD))
                .collect(),
        )
        .expect("same shape");
        Self::new(pet, ct, prob, binary)
    }

    fn channels(&self) -> [&SliceGrid; LRM_IN_CHANNELS] {
        [&self.pet, &self.pet, &self.ct, &self.prob, &self.binary]
    }
}

fn stack_channels(grids: &[&SliceGrid], out: &mut Vec<f64>) {
    for g in grids {
        out.extend_from_slice(g.data());
    }
}

/// Stacks stage-one inputs into an `[N, 3, H, W]` tensor.
pub fn stack_gsm(batch: &[GsmInput]) -> Result<Tensor, NetworkError> {
    stack_inputs(
        batch,
        |s, out| stack_channels(&s.channels(), out),
        |s| (s.pet.rows(), s.pet.cols()),
    )
}

/// Stacks stage-two inputs into an `[N, 5, H, W]` tensor.
pub fn stack_lrm(batch: &[LrmInput]) -> Result<Tensor, NetworkError> {
    stack_inputs(
        batch,
        |s, out| stack_channels(&s.channels(), out),
        |s| (s.pet.rows(), s.pet.cols()),
    )
}

fn stack_inputs<T>(
    batch: &[T],
    fill: impl Fn(&T, &mut Vec<f64>),
    shape: impl Fn(&T) -> (usize, usize),
) -> Result<Tensor, NetworkError> {
    let first = batch.first().ok_or(NetworkError::GridShapeMismatch)?;
    let (h, w) = shape(first);
    let mut data = Vec::new();
    for s in batch {
        if shape(s) != (h, w) {
            return Err(NetworkError::GridShapeMismatch);
        }
        fill(s, &mut data);
    }
    let c = data.len() / (batch.len() * h * w);
    Ok(Tensor::new(vec![batch.len(), c, h, w], data)?)
}

/// Runs a segmenter on a stacked input batch, returning the `[N, 1, H, W]`
/// probability tensor.
pub fn forward_segment(
    net: &ComputeGraph,
    params: &ParamStore,
    input: &Tensor,
) -> Result<Tensor, NetworkError> {
    let fwd = graph::forward(net, params, &[("image", input)])?;
    Ok(fwd.output().clone())
}

/// Splits an `[N, 1, H, W]` probability tensor back into per-sample grids.
pub fn probs_to_grids(probs: &Tensor) -> Vec<SliceGrid> {
    let (n, h, w) = (probs.shape()[0], probs.shape()[2], probs.shape()[3]);
    (0..n)
        .map(|i| {
            SliceGrid::new(h, w, probs.data()[i * h * w..(i + 1) * h * w].to_vec())
                .expect("plane length")
        })
        .collect()
}

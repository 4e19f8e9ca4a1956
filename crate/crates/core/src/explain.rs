//! Neuron interpretation: top-activating dataset crops and activation
//! maximization images.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::model::{ActivationTrace, ArchSpec, BranchKind, MiniInception, ModelError, STEM_KERNEL, STEM_POOL};
use crate::pathway::NeuronId;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("neuron {0} does not exist in this architecture")]
    UnknownNeuron(NeuronId),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite objective or gradient at step {step} of feature visualization for {neuron}")]
    NonFinite { neuron: NeuronId, step: usize },
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// Pixel rectangle `[top, bottom) × [left, right)` of an input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CropRect {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Branch that produces `neuron`, from the block's branch widths.
pub fn branch_of(spec: &ArchSpec, neuron: NeuronId) -> Option<BranchKind> {
    let block = spec.blocks.get(neuron.layer)?;
    let mut offset = 0;
    for (kind, &w) in BranchKind::ALL.iter().zip(&block.widths) {
        if neuron.channel < offset + w {
            return Some(*kind);
        }
        offset += w;
    }
    None
}

/// How far one branch reaches on either side of its output position.
fn branch_reach(kind: BranchKind) -> usize {
    kind.pre_pool().map_or(0, |w| (w - 1) / 2) + (kind.kernel_size() - 1) / 2
}

/// Input-image box that can influence `neuron` at mixed-grid position
/// `(row, col)`, clipped to the image.
///
/// Within the pooled grid the neuron's own branch reaches `r` positions and
/// every lower block reaches the widest of its branches. A pooled position
/// `p` covers stem outputs `2p, 2p + 1`, which read input rows
/// `2p - 1 ..= 2p + 2` through the 3×3 stem.
pub fn receptive_field(spec: &ArchSpec, neuron: NeuronId, row: usize, col: usize) -> Result<CropRect> {
    let kind = branch_of(spec, neuron).ok_or(ExplainError::UnknownNeuron(neuron))?;
    let grid = spec.mixed_spatial();
    if row >= grid || col >= grid {
        return Err(ExplainError::InvalidArgument(format!(
            "position ({row}, {col}) outside the {grid}x{grid} grid"
        )));
    }
    let lower: usize = spec.blocks[..neuron.layer]
        .iter()
        .map(|b| {
            BranchKind::ALL
                .iter()
                .zip(&b.widths)
                .filter(|(_, &w)| w > 0)
                .map(|(k, _)| branch_reach(*k))
                .max()
                .unwrap_or(0)
        })
        .sum();
    let reach = (branch_reach(kind) + lower) as isize;
    let stem_pad = ((STEM_KERNEL - 1) / 2) as isize;
    let pool = STEM_POOL as isize;
    let size = spec.input_size as isize;
    let span = |p: usize| {
        let lo = (p as isize - reach) * pool - stem_pad;
        let hi = (p as isize + reach) * pool + (pool - 1) + stem_pad;
        (lo.max(0) as usize, (hi.min(size - 1) + 1) as usize)
    };
    let (top, bottom) = span(row);
    let (left, right) = span(col);
    Ok(CropRect {
        top,
        left,
        bottom,
        right,
    })
}

/// One dataset image that strongly activates a neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub image_id: usize,
    /// Mixed-grid position of the maximum.
    pub row: usize,
    pub col: usize,
    pub rect: CropRect,
    pub activation: f32,
}

/// Spatial maximum of one channel and its first row-major position.
fn channel_argmax(map: &Tensor, channel: usize) -> Result<(f32, usize, usize)> {
    let (_, w, c) = map.hwc("channel_argmax")?;
    if channel >= c {
        return Err(ExplainError::InvalidArgument(format!("channel {channel} of {c}")));
    }
    let mut best = (f32::NEG_INFINITY, 0);
    for (i, px) in map.data().chunks_exact(c).enumerate() {
        if px[channel] > best.0 {
            best = (px[channel], i);
        }
    }
    Ok((best.0, best.1 / w, best.1 % w))
}

/// The `k` traced images with the highest maximum activation of `neuron`,
/// each with the receptive field of its argmax position. Ties go to the
/// lower image id. Asking for more than exist returns all of them.
pub fn top_activating_patches(
    spec: &ArchSpec,
    traces: &[(usize, &ActivationTrace)],
    neuron: NeuronId,
    k: usize,
) -> Result<Vec<Patch>> {
    if k == 0 {
        return Err(ExplainError::InvalidArgument("k must be at least 1".into()));
    }
    branch_of(spec, neuron).ok_or(ExplainError::UnknownNeuron(neuron))?;
    let mut scored = traces
        .iter()
        .map(|&(id, t)| {
            let map = t
                .mixed
                .get(neuron.layer)
                .ok_or(ExplainError::UnknownNeuron(neuron))?;
            let (v, r, c) = channel_argmax(map, neuron.channel)?;
            Ok((id, v, r, c))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(image_id, activation, row, col)| {
            Ok(Patch {
                image_id,
                row,
                col,
                rect: receptive_field(spec, neuron, row, col)?,
                activation,
            })
        })
        .collect()
}

/// Cuts `rect` out of an `[H, W, C]` image.
pub fn crop(image: &Tensor, rect: CropRect) -> Result<Tensor> {
    let (h, w, c) = image.hwc("crop")?;
    if rect.bottom > h || rect.right > w || rect.top >= rect.bottom || rect.left >= rect.right {
        return Err(ExplainError::InvalidArgument(format!("{rect:?} outside {h}x{w}")));
    }
    let mut data = Vec::with_capacity(rect.height() * rect.width() * c);
    for y in rect.top..rect.bottom {
        data.extend_from_slice(&image.data()[(y * w + rect.left) * c..(y * w + rect.right) * c]);
    }
    Ok(Tensor::new(&[rect.height(), rect.width(), c], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVisConfig {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Halvings tried before a step that would lower the objective is skipped.
    pub max_backtracks: usize,
}

impl Default for FeatureVisConfig {
    fn default() -> Self {
        Self {
            steps: 48,
            step_size: 1.0,
            seed: 0,
            max_backtracks: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVis {
    pub image: Tensor,
    /// Objective after every accepted step, starting with the initial noise.
    pub objectives: Vec<f64>,
}

impl FeatureVis {
    pub fn initial_objective(&self) -> f64 {
        self.objectives[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("initial objective is always recorded")
    }
}

/// Mean activation of `neuron` and its gradient with respect to the image.
pub fn channel_mean_and_gradient(model: &MiniInception, image: &Tensor, neuron: NeuronId) -> Result<(f64, Tensor)> {
    model.check_input(image)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.param(image.clone());
    let f = model.forward_on_tape(&mut tape, x, &params)?;
    let map = *f.mixed.get(neuron.layer).ok_or(ExplainError::UnknownNeuron(neuron))?;
    let obj = tape.channel_mean(map, neuron.channel)?;
    let mut grads = tape.backward(obj)?;
    let value = tape.value(obj).item().expect("scalar");
    Ok((f64::from(value), grads.take(x).expect("image is differentiable")))
}

/// Normalized-gradient ascent on the channel mean from seeded uniform noise.
///
/// A step that would lower the objective is retried at half the size; if
/// every retry fails the step is skipped and ascent ends, so the objective
/// never decreases. A zero gradient also ends ascent.
pub fn feature_visualization(model: &MiniInception, neuron: NeuronId, config: &FeatureVisConfig) -> Result<FeatureVis> {
    if config.steps == 0 {
        return Err(ExplainError::InvalidArgument("steps must be at least 1".into()));
    }
    branch_of(model.spec(), neuron).ok_or(ExplainError::UnknownNeuron(neuron))?;
    let shape = model.spec().input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(&shape, (0..n).map(|_| rng.random::<f32>()).collect())?;
    let eval = |img: &Tensor, step: usize| -> Result<(f64, Tensor, f64)> {
        let (obj, g) = channel_mean_and_gradient(model, img, neuron)?;
        let gn = g.l2_norm();
        if !obj.is_finite() || !gn.is_finite() {
            return Err(ExplainError::NonFinite { neuron, step });
        }
        Ok((obj, g, gn))
    };
    let (mut obj, mut grad, mut gnorm) = eval(&x, 0)?;
    let mut objectives = vec![obj];
    'ascent: for step in 1..=config.steps {
        if gnorm == 0.0 {
            break;
        }
        let mut alpha = config.step_size;
        for _ in 0..=config.max_backtracks {
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| ((f64::from(v) + alpha * f64::from(g) / gnorm) as f32).clamp(0.0, 1.0))
                .collect();
            let candidate = Tensor::new(&shape, data)?;
            let (o, g, gn) = eval(&candidate, step)?;
            if o >= obj {
                (x, obj, grad, gnorm) = (candidate, o, g, gn);
                objectives.push(obj);
                continue 'ascent;
            }
            alpha /= 2.0;
        }
        break;
    }
    Ok(FeatureVis { image: x, objectives })
}

/// 8-bit quantization: `round_half_up(v * 255)` clamped to `[0, 255]`.
pub fn to_u8(v: f32) -> u8 {
    (f64::from(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes an `[H, W, 3]` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc("encode_png")?;
    if c != 3 {
        return Err(ExplainError::InvalidArgument(format!("PNG export needs 3 channels, got {c}")));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ExplainError::Png(e.to_string()))?;
        let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| ExplainError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_png(image)?;
    let io = |source| ExplainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

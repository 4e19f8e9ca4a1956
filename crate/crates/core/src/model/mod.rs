//! The miniature Inception-style classifier.
//!
//! Layout: a 3×3 stem convolution with ReLU and 2×2 max pooling, then three
//! mixed blocks (`mixed0`..`mixed2`). Each block runs four single-conv
//! branches in parallel (1×1, 3×3, 5×5, and 3×3 max pool followed by a 1×1
//! projection), applies ReLU per branch and concatenates the results along
//! channels in that branch order. The head global-max-pools the last block
//! and applies one dense layer.

mod dataset;
mod train;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::ops;
use crate::tensor::{Padding, Tensor, TensorError};

pub use dataset::{generate_dataset, Dataset, Split, IMAGE_CHANNELS, IMAGE_SIZE};
pub use train::{evaluate, train, train_linear_baseline, EpochStats, TrainConfig, TrainReport};
pub use weights::{
    decode_tensors, encode_tensors, load_weights, read_tensor_file, save_weights, write_tensor_file, FormatError,
    WEIGHT_MAGIC, WEIGHT_VERSION,
};

/// Names of the mixed layers, bottom-up.
pub const MIXED_LAYERS: [&str; 3] = ["mixed0", "mixed1", "mixed2"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },
    #[error("invalid training setup: {0}")]
    Training(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    PoolProj,
}

impl BranchKind {
    /// Concatenation order inside a mixed block.
    pub const ALL: [BranchKind; 4] = [
        BranchKind::Conv1x1,
        BranchKind::Conv3x3,
        BranchKind::Conv5x5,
        BranchKind::PoolProj,
    ];

    pub fn kernel_size(self) -> usize {
        match self {
            BranchKind::Conv1x1 | BranchKind::PoolProj => 1,
            BranchKind::Conv3x3 => 3,
            BranchKind::Conv5x5 => 5,
        }
    }

    /// Window of the stride-1 "same" max pool applied before the branch conv.
    pub fn pre_pool(self) -> Option<usize> {
        matches!(self, BranchKind::PoolProj).then_some(POOL_BRANCH_WINDOW)
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Conv1x1 => "conv1x1",
            BranchKind::Conv3x3 => "conv3x3",
            BranchKind::Conv5x5 => "conv5x5",
            BranchKind::PoolProj => "pool_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

pub const POOL_BRANCH_WINDOW: usize = 3;
pub const STEM_KERNEL: usize = 3;
pub const STEM_POOL: usize = 2;

/// Output channels of each branch, in [`BranchKind::ALL`] order. Zero-width
/// branches are omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub widths: [usize; 4],
}

impl BlockSpec {
    pub const fn uniform(per_branch: usize) -> Self {
        Self {
            widths: [per_branch; 4],
        }
    }

    pub fn channels(&self) -> usize {
        self.widths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub blocks: [BlockSpec; 3],
    pub num_classes: usize,
}

impl ArchSpec {
    /// 32×32 RGB input, 16-channel stem, 16 channels per mixed block.
    pub fn reference(num_classes: usize) -> Self {
        Self {
            input_size: IMAGE_SIZE,
            input_channels: IMAGE_CHANNELS,
            stem_channels: 16,
            blocks: [BlockSpec::uniform(4); 3],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.input_size < STEM_POOL || self.input_channels == 0 || self.stem_channels == 0 {
            return bad("input and stem extents must be positive");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        let spatial = self.mixed_spatial();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels() == 0 {
                return bad(&format!("{} has no channels", MIXED_LAYERS[i]));
            }
            if b.widths[3] > 0 && spatial < POOL_BRANCH_WINDOW {
                return bad("pool branch window exceeds the mixed-layer extent");
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.input_channels]
    }

    /// Spatial extent shared by every mixed layer.
    pub fn mixed_spatial(&self) -> usize {
        self.input_size / STEM_POOL
    }

    /// `[H, W, D]` of a mixed layer's output.
    pub fn mixed_shape(&self, layer: usize) -> [usize; 3] {
        let s = self.mixed_spatial();
        [s, s, self.blocks[layer].channels()]
    }

    pub fn block_input_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.stem_channels
        } else {
            self.blocks[layer - 1].channels()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kind: BranchKind,
    pub conv: Conv,
    /// First channel of this branch in the block's concatenated output.
    pub offset: usize,
}

impl Branch {
    pub fn width(&self) -> usize {
        self.conv.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBlock {
    pub branches: Vec<Branch>,
}

impl MixedBlock {
    /// Branch owning concatenated channel `channel`, with its local index.
    pub fn locate(&self, channel: usize) -> Option<(&Branch, usize)> {
        self.branches
            .iter()
            .find(|b| channel >= b.offset && channel < b.offset + b.width())
            .map(|b| (b, channel - b.offset))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniInception {
    spec: ArchSpec,
    stem: Conv,
    blocks: Vec<MixedBlock>,
    head_weights: Tensor,
    head_bias: Tensor,
}

/// Per-image post-ReLU outputs of every mixed layer plus the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub mixed: Vec<Tensor>,
    pub logits: Tensor,
    pub predicted: usize,
}

/// Parameter nodes bound on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Nodes produced by one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub mixed: Vec<Var>,
    pub logits: Var,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng) as f32).collect();
    Ok(Tensor::new(shape, data)?)
}

impl MiniInception {
    /// He-normal kernels, zero biases, drawn from a seeded ChaCha stream.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize| -> Result<Conv> {
            Ok(Conv {
                kernel: he_normal(rng, &[k, k, cin, cout], k * k * cin)?,
                bias: Tensor::zeros(&[cout])?,
            })
        };
        let stem = conv(&mut rng, STEM_KERNEL, spec.input_channels, spec.stem_channels)?;
        let mut blocks = Vec::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let cin = spec.block_input_channels(i);
            let mut branches = Vec::new();
            let mut offset = 0;
            for (kind, &width) in BranchKind::ALL.iter().zip(&b.widths) {
                if width == 0 {
                    continue;
                }
                branches.push(Branch {
                    kind: *kind,
                    conv: conv(&mut rng, kind.kernel_size(), cin, width)?,
                    offset,
                });
                offset += width;
            }
            blocks.push(MixedBlock { branches });
        }
        let last = spec.blocks[2].channels();
        let head_weights = he_normal(&mut rng, &[last, spec.num_classes], last)?;
        let head_bias = Tensor::zeros(&[spec.num_classes])?;
        Ok(Self {
            spec,
            stem,
            blocks,
            head_weights,
            head_bias,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn stem(&self) -> &Conv {
        &self.stem
    }

    pub fn block(&self, layer: usize) -> &MixedBlock {
        &self.blocks[layer]
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weights, &self.head_bias)
    }

    /// Named parameters in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.kernel".to_string(), &self.stem.kernel),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for b in &block.branches {
                out.push((format!("{}.{}.kernel", MIXED_LAYERS[i], b.kind.name()), &b.conv.kernel));
                out.push((format!("{}.{}.bias", MIXED_LAYERS[i], b.kind.name()), &b.conv.bias));
            }
        }
        out.push(("head.weights".to_string(), &self.head_weights));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem.kernel, &mut self.stem.bias];
        for block in &mut self.blocks {
            for b in &mut block.branches {
                out.push(&mut b.conv.kernel);
                out.push(&mut b.conv.bias);
            }
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    /// Rebuilds a model from named tensors, inferring the architecture from
    /// their shapes.
    pub fn from_parameters(tensors: Vec<(String, Tensor)>, input_size: usize) -> Result<Self> {
        let arch = |m: String| ModelError::Architecture(m);
        let mut map: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(arch(format!("duplicate tensor {name}")));
            }
        }
        let mut take = |name: &str| map.remove(name).ok_or_else(|| arch(format!("missing tensor {name}")));

        let stem_kernel = take("stem.kernel")?;
        let stem_bias = take("stem.bias")?;
        let (input_channels, stem_channels) = match stem_kernel.shape()[..] {
            [STEM_KERNEL, STEM_KERNEL, cin, cout] => (cin, cout),
            _ => return Err(arch(format!("stem kernel has shape {:?}", stem_kernel.shape()))),
        };
        let stem = Conv {
            kernel: stem_kernel,
            bias: stem_bias,
        };

        let mut blocks = Vec::new();
        let mut specs = [BlockSpec::uniform(0); 3];
        for (i, layer) in MIXED_LAYERS.iter().enumerate() {
            let mut branches = Vec::new();
            let mut offset = 0;
            for (slot, kind) in BranchKind::ALL.iter().enumerate() {
                let key = format!("{layer}.{}.kernel", kind.name());
                let Ok(kernel) = take(&key) else { continue };
                let bias = take(&format!("{layer}.{}.bias", kind.name()))?;
                let k = kind.kernel_size();
                let width = match kernel.shape()[..] {
                    [a, b, _, w] if a == k && b == k => w,
                    _ => return Err(arch(format!("{key} has shape {:?}", kernel.shape()))),
                };
                specs[i].widths[slot] = width;
                branches.push(Branch {
                    kind: *kind,
                    conv: Conv { kernel, bias },
                    offset,
                });
                offset += width;
            }
            blocks.push(MixedBlock { branches });
        }
        let head_weights = take("head.weights")?;
        let head_bias = take("head.bias")?;
        let num_classes = head_bias.len();
        if let Some(extra) = map.keys().next() {
            return Err(arch(format!("unexpected tensor {extra}")));
        }
        let spec = ArchSpec {
            input_size,
            input_channels,
            stem_channels,
            blocks: specs,
            num_classes,
        };
        spec.validate()?;
        let model = Self {
            spec,
            stem,
            blocks,
            head_weights,
            head_bias,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = MiniInception::new(self.spec.clone(), 0)?;
        for ((name, mine), (_, want)) in self.parameters().into_iter().zip(fresh.parameters()) {
            if mine.shape() != want.shape() {
                return Err(ModelError::Architecture(format!(
                    "{name} has shape {:?}, expected {:?}",
                    mine.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    /// Binds every parameter onto `tape`, differentiable or constant.
    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> BoundParams {
        let vars = self
            .parameters()
            .into_iter()
            .map(|(_, t)| {
                if differentiable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input_shape() {
            return Err(ModelError::InputShape {
                expected: self.spec.input_shape().to_vec(),
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records a forward pass of `input` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: Var, params: &BoundParams) -> Result<ForwardVars> {
        self.check_input(tape.value(input))?;
        let mut p = params.vars.iter().copied();
        let mut next = || p.next().expect("bound parameter count matches model");

        let (k, b) = (next(), next());
        let x = tape.conv2d(input, k, 1, Padding::Same)?;
        let x = tape.add_channel_bias(x, b)?;
        let x = tape.relu(x);
        let mut x = tape.maxpool(x, STEM_POOL, STEM_POOL, Padding::Valid)?;

        let mut mixed = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut outs = Vec::with_capacity(block.branches.len());
            for branch in &block.branches {
                let (k, b) = (next(), next());
                let src = match branch.kind.pre_pool() {
                    Some(w) => tape.maxpool(x, w, 1, Padding::Same)?,
                    None => x,
                };
                let y = tape.conv2d(src, k, 1, Padding::Same)?;
                let y = tape.add_channel_bias(y, b)?;
                outs.push(tape.relu(y));
            }
            x = tape.concat_channels(&outs)?;
            mixed.push(x);
        }
        let (w, b) = (next(), next());
        let pooled = tape.global_max_pool(x)?;
        let logits = tape.dense(pooled, w, b)?;
        Ok(ForwardVars { mixed, logits })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_trace(image)?.logits)
    }

    /// Forward pass that keeps every mixed-layer output.
    pub fn forward_with_trace(&self, image: &Tensor) -> Result<ActivationTrace> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.forward_on_tape(&mut tape, x, &params)?;
        let logits = tape.value(f.logits).clone();
        Ok(ActivationTrace {
            mixed: f.mixed.iter().map(|&v| tape.value(v).clone()).collect(),
            predicted: logits.argmax(),
            logits,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.forward(image)?.argmax())
    }
}

/// A differentiable image classifier, as seen by attacks.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, image: &Tensor) -> Result<Tensor>;

    /// Cross-entropy toward `target` and its gradient with respect to the image.
    fn loss_and_input_gradient(&self, image: &Tensor, target: usize) -> Result<(f32, Tensor)>;

    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }
}

impl Classifier for MiniInception {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.forward(image)
    }

    fn loss_and_input_gradient(&self, image: &Tensor, target: usize) -> Result<(f32, Tensor)> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.param(image.clone());
        let f = self.forward_on_tape(&mut tape, x, &params)?;
        let loss = tape.softmax_cross_entropy(f.logits, target)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss).item().expect("scalar loss");
        Ok((value, grads.take(x).expect("image is differentiable")))
    }
}

/// Softmax regression on raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub input_shape: Vec<usize>,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(input_shape: &[usize], weights: Tensor, bias: Tensor) -> Result<Self> {
        let n: usize = input_shape.iter().product();
        match weights.shape()[..] {
            [wn, k] if wn == n && bias.shape() == [k] => Ok(Self {
                input_shape: input_shape.to_vec(),
                weights,
                bias,
            }),
            _ => Err(TensorError::ShapeMismatch {
                op: "linear_classifier",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            }
            .into()),
        }
    }

    pub fn zeros(input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let n: usize = input_shape.iter().product();
        Self::new(
            input_shape,
            Tensor::zeros(&[n, num_classes])?,
            Tensor::zeros(&[num_classes])?,
        )
    }

    fn flat(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(ModelError::InputShape {
                expected: self.input_shape.clone(),
                got: image.shape().to_vec(),
            });
        }
        Ok(image.reshape(&[image.len()])?)
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(ops::dense(&self.flat(image)?, &self.weights, &self.bias)?)
    }

    fn loss_and_input_gradient(&self, image: &Tensor, target: usize) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.param(self.flat(image)?);
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        let z = tape.dense(x, w, b)?;
        let loss = tape.softmax_cross_entropy(z, target)?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(x).expect("differentiable").reshape(image.shape())?;
        Ok((tape.value(loss).item().expect("scalar"), g))
    }
}

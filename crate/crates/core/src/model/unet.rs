use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionGate;
use super::config::{ModelConfig, NormKind, UpsampleKind, DEPTH};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, split_channels, BatchNorm2d, Bilinear2x, Conv2d, ConvTranspose2x2, FeatureMap, MaxPool2x2,
    Mode, Module, Norm, Relu, Sigmoid, Tensor, TensorMut,
};
use crate::scalar::Scalar;

/// Two rounds of 3×3 convolution, normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    conv1: Conv2d<T>,
    norm1: Norm<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    norm2: Norm<T>,
    relu2: Relu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(in_channels: usize, out_channels: usize, norm: NormKind, rng: &mut ChaCha8Rng) -> Self {
        let make_norm = |c| match norm {
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(c)),
            NormKind::None => Norm::Identity,
        };
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, rng),
            norm1: make_norm(out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, rng),
            norm2: make_norm(out_channels),
            relu2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let y = self.conv1.forward(x, mode);
        let y = self.relu1.forward(self.norm1.forward(y, mode), mode);
        let y = self.conv2.forward(&y, mode);
        self.relu2.forward(self.norm2.forward(y, mode), mode)
    }

    fn backward(&mut self, dy: Array4<T>) -> Array4<T> {
        let d = self.norm2.backward(self.relu2.backward(dy));
        let d = self.conv2.backward(&d);
        let d = self.norm1.backward(self.relu1.backward(d));
        self.conv1.backward(&d)
    }

    fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[derive(Debug, Clone)]
enum Upsampler<T> {
    Transposed(ConvTranspose2x2<T>),
    Bilinear { resize: Bilinear2x, conv: Conv2d<T> },
}

impl<T: Scalar> Upsampler<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        match self {
            Upsampler::Transposed(t) => t.forward(x, mode),
            Upsampler::Bilinear { resize, conv } => conv.forward(&resize.forward(x, mode), mode),
        }
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        match self {
            Upsampler::Transposed(t) => t.backward(dy),
            Upsampler::Bilinear { resize, conv } => resize.backward(&conv.backward(dy)),
        }
    }
}

impl<T: Scalar> Module<T> for Upsampler<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        match self {
            Upsampler::Transposed(t) => t.visit(prefix, f),
            Upsampler::Bilinear { conv, .. } => conv.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        match self {
            Upsampler::Transposed(t) => t.visit_mut(prefix, f),
            Upsampler::Bilinear { conv, .. } => conv.visit_mut(prefix, f),
        }
    }
}

/// Spatial dims recorded per decoder level during the last forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShapes {
    pub level: usize,
    pub skip: [usize; 4],
    pub upsampled: [usize; 4],
}

/// U-shaped encoder/decoder with an attention gate on every skip connection.
///
/// The output is a one-channel probability map at the input resolution.
#[derive(Debug, Clone)]
pub struct AttentionUNet<T> {
    config: ModelConfig,
    encoders: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2x2>,
    bottleneck: ConvBlock<T>,
    // Decoder-side modules run deepest level first.
    upsamplers: Vec<Upsampler<T>>,
    gates: Vec<AttentionGate<T>>,
    decoders: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    head_activation: Sigmoid<T>,
    level_shapes: Vec<LevelShapes>,
}

impl<T: Scalar> AttentionUNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch_norm = config.norm == NormKind::Batch;

        let mut encoders = Vec::with_capacity(DEPTH);
        let mut in_c = config.in_channels;
        for level in 0..DEPTH {
            encoders.push(ConvBlock::new(in_c, config.width(level), config.norm, &mut rng));
            in_c = config.width(level);
        }
        let bottleneck = ConvBlock::new(in_c, config.bottleneck_width(), config.norm, &mut rng);

        let mut upsamplers = Vec::with_capacity(DEPTH);
        let mut gates = Vec::with_capacity(DEPTH);
        let mut decoders = Vec::with_capacity(DEPTH);
        for level in (0..DEPTH).rev() {
            let (from, to) = (config.width(level + 1), config.width(level));
            upsamplers.push(match config.upsample {
                UpsampleKind::TransposedConv => Upsampler::Transposed(ConvTranspose2x2::new(from, to, &mut rng)),
                UpsampleKind::BilinearConv => Upsampler::Bilinear {
                    resize: Bilinear2x::new(),
                    conv: Conv2d::new(from, to, 3, &mut rng),
                },
            });
            gates.push(AttentionGate::new(to, to, batch_norm, &mut rng));
            decoders.push(ConvBlock::new(2 * to, to, config.norm, &mut rng));
        }
        let head = Conv2d::new(config.base_channels, 1, 1, &mut rng);

        Ok(Self {
            config,
            encoders,
            pools: (0..DEPTH).map(|_| MaxPool2x2::new()).collect(),
            bottleneck,
            upsamplers,
            gates,
            decoders,
            head,
            head_activation: Sigmoid::new(),
            level_shapes: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_attention_gates(&self) -> usize {
        self.gates.len()
    }

    /// Gates ordered from the deepest skip connection to the shallowest.
    pub fn attention_gates(&self) -> &[AttentionGate<T>] {
        &self.gates
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoders.iter().map(ConvBlock::out_channels).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck.out_channels()
    }

    pub fn level_shapes(&self) -> &[LevelShapes] {
        &self.level_shapes
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let m = self.config.size_multiple();
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "input spatial size {}x{} is not divisible by {m}",
                x.height(),
                x.width()
            )));
        }
        if x.channels() != self.config.in_channels {
            return Err(Error::shape("model input channels", &[self.config.in_channels], &[x.channels()]));
        }
        Ok(())
    }

    /// Runs the network and returns per-pixel probabilities, shape (batch, H, W, 1).
    pub fn forward(&mut self, input: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        self.check_input(input)?;
        self.level_shapes.clear();

        let mut skips = Vec::with_capacity(DEPTH);
        let mut x = input.values().clone();
        for (encoder, pool) in self.encoders.iter_mut().zip(self.pools.iter_mut()) {
            let s = encoder.forward(&x, mode);
            x = pool.forward(&s, mode);
            skips.push(s);
        }
        x = self.bottleneck.forward(&x, mode);

        for (i, level) in (0..DEPTH).rev().enumerate() {
            let up = self.upsamplers[i].forward(&x, mode);
            let skip = &skips[level];
            self.level_shapes.push(LevelShapes {
                level,
                skip: dims(skip),
                upsampled: dims(&up),
            });
            let gated = self.gates[i].forward(skip, &up, mode)?;
            x = self.decoders[i].forward(&concat_channels(&gated, &up), mode);
        }

        let logits = self.head.forward(&x, mode);
        FeatureMap::new(self.head_activation.forward(logits, mode))
    }

    /// Backpropagates d(loss)/d(probabilities) from the last training forward
    /// pass, accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, dprob: &FeatureMap<T>) -> FeatureMap<T> {
        let dz = self.head_activation.backward(dprob.values().clone());
        let mut dx = self.head.backward(&dz);

        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; DEPTH];
        for level in 0..DEPTH {
            let i = DEPTH - 1 - level;
            let dcat = self.decoders[i].backward(dx);
            let (dgated, mut dup) = split_channels(&dcat, self.config.width(level));
            let (dskip, dgate) = self.gates[i].backward(&dgated);
            dup += &dgate;
            skip_grads[level] = Some(dskip);
            dx = self.upsamplers[i].backward(&dup);
        }

        dx = self.bottleneck.backward(dx);
        for level in (0..DEPTH).rev() {
            let mut d = self.pools[level].backward(&dx);
            d += skip_grads[level].as_ref().expect("every level visited");
            dx = self.encoders[level].backward(d);
        }
        FeatureMap::new(dx).expect("gradient has input shape")
    }
}

fn dims<T>(a: &Array4<T>) -> [usize; 4] {
    let (n, h, w, c) = a.dim();
    [n, h, w, c]
}

impl<T: Scalar> Module<T> for AttentionUNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        for (l, e) in self.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("encoder{l}")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (i, level) in (0..DEPTH).rev().enumerate() {
            self.upsamplers[i].visit(&join(prefix, &format!("up{level}")), f);
            self.gates[i].visit(&join(prefix, &format!("gate{level}")), f);
            self.decoders[i].visit(&join(prefix, &format!("decoder{level}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        for (l, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("encoder{l}")), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (i, level) in (0..DEPTH).rev().enumerate() {
            self.upsamplers[i].visit_mut(&join(prefix, &format!("up{level}")), f);
            self.gates[i].visit_mut(&join(prefix, &format!("gate{level}")), f);
            self.decoders[i].visit_mut(&join(prefix, &format!("decoder{level}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

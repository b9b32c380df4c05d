//! Per-stream autoencoder with a context-encoded memory between encoder and
//! decoder.
//!
//! The encoder runs four 3x3 convolutions (ReLU) with 2x2 max pooling after
//! the first three, then a linear projection to the latent width `C`. The
//! decoder projects a `2C` fused feature back to the bottleneck map and runs
//! four convolutions with nearest-neighbour upsampling after the first three.
//! The last decoder convolution is linear.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{entropy_grad, entropy_loss, total_loss, LossBreakdown, LossWeights};
use crate::memory::{self, ContextVector, LatentFeature, MemoryBank, MemoryTrace, WeightVector};
use crate::nn::{self, Conv2d, Dense};
use crate::patch::{FrameGroup, Stream, TargetPatch, PATCH_SIZE};

/// Architecture metadata. Stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub stream: Stream,
    pub input_channels: usize,
    pub patch_size: usize,
    /// Output channels of the four encoder convolutions.
    pub channels: [usize; 4],
    pub latent_dim: usize,
    pub memory_slots: usize,
    pub shrink_threshold: f64,
    pub renormalize_after_shrink: bool,
    /// When false the decoder sees the raw frame context instead of the memory read.
    pub memory_enabled: bool,
    pub seed: u64,
}

impl Architecture {
    pub fn new(stream: Stream) -> Self {
        Self {
            stream,
            input_channels: stream.channels(),
            patch_size: PATCH_SIZE,
            channels: [32, 48, 64, 64],
            latent_dim: 256,
            memory_slots: 100,
            shrink_threshold: 1.0 / 100.0,
            renormalize_after_shrink: false,
            memory_enabled: true,
            seed: 0,
        }
    }

    pub fn bottleneck_side(&self) -> usize {
        self.patch_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != self.stream.channels() {
            return Err(Error::InvalidInput(format!(
                "{} stream expects {} input channels, got {}",
                self.stream,
                self.stream.channels(),
                self.input_channels
            )));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return Err(Error::InvalidInput(format!(
                "patch size must be a positive multiple of 8, got {}",
                self.patch_size
            )));
        }
        if self.channels.contains(&0) || self.latent_dim == 0 || self.memory_slots == 0 {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if !(self.shrink_threshold >= 0.0) {
            return Err(Error::InvalidInput("shrink threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder, memory bank and decoder parameters of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamModel {
    pub arch: Architecture,
    pub encoder_convs: Vec<Conv2d>,
    pub encoder_proj: Dense,
    pub decoder_proj: Dense,
    pub decoder_convs: Vec<Conv2d>,
    pub memory: MemoryBank,
}

/// Outputs of [`StreamModel::forward_frame`], one entry per slot.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub reconstructions: Vec<TargetPatch>,
    pub target_losses: Vec<f64>,
    /// Entropy of the frame's read weights; zero with memory disabled.
    pub entropy: f64,
    pub weights: Option<WeightVector>,
}

struct EncoderTrace {
    cols: Vec<ndarray::Array2<f64>>,
    acts: Vec<Array3<f64>>,
    argmax: Vec<Vec<usize>>,
    flat: Array1<f64>,
    latent: Array1<f64>,
}

struct DecoderTrace {
    fused: Array1<f64>,
    hidden: Array1<f64>,
    cols: Vec<ndarray::Array2<f64>>,
    acts: Vec<Array3<f64>>,
    output: Array3<f64>,
}

/// Forward state of one frame over its distinct patches.
struct FramePass {
    encoders: Vec<EncoderTrace>,
    context: Array1<f64>,
    memory: Option<MemoryTrace>,
    decoders: Vec<DecoderTrace>,
    /// Per distinct patch reconstruction loss.
    losses: Vec<f64>,
}

impl StreamModel {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let [c1, c2, c3, c4] = arch.channels;
        let side = arch.bottleneck_side();
        let encoder_convs = vec![
            Conv2d::init(arch.input_channels, c1, &mut rng),
            Conv2d::init(c1, c2, &mut rng),
            Conv2d::init(c2, c3, &mut rng),
            Conv2d::init(c3, c4, &mut rng),
        ];
        let encoder_proj = Dense::init(c4 * side * side, arch.latent_dim, &mut rng);
        let decoder_proj = Dense::init(2 * arch.latent_dim, c4 * side * side, &mut rng);
        let decoder_convs = vec![
            Conv2d::init(c4, c3, &mut rng),
            Conv2d::init(c3, c2, &mut rng),
            Conv2d::init(c2, c1, &mut rng),
            Conv2d::init(c1, arch.input_channels, &mut rng),
        ];
        let mut memory = MemoryBank::random(
            arch.memory_slots,
            arch.latent_dim,
            arch.shrink_threshold,
            arch.seed.wrapping_add(0x6d656d),
        )?;
        memory.renormalize_after_shrink = arch.renormalize_after_shrink;
        Ok(Self {
            arch,
            encoder_convs,
            encoder_proj,
            decoder_proj,
            decoder_convs,
            memory,
        })
    }

    /// A same-shaped model with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let zero_conv = |c: &Conv2d| Conv2d::zeros(c.in_channels(), c.out_channels());
        let zero_dense = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        Self {
            arch: self.arch.clone(),
            encoder_convs: self.encoder_convs.iter().map(zero_conv).collect(),
            encoder_proj: zero_dense(&self.encoder_proj),
            decoder_proj: zero_dense(&self.decoder_proj),
            decoder_convs: self.decoder_convs.iter().map(zero_conv).collect(),
            memory: MemoryBank {
                items: ndarray::Array2::zeros(self.memory.items.dim()),
                ..self.memory.clone()
            },
        }
    }

    pub fn stream(&self) -> Stream {
        self.arch.stream
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Parameter tensors in a fixed order shared by checkpoints and optimizers.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.encoder_convs {
            out.push(c.weight.as_slice().expect("contiguous"));
            out.push(c.bias.as_slice().expect("contiguous"));
        }
        for d in [&self.encoder_proj, &self.decoder_proj] {
            out.push(d.weight.as_slice().expect("contiguous"));
            out.push(d.bias.as_slice().expect("contiguous"));
        }
        for c in &self.decoder_convs {
            out.push(c.weight.as_slice().expect("contiguous"));
            out.push(c.bias.as_slice().expect("contiguous"));
        }
        out.push(self.memory.items.as_slice().expect("contiguous"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.encoder_convs {
            out.push(c.weight.as_slice_mut().expect("contiguous"));
            out.push(c.bias.as_slice_mut().expect("contiguous"));
        }
        for d in [&mut self.encoder_proj, &mut self.decoder_proj] {
            out.push(d.weight.as_slice_mut().expect("contiguous"));
            out.push(d.bias.as_slice_mut().expect("contiguous"));
        }
        for c in &mut self.decoder_convs {
            out.push(c.weight.as_slice_mut().expect("contiguous"));
            out.push(c.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.memory.items.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..4 {
            names.push(format!("encoder.conv{i}.weight"));
            names.push(format!("encoder.conv{i}.bias"));
        }
        for p in ["encoder.proj", "decoder.proj"] {
            names.push(format!("{p}.weight"));
            names.push(format!("{p}.bias"));
        }
        for i in 0..4 {
            names.push(format!("decoder.conv{i}.weight"));
            names.push(format!("decoder.conv{i}.bias"));
        }
        names.push("memory.items".into());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &StreamModel, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    fn check_patch(&self, patch: &TargetPatch) -> Result<()> {
        let expected = (self.arch.input_channels, self.arch.patch_size, self.arch.patch_size);
        if patch.0.dim() != expected {
            return Err(Error::shape(
                "encoder input",
                format!("{expected:?}"),
                format!("{:?}", patch.0.dim()),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, patch: &TargetPatch) -> Result<LatentFeature> {
        self.check_patch(patch)?;
        Ok(LatentFeature(self.encode_traced(&patch.0).latent))
    }

    pub fn decode(&self, fused: &Array1<f64>) -> Result<TargetPatch> {
        if fused.len() != 2 * self.arch.latent_dim {
            return Err(Error::shape("decoder input", 2 * self.arch.latent_dim, fused.len()));
        }
        Ok(TargetPatch(self.decode_traced(fused.clone()).output))
    }

    fn encode_traced(&self, input: &Array3<f64>) -> EncoderTrace {
        let mut cols = Vec::with_capacity(4);
        let mut acts = Vec::with_capacity(4);
        let mut argmax = Vec::with_capacity(3);
        let mut x = input.clone();
        for (k, conv) in self.encoder_convs.iter().enumerate() {
            let (mut y, c) = conv.forward(&x);
            nn::relu_inplace(&mut y);
            cols.push(c);
            x = if k < 3 {
                let (p, a) = nn::max_pool(&y);
                argmax.push(a);
                p
            } else {
                y.clone()
            };
            acts.push(y);
        }
        let flat = Array1::from(x.into_raw_vec_and_offset().0);
        let latent = self.encoder_proj.forward(&flat);
        EncoderTrace {
            cols,
            acts,
            argmax,
            flat,
            latent,
        }
    }

    fn encode_backward(&self, trace: &EncoderTrace, grad_latent: &Array1<f64>, grads: &mut StreamModel) {
        let gflat = self
            .encoder_proj
            .backward(&trace.flat, grad_latent, &mut grads.encoder_proj);
        let side = self.arch.bottleneck_side();
        let mut g = gflat
            .into_shape_with_order((self.arch.channels[3], side, side))
            .expect("bottleneck shape");
        for k in (0..4).rev() {
            if k < 3 {
                g = nn::max_pool_backward(&g, &trace.argmax[k], trace.acts[k].dim());
            }
            nn::relu_backward(&trace.acts[k], &mut g);
            g = self.encoder_convs[k].backward(&trace.cols[k], &g, &mut grads.encoder_convs[k]);
        }
    }

    fn decode_traced(&self, fused: Array1<f64>) -> DecoderTrace {
        let hidden = self.decoder_proj.forward(&fused).mapv(|v| v.max(0.0));
        let side = self.arch.bottleneck_side();
        let mut x = hidden
            .clone()
            .into_shape_with_order((self.arch.channels[3], side, side))
            .expect("bottleneck shape");
        let mut cols = Vec::with_capacity(4);
        let mut acts = Vec::with_capacity(3);
        for (k, conv) in self.decoder_convs.iter().enumerate() {
            let (mut y, c) = conv.forward(&x);
            cols.push(c);
            if k < 3 {
                nn::relu_inplace(&mut y);
                x = nn::upsample(&y);
                acts.push(y);
            } else {
                x = y;
            }
        }
        DecoderTrace {
            fused,
            hidden,
            cols,
            acts,
            output: x,
        }
    }

    /// Returns the gradient w.r.t. the fused input.
    fn decode_backward(&self, trace: &DecoderTrace, grad_out: Array3<f64>, grads: &mut StreamModel) -> Array1<f64> {
        let mut g = grad_out;
        for k in (0..4).rev() {
            if k < 3 {
                g = nn::upsample_backward(&g);
                nn::relu_backward(&trace.acts[k], &mut g);
            }
            g = self.decoder_convs[k].backward(&trace.cols[k], &g, &mut grads.decoder_convs[k]);
        }
        let mut gh = Array1::from(g.into_raw_vec_and_offset().0);
        gh.iter_mut().zip(trace.hidden.iter()).for_each(|(g, &h)| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        self.decoder_proj
            .backward(&trace.fused, &gh, &mut grads.decoder_proj)
    }

    fn frame_pass(&self, group: &FrameGroup) -> Result<FramePass> {
        if group.stream != self.arch.stream {
            return Err(Error::InvalidInput(format!(
                "{} frame group given to a {} model",
                group.stream, self.arch.stream
            )));
        }
        group.validate()?;
        for p in &group.detected {
            self.check_patch(p)?;
        }
        let n = group.n() as f64;
        let counts = group.multiplicities();
        let encoders: Vec<EncoderTrace> = group.detected.iter().map(|p| self.encode_traced(&p.0)).collect();
        let c = self.arch.latent_dim;
        let mut context = Array1::zeros(c);
        for (enc, &m) in encoders.iter().zip(&counts) {
            if m > 0 {
                context.scaled_add(m as f64 / n, &enc.latent);
            }
        }
        let (memory, read) = if self.arch.memory_enabled {
            let trace = memory::memory_forward(&context, &self.memory)?;
            let read = trace.read.clone();
            (Some(trace), read)
        } else {
            (None, context.clone())
        };
        let mut decoders = Vec::with_capacity(encoders.len());
        let mut losses = Vec::with_capacity(encoders.len());
        for (enc, patch) in encoders.iter().zip(&group.detected) {
            let fused = memory::fuse_context(&LatentFeature(enc.latent.clone()), &ContextVector(read.clone()))?;
            let dec = self.decode_traced(fused);
            let diff = &dec.output - &patch.0;
            losses.push(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64);
            decoders.push(dec);
        }
        Ok(FramePass {
            encoders,
            context,
            memory,
            decoders,
            losses,
        })
    }

    /// Encodes all targets, reads memory once for the frame context, and
    /// decodes every target from its feature fused with the read-out.
    pub fn forward_frame(&self, group: &FrameGroup) -> Result<FrameOutput> {
        let pass = self.frame_pass(group)?;
        let entropy = pass
            .memory
            .as_ref()
            .map_or(0.0, |m| entropy_loss(m.read_weights()));
        let weights = pass.memory.as_ref().map(|m| WeightVector {
            values: m.read_weights().clone(),
            is_shrunk: true,
        });
        Ok(FrameOutput {
            reconstructions: group
                .slots
                .iter()
                .map(|&s| TargetPatch(pass.decoders[s].output.clone()))
                .collect(),
            target_losses: group.slots.iter().map(|&s| pass.losses[s]).collect(),
            entropy,
            weights,
        })
    }

    /// Reconstruction error of each distinct patch; slot `i` has error `errors[slots[i]]`.
    pub fn detected_errors(&self, group: &FrameGroup) -> Result<Vec<f64>> {
        Ok(self.frame_pass(group)?.losses)
    }

    /// Frame loss: mean per-target reconstruction plus weighted entropy.
    pub fn frame_loss(&self, group: &FrameGroup, weights: LossWeights) -> Result<LossBreakdown> {
        let pass = self.frame_pass(group)?;
        let recon = pass
            .losses
            .iter()
            .zip(group.multiplicities())
            .map(|(l, m)| l * m as f64)
            .sum::<f64>()
            / group.n() as f64;
        let entropy = pass
            .memory
            .as_ref()
            .map_or(0.0, |m| entropy_loss(m.read_weights()));
        Ok(total_loss(recon, entropy, weights))
    }

    /// Frame loss (mean per-target reconstruction plus weighted entropy) and
    /// its gradient, accumulated into `grads` scaled by `scale`.
    pub fn frame_loss_and_grad(
        &self,
        group: &FrameGroup,
        weights: LossWeights,
        scale: f64,
        grads: &mut StreamModel,
    ) -> Result<LossBreakdown> {
        let pass = self.frame_pass(group)?;
        let n = group.n() as f64;
        let counts = group.multiplicities();
        let recon: f64 = pass
            .losses
            .iter()
            .zip(&counts)
            .map(|(l, &m)| l * m as f64)
            .sum::<f64>()
            / n;
        let entropy = pass
            .memory
            .as_ref()
            .map_or(0.0, |m| entropy_loss(m.read_weights()));
        let breakdown = total_loss(recon, entropy, weights);

        let c = self.arch.latent_dim;
        let mut grad_read = Array1::zeros(c);
        let mut grad_latents = Vec::with_capacity(pass.encoders.len());
        for ((dec, patch), &m) in pass.decoders.iter().zip(&group.detected).zip(&counts) {
            if m == 0 {
                grad_latents.push(Array1::zeros(c));
                continue;
            }
            let coef = scale * weights.recon * m as f64 / n * 2.0 / dec.output.len() as f64;
            let grad_out = (&dec.output - &patch.0) * coef;
            let gfused = self.decode_backward(dec, grad_out, grads);
            grad_latents.push(gfused.slice(ndarray::s![..c]).to_owned());
            grad_read += &gfused.slice(ndarray::s![c..]);
        }

        let grad_context = match &pass.memory {
            Some(trace) => {
                let extra = entropy_grad(trace.read_weights()) * (scale * weights.entropy);
                memory::memory_backward(
                    &pass.context,
                    &self.memory,
                    trace,
                    &grad_read,
                    &extra,
                    &mut grads.memory.items,
                )
            }
            None => grad_read,
        };

        for ((enc, mut g), &m) in pass.encoders.iter().zip(grad_latents).zip(&counts) {
            if m == 0 {
                continue;
            }
            g.scaled_add(m as f64 / n, &grad_context);
            self.encode_backward(enc, &g, grads);
        }
        Ok(breakdown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::FrameGroup;
    use rand::Rng;

    fn tiny(stream: Stream) -> Architecture {
        Architecture {
            patch_size: 16,
            channels: [2, 3, 3, 4],
            latent_dim: 6,
            memory_slots: 5,
            shrink_threshold: 0.1,
            ..Architecture::new(stream)
        }
    }

    fn random_patch(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> TargetPatch {
        TargetPatch(Array3::from_shape_fn((channels, size, size), |_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn zero_patch_zero_bias_encodes_to_zero() {
        let model = StreamModel::new(Architecture::new(Stream::Spatial)).unwrap();
        let z = model.encode(&TargetPatch::zeros(1, 64)).unwrap();
        assert_eq!(z.0.len(), 256);
        assert!(z.0.iter().all(|&v| v == 0.0));
        let out = model.decode(&Array1::zeros(512)).unwrap();
        assert_eq!(out.0.dim(), (1, 64, 64));
        assert!(out.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_decode_are_deterministic_and_checked() {
        let model = StreamModel::new(tiny(Stream::Temporal)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_patch(2, 16, &mut rng);
        assert_eq!(model.encode(&p).unwrap(), model.encode(&p).unwrap());
        assert!(model.encode(&random_patch(1, 16, &mut rng)).is_err());
        let f = Array1::from_shape_fn(12, |_| rng.gen_range(-1.0..1.0));
        assert_eq!(model.decode(&f).unwrap(), model.decode(&f).unwrap());
        assert_eq!(model.decode(&f).unwrap().0.dim(), (2, 16, 16));
        assert!(model.decode(&Array1::zeros(6)).is_err());
    }

    #[test]
    fn identical_targets_identical_reconstructions() {
        let model = StreamModel::new(tiny(Stream::Spatial)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_patch(1, 16, &mut rng);
        let group = FrameGroup::from_patches("v", 1, Stream::Spatial, vec![p.clone(), p.clone(), p]);
        let out = model.forward_frame(&group).unwrap();
        assert_eq!(out.reconstructions.len(), 3);
        assert_eq!(out.reconstructions[0], out.reconstructions[1]);
        assert_eq!(out.reconstructions[1], out.reconstructions[2]);
        assert_eq!(out.target_losses[0], out.target_losses[2]);
    }

    #[test]
    fn padded_slots_match_explicit_copies() {
        let model = StreamModel::new(tiny(Stream::Spatial)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_patch(1, 16, &mut rng);
        let b = random_patch(1, 16, &mut rng);
        let mut padded = FrameGroup::from_patches("v", 1, Stream::Spatial, vec![a.clone(), b.clone()]);
        padded.slots = vec![0, 1, 1, 0, 1];
        let explicit = FrameGroup::from_patches("v", 1, Stream::Spatial, vec![a.clone(), b.clone(), b.clone(), a, b]);
        let x = model.forward_frame(&padded).unwrap();
        let y = model.forward_frame(&explicit).unwrap();
        for (l, r) in x.target_losses.iter().zip(&y.target_losses) {
            assert!((l - r).abs() < 1e-12);
        }
        assert!((x.entropy - y.entropy).abs() < 1e-12);
    }

    #[test]
    fn single_target_context_is_its_feature() {
        let mut arch = tiny(Stream::Spatial);
        arch.memory_enabled = false;
        let model = StreamModel::new(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_patch(1, 16, &mut rng);
        let z = model.encode(&p).unwrap();
        let fused = memory::fuse_context(&z, &ContextVector(z.0.clone())).unwrap();
        let expected = model.decode(&fused).unwrap();
        let out = model
            .forward_frame(&FrameGroup::from_patches("v", 1, Stream::Spatial, vec![p]))
            .unwrap();
        assert_eq!(out.reconstructions[0], expected);
        assert_eq!(out.entropy, 0.0);
        assert!(out.weights.is_none());
    }

    #[test]
    fn rejects_stream_mismatch() {
        let model = StreamModel::new(tiny(Stream::Spatial)).unwrap();
        let group = FrameGroup::from_patches("v", 1, Stream::Temporal, vec![TargetPatch::zeros(2, 16)]);
        assert!(model.forward_frame(&group).is_err());
    }

    #[test]
    fn tensor_order_matches_names() {
        let model = StreamModel::new(tiny(Stream::Spatial)).unwrap();
        assert_eq!(model.tensors().len(), StreamModel::tensor_names().len());
        let grads = model.zeros_like();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert_eq!(grads.parameter_count(), model.parameter_count());
    }
}

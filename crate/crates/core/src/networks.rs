//! Segmentation network, auxiliary decoders and the error localization
//! network, as forward functions over bound parameters.
//!
//! Parameter paths:
//! - `enc.*`: shared encoder, stride 8
//! - `dec0.*`: main decoder; `aux{k}.*` for `k = 1..=K`: auxiliary decoders
//!   (same architecture as `dec0`)
//! - `eln.*`: error localization network; `secn.*`: error correction baseline

use eln_autograd::{BoundParams, Graph, ParamStore, Scalar, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result};

pub const ENCODER_STRIDE: usize = 8;
pub const ELN_STRIDE: usize = 4;
/// The decoder trunk and embedding live at input / 4.
pub const EMBEDDING_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub num_classes: usize,
    pub embedding_dim: usize,
    /// Widths of the stride-2, -4 and -8 encoder stages.
    pub encoder_widths: [usize; 3],
    pub decoder_width: usize,
    pub num_aux_decoders: usize,
    /// Widths of the two strided ELN stages.
    pub eln_widths: [usize; 2],
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            embedding_dim: 16,
            encoder_widths: [16, 32, 64],
            decoder_width: 32,
            num_aux_decoders: 2,
            eln_widths: [16, 32],
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be >= 2".into()));
        }
        if self.embedding_dim == 0 || self.decoder_width < 2 {
            return Err(Error::Config("model.embedding_dim must be >= 1 and decoder_width >= 2".into()));
        }
        if self.encoder_widths.contains(&0) || self.eln_widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// `3 + C + 1`: image, class probabilities, entropy.
    pub fn eln_input_channels(&self) -> usize {
        3 + self.num_classes + 1
    }
}

/// Which network sits in the error-module slot of stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorModule {
    /// Binary validity map (one sigmoid channel).
    Eln,
    /// Simple error correction network: corrected class logits.
    Secn,
}

impl ErrorModule {
    pub fn prefix(self) -> &'static str {
        match self {
            ErrorModule::Eln => "eln",
            ErrorModule::Secn => "secn",
        }
    }
}

pub fn aux_prefix(k: usize) -> String {
    format!("aux{k}")
}

pub const MAIN_DECODER: &str = "dec0";

/// Multi-scale encoder output.
pub struct EncoderFeatures<'g, T: Scalar> {
    /// Stride-4 features, consumed by the decoder skip path.
    pub low: Var<'g, T>,
    /// Stride-8 features.
    pub high: Var<'g, T>,
    pub input_size: (usize, usize),
}

impl<'g, T: Scalar> EncoderFeatures<'g, T> {
    /// Same features with the gradient path cut.
    pub fn detach(&self) -> Self {
        Self { low: self.low.detach(), high: self.high.detach(), input_size: self.input_size }
    }
}

pub struct DecoderOutput<'g, T: Scalar> {
    /// `[B, C, H, W]` at input resolution.
    pub logits: Var<'g, T>,
    /// `[B, D, H/4, W/4]` from the projection head.
    pub embedding: Var<'g, T>,
}

fn conv<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    name: &str,
    x: Var<'g, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(x.conv2d(w, Some(b), stride, pad)?)
}

/// Architecture description plus forward functions.
#[derive(Clone, Debug)]
pub struct SegNetwork {
    pub config: SegModelConfig,
}

impl SegNetwork {
    pub fn new(config: SegModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// `(name, [out, in, k, k])` for every convolution of the network.
    fn layer_shapes(&self, error_modules: &[ErrorModule]) -> Vec<(String, [usize; 4])> {
        let c = &self.config;
        let [e1, e2, e3] = c.encoder_widths;
        let dw = c.decoder_width;
        let low_w = (dw / 2).max(1);
        let mut layers = vec![
            ("enc.conv1".to_string(), [e1, 3, 3, 3]),
            ("enc.conv2".to_string(), [e2, e1, 3, 3]),
            ("enc.conv3".to_string(), [e3, e2, 3, 3]),
            ("enc.conv4".to_string(), [e3, e3, 3, 3]),
        ];
        let decoders = std::iter::once(MAIN_DECODER.to_string()).chain((1..=c.num_aux_decoders).map(aux_prefix));
        for d in decoders {
            layers.push((format!("{d}.reduce_high"), [dw, e3, 1, 1]));
            layers.push((format!("{d}.reduce_low"), [low_w, e2, 1, 1]));
            layers.push((format!("{d}.fuse"), [dw, dw + low_w, 3, 3]));
            layers.push((format!("{d}.seg1"), [dw, dw, 1, 1]));
            layers.push((format!("{d}.seg2"), [c.num_classes, dw, 1, 1]));
            layers.push((format!("{d}.proj1"), [dw, dw, 1, 1]));
            layers.push((format!("{d}.proj2"), [c.embedding_dim, dw, 1, 1]));
        }
        let [l1, l2] = c.eln_widths;
        let input = c.eln_input_channels();
        for m in error_modules {
            let out = match m {
                ErrorModule::Eln => 1,
                ErrorModule::Secn => c.num_classes,
            };
            let p = m.prefix();
            layers.push((format!("{p}.conv1"), [l1, input, 3, 3]));
            layers.push((format!("{p}.conv2"), [l2, l1, 3, 3]));
            layers.push((format!("{p}.conv3"), [l2, l2, 3, 3]));
            layers.push((format!("{p}.head1"), [l1, l2 + input, 1, 1]));
            layers.push((format!("{p}.head2"), [out, l1, 1, 1]));
        }
        layers
    }

    /// He-normal weights, zero biases. Each tensor draws from its own
    /// stream keyed by `(seed, path)`.
    pub fn init_params(&self, seed: u64, error_modules: &[ErrorModule]) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, shape) in self.layer_shapes(error_modules) {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let std = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let key = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
            let mut r = rng::stream(&[tag::INIT, seed, key]);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut r)).collect();
            store.insert(format!("{name}.weight"), Tensor::from_vec(&shape, data).expect("sized"));
            store.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
        store
    }

    pub fn encoder_forward<'g, T: Scalar>(
        &self,
        p: &BoundParams<'g, T>,
        image: Var<'g, T>,
    ) -> Result<EncoderFeatures<'g, T>> {
        let v = image.value();
        let (_, ch, h, w) = v.dims4()?;
        if ch != 3 {
            return Err(Error::Tensor(eln_autograd::Error::Shape(format!("encoder expects 3 channels, got {ch}"))));
        }
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Tensor(eln_autograd::Error::Shape(format!(
                "input {h}x{w} not divisible by encoder stride {ENCODER_STRIDE}"
            ))));
        }
        let x = conv(p, "enc.conv1", image, 2, 1)?.relu();
        let low = conv(p, "enc.conv2", x, 2, 1)?.relu();
        let x = conv(p, "enc.conv3", low, 2, 1)?.relu();
        let high = conv(p, "enc.conv4", x, 1, 1)?.relu();
        Ok(EncoderFeatures { low, high, input_size: (h, w) })
    }

    /// Decoder `prefix` (`dec0`, `aux1`, ...). Seg and Proj heads share the trunk.
    pub fn decoder_forward<'g, T: Scalar>(
        &self,
        p: &BoundParams<'g, T>,
        prefix: &str,
        features: &EncoderFeatures<'g, T>,
    ) -> Result<DecoderOutput<'g, T>> {
        let (_, _, lh, lw) = features.low.value().dims4()?;
        let high = conv(p, &format!("{prefix}.reduce_high"), features.high, 1, 0)?.relu();
        let high = high.upsample_bilinear(lh, lw)?;
        let low = conv(p, &format!("{prefix}.reduce_low"), features.low, 1, 0)?.relu();
        let graph: &Graph<T> = high.graph();
        let fused = graph.concat(&[high, low], 1)?;
        let trunk = conv(p, &format!("{prefix}.fuse"), fused, 1, 1)?.relu();
        let seg = conv(p, &format!("{prefix}.seg1"), trunk, 1, 0)?.relu();
        let seg = conv(p, &format!("{prefix}.seg2"), seg, 1, 0)?;
        let (h, w) = features.input_size;
        let logits = seg.upsample_bilinear(h, w)?;
        let proj = conv(p, &format!("{prefix}.proj1"), trunk, 1, 0)?.relu();
        let embedding = conv(p, &format!("{prefix}.proj2"), proj, 1, 0)?;
        Ok(DecoderOutput { logits, embedding })
    }

    /// Error module forward on a `[B, 3+C+1, H, W]` input. Returns validity
    /// logits `[B,1,H,W]` for the ELN, corrected class logits for s-ECN.
    pub fn error_module_forward<'g, T: Scalar>(
        &self,
        p: &BoundParams<'g, T>,
        module: ErrorModule,
        input: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let v = input.value();
        let (_, ch, h, w) = v.dims4()?;
        let expected = self.config.eln_input_channels();
        if ch != expected {
            return Err(Error::Tensor(eln_autograd::Error::Shape(format!(
                "error module expects {expected} input channels (3 + C + 1), got {ch}"
            ))));
        }
        if h % ELN_STRIDE != 0 || w % ELN_STRIDE != 0 {
            return Err(Error::Tensor(eln_autograd::Error::Shape(format!(
                "input {h}x{w} not divisible by ELN stride {ELN_STRIDE}"
            ))));
        }
        let pre = module.prefix();
        let x = conv(p, &format!("{pre}.conv1"), input, 2, 1)?.relu();
        let x = conv(p, &format!("{pre}.conv2"), x, 2, 1)?.relu();
        let x = conv(p, &format!("{pre}.conv3"), x, 1, 1)?.relu();
        let up = x.upsample_bilinear(h, w)?;
        let joined = input.graph().concat(&[up, input], 1)?;
        let x = conv(p, &format!("{pre}.head1"), joined, 1, 0)?.relu();
        conv(p, &format!("{pre}.head2"), x, 1, 0)
    }

    /// ELN validity logits; `sigmoid` of these is the validity probability.
    pub fn eln_forward<'g, T: Scalar>(&self, p: &BoundParams<'g, T>, input: Var<'g, T>) -> Result<Var<'g, T>> {
        self.error_module_forward(p, ErrorModule::Eln, input)
    }
}

/// Class probabilities and entropy normalized by `ln C` to `[0,1]`.
pub fn softmax_and_entropy<T: Scalar>(logits: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    let probs = logits.softmax_channels()?;
    let hw = h * w;
    let norm = T::from_f64((c as f64).ln());
    let mut ent = vec![T::zero(); n * hw];
    for b in 0..n {
        for px in 0..hw {
            let mut e = T::zero();
            for ch in 0..c {
                let pr = probs.data()[(b * c + ch) * hw + px];
                if pr > T::zero() {
                    e = e - pr * pr.ln();
                }
            }
            ent[b * hw + px] = (e / norm).max(T::zero()).min(T::one());
        }
    }
    Ok((probs, Tensor::from_vec(&[n, 1, h, w], ent)?))
}

/// `image ⊕ probs ⊕ entropy` along the channel axis.
pub fn build_eln_input<T: Scalar>(image: &Tensor<T>, probs: &Tensor<T>, entropy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, h, w) = image.dims4()?;
    for t in [probs, entropy] {
        let (tn, _, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Tensor(eln_autograd::Error::Shape(format!(
                "ELN input parts disagree: {:?} vs {:?}",
                image.shape(),
                t.shape()
            ))));
        }
    }
    if entropy.shape()[1] != 1 {
        return Err(Error::Tensor(eln_autograd::Error::Shape("entropy map must have one channel".into())));
    }
    Ok(Tensor::concat(&[image, probs, entropy], 1)?)
}

/// Parameters of the student path (`enc.*` and `dec0.*`).
pub fn is_student_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("dec0.")
}

/// Student parameters only: what gets exported for inference.
pub fn student_params(all: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = all.subset("enc.");
    for (k, v) in all.subset("dec0.").iter() {
        out.insert(k.clone(), v.clone());
    }
    out
}

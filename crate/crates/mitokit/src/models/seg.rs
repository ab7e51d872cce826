//! Encoder-decoder segmentation network with attention-gated decoder blocks.
//!
//! A compact U-Net-shaped model: each encoder stage halves the spatial
//! resolution, each decoder stage upsamples and concatenates the matching
//! skip connection, and (optionally) passes the concatenated features
//! through a channel gate followed by a spatial gate before convolving.
//! The head maps to one logit per pixel.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Segmentation architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    /// Channel width per encoder stage, shallowest first; the decoder
    /// mirrors these stage-for-stage.
    pub encoder_channels: Vec<usize>,
    /// Gate decoder features with channel + spatial attention.
    pub attention: bool,
    /// Expected square input edge; inputs must be divisible by
    /// `2^(stages-1)`.
    pub input_size: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            encoder_channels: vec![16, 32, 64, 128],
            attention: true,
            input_size: 512,
        }
    }
}

impl SegModelConfig {
    /// Small configuration for tests and smoke runs.
    pub fn tiny(input_size: usize) -> Self {
        SegModelConfig {
            encoder_channels: vec![8, 16, 32],
            attention: true,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() < 3 {
            return Err(Error::InvalidParameter(
                "segmentation model needs at least 3 encoder stages".into(),
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter(
                "encoder channel widths must be positive".into(),
            ));
        }
        let factor = 1usize << (self.encoder_channels.len() - 1);
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "input size {} is not divisible by the downsampling factor {factor}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Two stacked same-padded 3x3 convolutions, each followed by ReLU.
struct ConvBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ConvBlock {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        ConvBlock {
            c1: Conv2d::init(params, rng, &format!("{name}.conv1"), c_in, c_out, 3),
            c2: Conv2d::init(params, rng, &format!("{name}.conv2"), c_out, c_out, 3),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.c1.forward(sess, x);
        let h = sess.tape.relu(h);
        let h = self.c2.forward(sess, h);
        sess.tape.relu(h)
    }
}

/// Channel attention: pooled descriptor -> bottleneck MLP -> sigmoid gate.
struct ChannelGate {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelGate {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let hidden = (channels / 4).max(1);
        ChannelGate {
            fc1: Linear::init(params, rng, &format!("{name}.fc1"), channels, hidden, true),
            fc2: Linear::init(params, rng, &format!("{name}.fc2"), hidden, channels, true),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let pooled = sess.tape.global_avg_pool(x);
        let h = self.fc1.forward(sess, pooled, None);
        let h = sess.tape.relu(h);
        let h = self.fc2.forward(sess, h, None);
        let gate = sess.tape.sigmoid(h);
        sess.tape.mul_channel_gate(x, gate)
    }
}

/// Spatial attention: channel mean+max maps -> 7x7 convolution -> sigmoid
/// gate broadcast over channels.
struct SpatialGate {
    conv: Conv2d,
}

impl SpatialGate {
    fn init<T: Scalar>(params: &mut Params<T>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        SpatialGate {
            conv: Conv2d::init(params, rng, &format!("{name}.conv"), 2, 1, 7),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let mean = sess.tape.channel_mean(x);
        let max = sess.tape.channel_max(x);
        let stacked = sess.tape.concat(mean, max, 1);
        let map = self.conv.forward(sess, stacked);
        let gate = sess.tape.sigmoid(map);
        sess.tape.mul_spatial_gate(x, gate)
    }
}

struct DecoderBlock {
    channel_gate: Option<ChannelGate>,
    spatial_gate: Option<SpatialGate>,
    block: ConvBlock,
}

/// Patch-to-logit-map segmentation model.
pub struct SegModel {
    pub config: SegModelConfig,
    stem: ConvBlock,
    encoder: Vec<ConvBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl SegModel {
    /// Register all weights into `params` and return the wired model.
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        config: SegModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let ch = &config.encoder_channels;
        let stem = ConvBlock::init(params, rng, "seg.enc0", 3, ch[0]);
        let encoder = (1..ch.len())
            .map(|i| ConvBlock::init(params, rng, &format!("seg.enc{i}"), ch[i - 1], ch[i]))
            .collect();
        // decoder stage i consumes upsampled ch[i+1] concatenated with the
        // skip at ch[i] and emits ch[i]
        let decoder = (0..ch.len() - 1)
            .rev()
            .map(|i| {
                let name = format!("seg.dec{i}");
                let cat = ch[i + 1] + ch[i];
                DecoderBlock {
                    channel_gate: config
                        .attention
                        .then(|| ChannelGate::init(params, rng, &format!("{name}.cgate"), cat)),
                    spatial_gate: config
                        .attention
                        .then(|| SpatialGate::init(params, rng, &format!("{name}.sgate"))),
                    block: ConvBlock::init(params, rng, &name, cat, ch[i]),
                }
            })
            .collect();
        let head = Conv2d::init(params, rng, "seg.head", ch[0], 1, 1);
        Ok(SegModel {
            config,
            stem,
            encoder,
            decoder,
            head,
        })
    }

    /// Map `(n, 3, h, w)` images to `(n, 1, h, w)` logits.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.encoder.len() + 1);
        let mut h = self.stem.forward(sess, x);
        skips.push(h);
        for stage in &self.encoder {
            let pooled = sess.tape.maxpool2(h);
            h = stage.forward(sess, pooled);
            skips.push(h);
        }
        // deepest skip is the bottleneck itself; walk back up
        for (step, dec) in self.decoder.iter().enumerate() {
            let skip = skips[skips.len() - 2 - step];
            let up = sess.tape.upsample2(h);
            let mut cat = sess.tape.concat(up, skip, 1);
            if let Some(g) = &dec.channel_gate {
                cat = g.forward(sess, cat);
            }
            if let Some(g) = &dec.spatial_gate {
                cat = g.forward(sess, cat);
            }
            h = dec.block.forward(sess, cat);
        }
        self.head.forward(sess, h)
    }

    /// Forward pass followed by sigmoid: per-pixel mitosis probabilities.
    pub fn predict_probs<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let logits = self.forward(sess, x);
        sess.tape.sigmoid(logits)
    }
}

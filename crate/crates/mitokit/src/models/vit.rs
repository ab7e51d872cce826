//! Small vision transformer for single-logit patch classification.
//!
//! Standard pre-norm ViT plumbing: non-overlapping patch embedding, a
//! learned class token and position table, multi-head self-attention
//! blocks, and a one-neuron head on the final class token. Per-block
//! linear layers are named `blocks.N.attn.qkv`, `blocks.N.attn.proj`,
//! `blocks.N.mlp.fc1`, `blocks.N.mlp.fc2` so adapter target patterns bind
//! to them while the embedding and head stay untouched.

use crate::error::{Error, Result};
use crate::lora::AdapterHost;
use crate::nn::{normal, LayerNorm, Linear, Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Vision-transformer architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    /// Output neurons in the classification head.
    pub head_outputs: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            depth: 2,
            heads: 4,
            dim: 64,
            head_outputs: 1,
        }
    }
}

impl VitConfig {
    /// Small configuration for tests and smoke runs.
    pub fn tiny(image_size: usize) -> Self {
        VitConfig {
            image_size,
            patch_size: 8,
            depth: 2,
            heads: 2,
            dim: 32,
            head_outputs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidParameter(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.head_outputs == 0 {
            return Err(Error::InvalidParameter(
                "depth and head outputs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch tokens per image (excluding the class token).
    pub fn num_patches(&self) -> usize {
        let per_edge = self.image_size / self.patch_size;
        per_edge * per_edge
    }
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Image-to-logit transformer classifier.
pub struct VitModel {
    pub config: VitConfig,
    patch_embed: Linear,
    cls_token: crate::nn::ParamId,
    pos_embed: crate::nn::ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl VitModel {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        config: VitConfig,
    ) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let tokens = config.num_patches() + 1;
        let patch_embed = Linear::init(params, rng, "patch_embed", patch_dim, dim, true);
        let cls_token = params.add("cls_token", normal(rng, &[1, 1, dim], 0.02), true);
        let pos_embed = params.add("pos_embed", normal(rng, &[tokens, dim], 0.02), true);
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                Block {
                    ln1: LayerNorm::init(params, &format!("{p}.ln1"), dim),
                    qkv: Linear::init(params, rng, &format!("{p}.attn.qkv"), dim, 3 * dim, true),
                    proj: Linear::init(params, rng, &format!("{p}.attn.proj"), dim, dim, true),
                    ln2: LayerNorm::init(params, &format!("{p}.ln2"), dim),
                    fc1: Linear::init(params, rng, &format!("{p}.mlp.fc1"), dim, 4 * dim, true),
                    fc2: Linear::init(params, rng, &format!("{p}.mlp.fc2"), 4 * dim, dim, true),
                }
            })
            .collect();
        let norm = LayerNorm::init(params, "norm", dim);
        let head = Linear::init(params, rng, "head", dim, config.head_outputs, true);
        Ok(VitModel {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Split `(n, 3, h, w)` into flattened non-overlapping patches
    /// `(n, tokens, 3 * p * p)`.
    fn patchify<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let shape = sess.tape.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let p = self.config.patch_size;
        assert_eq!(c, 3, "expected RGB input");
        assert_eq!(h, self.config.image_size, "input height");
        assert_eq!(w, self.config.image_size, "input width");
        let (hp, wp) = (h / p, w / p);
        let split = sess.tape.reshape(x, &[n, c, hp, p, wp, p]);
        let grouped = sess.tape.permute(split, &[0, 2, 4, 1, 3, 5]);
        sess.tape.reshape(grouped, &[n, hp * wp, c * p * p])
    }

    fn attention<T: Scalar>(
        &self,
        block: &Block,
        sess: &mut Session<'_, T>,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let shape = sess.tape.value(x).shape().to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let dh = d / heads;

        let qkv = block.qkv.forward(sess, x, rng.as_deref_mut());
        let split = |sess: &mut Session<'_, T>, idx: usize| {
            let part = sess.tape.narrow(qkv, 2, idx * d, d);
            let headed = sess.tape.reshape(part, &[n, t, heads, dh]);
            sess.tape.permute(headed, &[0, 2, 1, 3])
        };
        let q = split(sess, 0);
        let k = split(sess, 1);
        let v = split(sess, 2);

        let scores = sess.tape.bmm_nt(q, k);
        let scaled = sess.tape.scale(scores, T::of_f64(1.0 / (dh as f64).sqrt()));
        let attn = sess.tape.softmax_last(scaled);
        let ctx = sess.tape.bmm(attn, v);

        let swapped = sess.tape.permute(ctx, &[0, 2, 1, 3]);
        let merged = sess.tape.reshape(swapped, &[n, t, d]);
        block.proj.forward(sess, merged, rng)
    }

    /// Map `(n, 3, h, w)` images to `(n, head_outputs)` logits.
    ///
    /// `rng` drives adapter dropout and is only needed when training with
    /// unmerged adapters.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let patches = self.patchify(sess, x);
        let tokens = self.patch_embed.forward(sess, patches, None);
        let n = sess.tape.value(tokens).shape()[0];

        let cls = sess.p(self.cls_token);
        let cls_batch = sess.tape.expand0(cls, n);
        let mut h = sess.tape.concat(cls_batch, tokens, 1);
        let pos = sess.p(self.pos_embed);
        h = sess.tape.add_broadcast0(h, pos);

        for block in &self.blocks {
            let normed = block.ln1.forward(sess, h);
            let attn_out = self.attention(block, sess, normed, rng.as_deref_mut());
            h = sess.tape.add(h, attn_out);

            let normed = block.ln2.forward(sess, h);
            let mid = block.fc1.forward(sess, normed, rng.as_deref_mut());
            let mid = sess.tape.gelu(mid);
            let mlp_out = block.fc2.forward(sess, mid, rng.as_deref_mut());
            h = sess.tape.add(h, mlp_out);
        }

        let normed = self.norm.forward(sess, h);
        let cls_out = sess.tape.narrow(normed, 1, 0, 1);
        let dim = self.config.dim;
        let flat = sess.tape.reshape(cls_out, &[n, dim]);
        self.head.forward(sess, flat, None)
    }

    /// Name of the classification head weight, for unfreezing after the
    /// backbone is frozen.
    pub fn head_param_names(&self) -> Vec<String> {
        vec!["head.weight".into(), "head.bias".into()]
    }
}

impl AdapterHost for VitModel {
    fn adapter_sites(&mut self) -> Vec<(String, &mut Linear)> {
        let mut sites: Vec<(String, &mut Linear)> =
            vec![("patch_embed".into(), &mut self.patch_embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            sites.push((format!("blocks.{i}.attn.qkv"), &mut b.qkv));
            sites.push((format!("blocks.{i}.attn.proj"), &mut b.proj));
            sites.push((format!("blocks.{i}.mlp.fc1"), &mut b.fc1));
            sites.push((format!("blocks.{i}.mlp.fc2"), &mut b.fc2));
        }
        sites.push(("head".into(), &mut self.head));
        sites
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{apply_lora, LoraConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn build(seed: u64) -> (Params<f64>, VitModel) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VitModel::init(&mut params, &mut rng, VitConfig::tiny(64)).unwrap();
        (params, model)
    }

    #[test]
    fn token_count_and_output_shape() {
        let (params, model) = build(0);
        // 64/8 = 8 patches per edge -> 64 patch tokens + 1 class token
        assert_eq!(model.config.num_patches(), 64);
        assert_eq!(params.value(model.pos_embed).shape(), [65, 32]);

        let mut sess = Session::new(&params, false);
        let x = sess.input(ArrayD::from_elem(IxDyn(&[2, 3, 64, 64]), 0.4));
        let y = model.forward(&mut sess, x, None);
        assert_eq!(sess.tape.value(y).shape(), [2, 1]);
    }

    #[test]
    fn default_adapter_targets_bind_four_sites_per_block() {
        let (mut params, mut model) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let wrapped = apply_lora(&mut model, &mut params, &LoraConfig::default(), &mut rng).unwrap();
        assert_eq!(wrapped.len(), 4 * model.config.depth);
        assert!(wrapped.iter().all(|n| !n.contains("head")));
        assert!(wrapped.iter().all(|n| !n.contains("patch_embed")));
    }

    #[test]
    fn indivisible_configs_are_rejected() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad_patch = VitConfig {
            image_size: 64,
            patch_size: 7,
            ..VitConfig::tiny(64)
        };
        assert!(VitModel::init(&mut params, &mut rng, bad_patch).is_err());
        let bad_heads = VitConfig {
            heads: 3,
            ..VitConfig::tiny(64)
        };
        assert!(VitModel::init(&mut params, &mut rng, bad_heads).is_err());
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let (a, _) = build(5);
        let (b, _) = build(5);
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn patchify_preserves_pixel_grouping() {
        // a distinct constant per 8x8 patch must land in distinct tokens
        let (params, model) = build(2);
        let mut img = ArrayD::zeros(IxDyn(&[1, 3, 64, 64]));
        for by in 0..8 {
            for bx in 0..8 {
                let val = (by * 8 + bx) as f64;
                for c in 0..3 {
                    for y in 0..8 {
                        for x in 0..8 {
                            img[[0, c, by * 8 + y, bx * 8 + x]] = val;
                        }
                    }
                }
            }
        }
        let mut sess = Session::new(&params, false);
        let xv = sess.input(img);
        let patches = model.patchify(&mut sess, xv);
        let v = sess.tape.value(patches);
        assert_eq!(v.shape(), [1, 64, 192]);
        for tok in 0..64 {
            for k in 0..192 {
                assert_eq!(v[[0, tok, k]], tok as f64, "token {tok} is not uniform");
            }
        }
    }

    #[test]
    fn gradients_reach_all_parameters_when_unfrozen() {
        let (mut params, model) = build(3);
        let mut sess = Session::new(&params, true);
        let x = sess.input(ArrayD::from_elem(IxDyn(&[2, 3, 64, 64]), 0.2));
        let y = model.forward(&mut sess, x, None);
        let loss = sess.tape.mean_all(y);
        let grads = sess.backward(loss);
        let ids: Vec<_> = params.ids().collect();
        params.accumulate(&grads);
        for id in ids {
            assert!(
                params.grad(id).is_some(),
                "no gradient for {}",
                params.name(id)
            );
        }
    }
}

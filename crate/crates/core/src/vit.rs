//! Promptless segmenter on a SAM-style ViT backbone.
//!
//! The image encoder is a plain ViT with windowed attention in most blocks,
//! global attention in a few, decomposed relative position terms and a
//! convolutional neck. The prompt encoder is kept for weight compatibility
//! but only its "no mask" embedding and positional encoding are used: no
//! points, boxes or masks are ever supplied. The mask decoder is the usual
//! two-way transformer followed by upscaling and a hypernetwork that turns
//! the first mask token into the single output mask.
//!
//! Parameter names follow the original checkpoint layout so pretrained
//! weights can be assigned directly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use menisc_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::checkpoint::tensor_from_view;
use crate::error::{Error, IoContext, Result};
use crate::nn::{self, ForwardCtx};
use crate::preprocess::{
    extract_mask_slices, extract_slices, prepare_backbone_input, restore_slice_mask, stack_slices, BackboneMeta,
    Image2D, Slice2D,
};
use crate::training::{Sample, Segmenter};
use crate::volume::{BinaryMask, Volume};

/// Per-channel mean and standard deviation on the 0-255 scale.
pub const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
pub const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

const ENCODER_LN_EPS: f64 = 1e-6;
const DECODER_LN_EPS: f64 = 1e-5;
const MASK_IN_CHANS: usize = 16;
const NUM_POINT_EMBEDDINGS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptlessViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Side of the attention windows; blocks listed in
    /// `global_attn_indexes` attend over the whole grid instead.
    pub window_size: usize,
    pub global_attn_indexes: Vec<usize>,
    /// Channels of the neck output and of every decoder token.
    pub prompt_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub attention_downsample_rate: usize,
    pub num_mask_tokens: usize,
    pub iou_head_hidden: usize,
    /// Masks returned per image. Only 1 is supported.
    pub output_masks: usize,
}

impl Default for PromptlessViTConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl PromptlessViTConfig {
    /// ViT-B backbone at 1024 x 1024 input.
    pub fn base() -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_dim: 3072,
            window_size: 14,
            global_attn_indexes: vec![2, 5, 8, 11],
            prompt_dim: 256,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            attention_downsample_rate: 2,
            num_mask_tokens: 4,
            iou_head_hidden: 256,
            output_masks: 1,
        }
    }

    /// Same topology at a size that trains on a laptop CPU.
    pub fn toy() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            mlp_dim: 512,
            window_size: 4,
            global_attn_indexes: vec![1, 3],
            prompt_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 256,
            attention_downsample_rate: 2,
            num_mask_tokens: 4,
            iou_head_hidden: 64,
            output_masks: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" | "vit-b" => Ok(Self::base()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown backbone preset `{name}` (base, toy)"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Side of the low-resolution mask produced by the decoder.
    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.output_masks != 1 {
            return bad(format!(
                "promptless decoding returns exactly one mask per image, {} requested",
                self.output_masks
            ));
        }
        let sizes = [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_dim,
            self.prompt_dim,
            self.decoder_depth,
            self.decoder_heads,
            self.decoder_mlp_dim,
            self.attention_downsample_rate,
            self.num_mask_tokens,
            self.iou_head_hidden,
        ];
        if sizes.contains(&0) {
            return bad(format!("backbone sizes must be positive: {self:?}"));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch_size));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.prompt_dim % 8 != 0 {
            return bad(format!("prompt dim {} must be a multiple of 8", self.prompt_dim));
        }
        let inner = self.prompt_dim / self.attention_downsample_rate;
        if self.prompt_dim % self.attention_downsample_rate != 0 || inner % self.decoder_heads != 0 {
            return bad(format!(
                "prompt dim {} with downsample {} does not split over {} heads",
                self.prompt_dim, self.attention_downsample_rate, self.decoder_heads
            ));
        }
        if let Some(i) = self.global_attn_indexes.iter().find(|&&i| i >= self.depth) {
            return bad(format!("global attention index {i} beyond depth {}", self.depth));
        }
        let windowed = self.global_attn_indexes.len() < self.depth;
        if windowed && self.window_size == 0 {
            return bad("windowed blocks need a positive window size".into());
        }
        Ok(())
    }
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Encoders frozen, mask decoder trained.
    #[default]
    DecoderOnly,
    EndToEnd,
}

pub struct PromptlessViT<T: Scalar = f32> {
    pub config: PromptlessViTConfig,
    pub params: ParamStore<T>,
    pub freeze: FreezePolicy,
}

fn add_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        nn::add_linear(store, &format!("{name}.layers.{i}"), w[0], w[1], true, rng)?;
    }
    Ok(())
}

fn add_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
    inner: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for p in ["q_proj", "k_proj", "v_proj"] {
        nn::add_linear(store, &format!("{name}.{p}"), dim, inner, true, rng)?;
    }
    nn::add_linear(store, &format!("{name}.out_proj"), inner, dim, true, rng)
}

impl<T: Scalar> PromptlessViT<T> {
    pub fn new(config: PromptlessViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (e, gsz, p) = (c.embed_dim, c.grid(), c.patch_size);

        nn::add_conv(&mut s, "image_encoder.patch_embed.proj", 3, e, &[p, p], true, &mut rng)?;
        s.add("image_encoder.pos_embed", nn::normal(&[1, gsz, gsz, e], 0.02, &mut rng))?;
        let hd = e / c.num_heads;
        for i in 0..c.depth {
            let b = format!("image_encoder.blocks.{i}");
            nn::add_norm(&mut s, &format!("{b}.norm1"), e)?;
            nn::add_linear(&mut s, &format!("{b}.attn.qkv"), e, 3 * e, true, &mut rng)?;
            nn::add_linear(&mut s, &format!("{b}.attn.proj"), e, e, true, &mut rng)?;
            let side = if c.global_attn_indexes.contains(&i) { gsz } else { c.window_size };
            s.add(format!("{b}.attn.rel_pos_h"), Tensor::zeros(&[2 * side - 1, hd]))?;
            s.add(format!("{b}.attn.rel_pos_w"), Tensor::zeros(&[2 * side - 1, hd]))?;
            nn::add_norm(&mut s, &format!("{b}.norm2"), e)?;
            nn::add_linear(&mut s, &format!("{b}.mlp.lin1"), e, c.mlp_dim, true, &mut rng)?;
            nn::add_linear(&mut s, &format!("{b}.mlp.lin2"), c.mlp_dim, e, true, &mut rng)?;
        }
        let d = c.prompt_dim;
        nn::add_conv(&mut s, "image_encoder.neck.0", e, d, &[1, 1], false, &mut rng)?;
        nn::add_norm(&mut s, "image_encoder.neck.1", d)?;
        nn::add_conv(&mut s, "image_encoder.neck.2", d, d, &[3, 3], false, &mut rng)?;
        nn::add_norm(&mut s, "image_encoder.neck.3", d)?;

        s.add_buffer("prompt_encoder.pe_layer.positional_encoding_gaussian_matrix", nn::normal(&[2, d / 2], 1.0, &mut rng))?;
        for i in 0..NUM_POINT_EMBEDDINGS {
            s.add(format!("prompt_encoder.point_embeddings.{i}.weight"), nn::normal(&[1, d], 1.0, &mut rng))?;
        }
        s.add("prompt_encoder.not_a_point_embed.weight", nn::normal(&[1, d], 1.0, &mut rng))?;
        let m = MASK_IN_CHANS;
        nn::add_conv(&mut s, "prompt_encoder.mask_downscaling.0", 1, m / 4, &[2, 2], true, &mut rng)?;
        nn::add_norm(&mut s, "prompt_encoder.mask_downscaling.1", m / 4)?;
        nn::add_conv(&mut s, "prompt_encoder.mask_downscaling.3", m / 4, m, &[2, 2], true, &mut rng)?;
        nn::add_norm(&mut s, "prompt_encoder.mask_downscaling.4", m)?;
        nn::add_conv(&mut s, "prompt_encoder.mask_downscaling.6", m, d, &[1, 1], true, &mut rng)?;
        s.add("prompt_encoder.no_mask_embed.weight", nn::normal(&[1, d], 1.0, &mut rng))?;

        let t = "mask_decoder.transformer";
        let inner = d / c.attention_downsample_rate;
        for l in 0..c.decoder_depth {
            let b = format!("{t}.layers.{l}");
            add_attention(&mut s, &format!("{b}.self_attn"), d, d, &mut rng)?;
            nn::add_norm(&mut s, &format!("{b}.norm1"), d)?;
            add_attention(&mut s, &format!("{b}.cross_attn_token_to_image"), d, inner, &mut rng)?;
            nn::add_norm(&mut s, &format!("{b}.norm2"), d)?;
            nn::add_linear(&mut s, &format!("{b}.mlp.lin1"), d, c.decoder_mlp_dim, true, &mut rng)?;
            nn::add_linear(&mut s, &format!("{b}.mlp.lin2"), c.decoder_mlp_dim, d, true, &mut rng)?;
            nn::add_norm(&mut s, &format!("{b}.norm3"), d)?;
            nn::add_norm(&mut s, &format!("{b}.norm4"), d)?;
            add_attention(&mut s, &format!("{b}.cross_attn_image_to_token"), d, inner, &mut rng)?;
        }
        add_attention(&mut s, &format!("{t}.final_attn_token_to_image"), d, inner, &mut rng)?;
        nn::add_norm(&mut s, &format!("{t}.norm_final_attn"), d)?;
        s.add("mask_decoder.iou_token.weight", nn::normal(&[1, d], 1.0, &mut rng))?;
        s.add("mask_decoder.mask_tokens.weight", nn::normal(&[c.num_mask_tokens, d], 1.0, &mut rng))?;
        // transposed-conv weights are [in, out, kh, kw]
        for (idx, cin, cout) in [(0, d, d / 4), (3, d / 4, d / 8)] {
            let bound = (6.0 / (cout * 4) as f64).sqrt();
            s.add(format!("mask_decoder.output_upscaling.{idx}.weight"), nn::uniform(&[cin, cout, 2, 2], bound, &mut rng))?;
            s.add(format!("mask_decoder.output_upscaling.{idx}.bias"), Tensor::zeros(&[cout]))?;
            if idx == 0 {
                nn::add_norm(&mut s, "mask_decoder.output_upscaling.1", cout)?;
            }
        }
        for i in 0..c.num_mask_tokens {
            add_mlp(&mut s, &format!("mask_decoder.output_hypernetworks_mlps.{i}"), &[d, d, d, d / 8], &mut rng)?;
        }
        add_mlp(
            &mut s,
            "mask_decoder.iou_prediction_head",
            &[d, c.iou_head_hidden, c.iou_head_hidden, c.num_mask_tokens],
            &mut rng,
        )?;

        let mut model = Self { config, params: s, freeze: FreezePolicy::default() };
        model.set_freeze_policy(FreezePolicy::default());
        Ok(model)
    }

    /// Applies `policy` and returns the number of trainable scalars.
    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> usize {
        match policy {
            FreezePolicy::DecoderOnly => {
                self.params.set_all_trainable(false);
                self.params.set_trainable_prefix("mask_decoder.", true);
            }
            FreezePolicy::EndToEnd => self.params.set_all_trainable(true),
        }
        self.freeze = policy;
        self.params.num_scalars(true)
    }

    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.params.num_scalars(trainable_only)
    }

    /// Scalars in `image_encoder`, `prompt_encoder` and `mask_decoder`.
    pub fn component_counts(&self) -> [usize; 3] {
        ["image_encoder.", "prompt_encoder.", "mask_decoder."].map(|p| self.params.num_scalars_with_prefix(p))
    }

    fn p<'g>(&self, g: &'g Graph<T>, name: &str) -> Result<Var<'g, T>> {
        nn::param(g, &self.params, name)
    }

    /// Neck and patch embedding as `[N, 3, S, S]` -> `[N, D, G, G]`.
    pub fn encode<'g>(&self, g: &'g Graph<T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = &self.config;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::InvalidArgument(format!(
                "backbone input must be [N, 3, {s}, {s}], got {shape:?}",
                s = c.image_size
            )));
        }
        let (n, e, gsz, p) = (shape[0], c.embed_dim, c.grid(), c.patch_size);
        let patches = patchify(&images, p)?;
        let w = self.p(g, "image_encoder.patch_embed.proj.weight")?.reshape(&[e, 3 * p * p])?;
        let b = self.p(g, "image_encoder.patch_embed.proj.bias")?;
        let mut x = patches.linear(&w, Some(&b))?.reshape(&[n, gsz, gsz, e])?;
        x = x.add_broadcast(&self.p(g, "image_encoder.pos_embed")?)?;
        for i in 0..c.depth {
            x = self.encoder_block(g, i, x)?;
        }
        let d = c.prompt_dim;
        let x = x.permute(&[0, 3, 1, 2])?.reshape(&[n, e, 1, gsz, gsz])?;
        let w0 = self.p(g, "image_encoder.neck.0.weight")?.reshape(&[d, e, 1, 1, 1])?;
        let x = x.conv3d(&w0, None, [0, 0, 0])?.reshape(&[n, d, gsz, gsz])?;
        let x = nn::layer_norm_channels(g, &self.params, "image_encoder.neck.1", &x, ENCODER_LN_EPS)?;
        let w2 = self.p(g, "image_encoder.neck.2.weight")?.reshape(&[d, d, 1, 3, 3])?;
        let x = x.reshape(&[n, d, 1, gsz, gsz])?.conv3d(&w2, None, [0, 1, 1])?.reshape(&[n, d, gsz, gsz])?;
        nn::layer_norm_channels(g, &self.params, "image_encoder.neck.3", &x, ENCODER_LN_EPS)
    }

    fn encoder_block<'g>(&self, g: &'g Graph<T>, i: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = &self.config;
        let b = format!("image_encoder.blocks.{i}");
        let shape = x.shape();
        let (hh, ww) = (shape[1], shape[2]);
        let h = nn::layer_norm(g, &self.params, &format!("{b}.norm1"), &x, ENCODER_LN_EPS)?;
        let h = if c.global_attn_indexes.contains(&i) {
            self.encoder_attention(g, &b, h)?
        } else {
            let ws = c.window_size;
            let (windows, padded) = window_partition(&h, ws)?;
            let out = self.encoder_attention(g, &b, windows)?;
            window_unpartition(&out, ws, padded, (hh, ww))?
        };
        let x = x.add(&h)?;
        let m = nn::layer_norm(g, &self.params, &format!("{b}.norm2"), &x, ENCODER_LN_EPS)?;
        let m = nn::linear(g, &self.params, &format!("{b}.mlp.lin1"), &m)?.gelu();
        let m = nn::linear(g, &self.params, &format!("{b}.mlp.lin2"), &m)?;
        Ok(x.add(&m)?)
    }

    /// Multi-head self attention over `[B, H, W, C]` with decomposed
    /// relative position terms.
    fn encoder_attention<'g>(&self, g: &'g Graph<T>, b: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let (bn, hh, ww, e) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = self.config.num_heads;
        let hd = e / heads;
        let l = hh * ww;
        let qkv = nn::linear(g, &self.params, &format!("{b}.attn.qkv"), &x)?
            .reshape(&[bn, l, 3, heads, hd])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3, bn * heads, l, hd])?;
        let part = |k: usize| -> Result<Var<'g, T>> { Ok(qkv.narrow(0, k, 1)?.reshape(&[bn * heads, l, hd])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let attn = q.matmul_t(&k, false, true)?.scale(1.0 / (hd as f64).sqrt());
        let rh = self.p(g, &format!("{b}.attn.rel_pos_h"))?;
        let rw = self.p(g, &format!("{b}.attn.rel_pos_w"))?;
        let attn = add_decomposed_rel_pos(&attn, &q, &rh, &rw, (hh, ww))?.softmax_last()?;
        let out = attn
            .matmul(&v)?
            .reshape(&[bn, heads, hh, ww, hd])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[bn, hh, ww, e])?;
        nn::linear(g, &self.params, &format!("{b}.attn.proj"), &out)
    }

    /// Dense positional encoding of the embedding grid, `[G * G, D]`.
    pub fn image_pe(&self) -> Result<Tensor<T>> {
        let gm = self.params.buffer("prompt_encoder.pe_layer.positional_encoding_gaussian_matrix")?;
        let half = gm.dim(1);
        let gsz = self.config.grid();
        let mut out = Vec::with_capacity(gsz * gsz * 2 * half);
        for y in 0..gsz {
            for x in 0..gsz {
                let cx = 2.0 * (x as f64 + 0.5) / gsz as f64 - 1.0;
                let cy = 2.0 * (y as f64 + 0.5) / gsz as f64 - 1.0;
                let proj: Vec<f64> = (0..half)
                    .map(|j| 2.0 * PI * (cx * gm.data()[j].as_f64() + cy * gm.data()[half + j].as_f64()))
                    .collect();
                out.extend(proj.iter().map(|v| T::from_f64(v.sin())));
                out.extend(proj.iter().map(|v| T::from_f64(v.cos())));
            }
        }
        Ok(Tensor::new(&[gsz * gsz, 2 * half], out)?)
    }

    fn decoder_attention<'g>(
        &self,
        g: &'g Graph<T>,
        name: &str,
        q: &Var<'g, T>,
        k: &Var<'g, T>,
        v: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let heads = self.config.decoder_heads;
        let q = nn::linear(g, &self.params, &format!("{name}.q_proj"), q)?;
        let k = nn::linear(g, &self.params, &format!("{name}.k_proj"), k)?;
        let v = nn::linear(g, &self.params, &format!("{name}.v_proj"), v)?;
        let split = |x: &Var<'g, T>| -> Result<Var<'g, T>> {
            let s = x.shape();
            let ch = s[2] / heads;
            Ok(x.reshape(&[s[0], s[1], heads, ch])?.permute(&[0, 2, 1, 3])?.reshape(&[s[0] * heads, s[1], ch])?)
        };
        let (b, nq, inner) = {
            let s = q.shape();
            (s[0], s[1], s[2])
        };
        let ch = inner / heads;
        let (q, k, v) = (split(&q)?, split(&k)?, split(&v)?);
        let attn = q.matmul_t(&k, false, true)?.scale(1.0 / (ch as f64).sqrt()).softmax_last()?;
        let out = attn.matmul(&v)?.reshape(&[b, heads, nq, ch])?.permute(&[0, 2, 1, 3])?.reshape(&[b, nq, inner])?;
        nn::linear(g, &self.params, &format!("{name}.out_proj"), &out)
    }

    fn mlp<'g>(&self, g: &'g Graph<T>, name: &str, layers: usize, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let mut x = *x;
        for i in 0..layers {
            x = nn::linear(g, &self.params, &format!("{name}.layers.{i}"), &x)?;
            if i + 1 < layers {
                x = x.relu();
            }
        }
        Ok(x)
    }

    /// Low-resolution mask logits `[N, 1, 4G, 4G]` from image embeddings
    /// `[N, D, G, G]`, with no prompts.
    pub fn decode<'g>(&self, g: &'g Graph<T>, embeddings: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = &self.config;
        let s = embeddings.shape();
        let (n, d, gsz) = (s[0], s[1], s[2]);
        let hw = gsz * gsz;
        let dense = self.p(g, "prompt_encoder.no_mask_embed.weight")?.reshape(&[d])?;
        let src = embeddings.affine_channels(None, Some(&dense))?;
        let mut keys = src.reshape(&[n, d, hw])?.permute(&[0, 2, 1])?;
        let key_pe = g.constant(self.image_pe()?);

        let tokens = Var::concat(&[self.p(g, "mask_decoder.iou_token.weight")?, self.p(g, "mask_decoder.mask_tokens.weight")?], 0)?;
        let nt = 1 + c.num_mask_tokens;
        let query_pe = g.constant(Tensor::zeros(&[n, nt, d])).add_broadcast(&tokens)?;
        let mut queries = query_pe;

        let t = "mask_decoder.transformer";
        for l in 0..c.decoder_depth {
            let b = format!("{t}.layers.{l}");
            if l == 0 {
                queries = self.decoder_attention(g, &format!("{b}.self_attn"), &queries, &queries, &queries)?;
            } else {
                let q = queries.add(&query_pe)?;
                let a = self.decoder_attention(g, &format!("{b}.self_attn"), &q, &q, &queries)?;
                queries = queries.add(&a)?;
            }
            queries = nn::layer_norm(g, &self.params, &format!("{b}.norm1"), &queries, DECODER_LN_EPS)?;
            let q = queries.add(&query_pe)?;
            let k = keys.add_broadcast(&key_pe)?;
            let a = self.decoder_attention(g, &format!("{b}.cross_attn_token_to_image"), &q, &k, &keys)?;
            queries = nn::layer_norm(g, &self.params, &format!("{b}.norm2"), &queries.add(&a)?, DECODER_LN_EPS)?;
            let m = nn::linear(g, &self.params, &format!("{b}.mlp.lin1"), &queries)?.relu();
            let m = nn::linear(g, &self.params, &format!("{b}.mlp.lin2"), &m)?;
            queries = nn::layer_norm(g, &self.params, &format!("{b}.norm3"), &queries.add(&m)?, DECODER_LN_EPS)?;
            let q = queries.add(&query_pe)?;
            let k = keys.add_broadcast(&key_pe)?;
            let a = self.decoder_attention(g, &format!("{b}.cross_attn_image_to_token"), &k, &q, &queries)?;
            keys = nn::layer_norm(g, &self.params, &format!("{b}.norm4"), &keys.add(&a)?, DECODER_LN_EPS)?;
        }
        let q = queries.add(&query_pe)?;
        let k = keys.add_broadcast(&key_pe)?;
        let a = self.decoder_attention(g, &format!("{t}.final_attn_token_to_image"), &q, &k, &keys)?;
        queries = nn::layer_norm(g, &self.params, &format!("{t}.norm_final_attn"), &queries.add(&a)?, DECODER_LN_EPS)?;

        // upscaling x4 through two stride-2 transposed convolutions
        let src = keys.permute(&[0, 2, 1])?.reshape(&[n, d, 1, gsz, gsz])?;
        let up = "mask_decoder.output_upscaling";
        let w0 = self.p(g, &format!("{up}.0.weight"))?.reshape(&[d, d / 4, 1, 2, 2])?;
        let x = src.conv_transpose3d(&w0, Some(&self.p(g, &format!("{up}.0.bias"))?))?;
        let x = x.reshape(&[n, d / 4, 2 * gsz, 2 * gsz])?;
        let x = nn::layer_norm_channels(g, &self.params, &format!("{up}.1"), &x, ENCODER_LN_EPS)?.gelu();
        let w3 = self.p(g, &format!("{up}.3.weight"))?.reshape(&[d / 4, d / 8, 1, 2, 2])?;
        let x = x.reshape(&[n, d / 4, 1, 2 * gsz, 2 * gsz])?;
        let upscaled = x.conv_transpose3d(&w3, Some(&self.p(g, &format!("{up}.3.bias"))?))?.gelu();
        let side = 4 * gsz;
        let upscaled = upscaled.reshape(&[n, d / 8, side * side])?;

        // only the first mask token is decoded
        let token = queries.narrow(1, 1, 1)?;
        let hyper = self.mlp(g, "mask_decoder.output_hypernetworks_mlps.0", 3, &token)?;
        Ok(hyper.matmul(&upscaled)?.reshape(&[n, 1, side, side])?)
    }

    /// Low-resolution logits for normalized images `[N, 3, S, S]`.
    pub fn forward_2d<'g>(&self, g: &'g Graph<T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let emb = self.encode(g, images)?;
        self.decode(g, emb)
    }

    /// Logits resized to the input grid, `[N, 1, S, S]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = self.config.image_size;
        Ok(self.forward_2d(g, images)?.resize_bilinear(s, s)?)
    }
}

impl PromptlessViT<f32> {
    /// Copies weights from a safetensors file that uses the original
    /// checkpoint names. Keys outside this model are ignored; every model
    /// parameter and buffer must be present. Returns the number of tensors
    /// assigned.
    pub fn load_pretrained(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let bytes = fs::read(path).at(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut names: Vec<String> = self.params.iter().map(|(_, p)| p.name.clone()).collect();
        names.extend(self.params.buffers().map(|(n, _)| n.to_string()));
        for name in &names {
            let view = st
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("{} lacks `{name}`", path.display())))?;
            self.params.assign(name, tensor_from_view(name, &view)?)?;
        }
        Ok(names.len())
    }

    /// Segments every slice along `axis` and restacks the masks.
    pub fn predict_volume(&self, volume: &Volume, axis: usize, batch: usize) -> Result<BinaryMask> {
        let size = self.config.image_size;
        let slices = extract_slices(volume, axis)?;
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(batch.max(1)) {
            let images: Vec<Image2D> = chunk.iter().map(|s| prepare_backbone_input(s, size)).collect::<Result<_>>()?;
            let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
            for img in &images {
                data.extend(normalize_image(img));
            }
            let g = Graph::inference();
            let x = g.constant(Tensor::new(&[chunk.len(), 3, size, size], data)?);
            let probs = self.forward(&g, x)?.sigmoid().value();
            for (i, (img, s)) in images.iter().zip(chunk).enumerate() {
                let plane = &probs.data()[i * size * size..(i + 1) * size * size];
                let mut m = restore_slice_mask(plane, &img.meta)?;
                m.spacing = s.spacing;
                m.index = s.index;
                out.push(m);
            }
        }
        stack_slices(&out, volume.geometry(), axis)
    }
}

impl Segmenter for PromptlessViT<f32> {
    fn kind(&self) -> &'static str {
        "promptless-vit"
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn logits<'g>(&self, g: &'g Graph<f32>, input: Var<'g, f32>, _ctx: &mut ForwardCtx) -> Result<Var<'g, f32>> {
        self.forward(g, input)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "backbone": self.config, "freeze": self.freeze })
    }
}

/// Maps `[0, 1]` intensities to the backbone's 0-255 channel statistics
/// inside the scaled region; the zero padding is left at zero.
pub fn normalize_image(img: &Image2D) -> Vec<f32> {
    let n = img.size();
    let [sr, sc] = img.meta.scaled;
    let mut out = vec![0f32; 3 * n * n];
    for ch in 0..3 {
        for r in 0..sr {
            for c in 0..sc {
                let i = (ch * n + r) * n + c;
                out[i] = (img.data[i] * 255.0 - PIXEL_MEAN[ch]) / PIXEL_STD[ch];
            }
        }
    }
    out
}

/// Places a mask slice on the backbone grid the same way
/// [`prepare_backbone_input`] places the image.
pub fn prepare_backbone_mask(slice: &Slice2D<u8>, meta: &BackboneMeta) -> Result<Vec<f32>> {
    if [slice.rows, slice.cols] != meta.original {
        return Err(Error::InvalidArgument(format!(
            "mask slice {}x{} does not match {:?}",
            slice.rows, slice.cols, meta.original
        )));
    }
    let src: Vec<f64> = slice.data.iter().map(|&v| v as f64).collect();
    let up = menisc_autograd::ops::resize_plane(&src, slice.rows, slice.cols, meta.scaled[0], meta.scaled[1]);
    let n = meta.size;
    let mut out = vec![0f32; n * n];
    for r in 0..meta.scaled[0] {
        for c in 0..meta.scaled[1] {
            out[r * n + c] = (up[r * meta.scaled[1] + c] >= 0.5) as u8 as f32;
        }
    }
    Ok(out)
}

/// Slice-wise training pairs along `axis`.
pub fn backbone_samples(volume: &Volume, mask: &BinaryMask, axis: usize, size: usize) -> Result<Vec<Sample>> {
    volume.geometry().ensure_same(mask.geometry())?;
    let images = extract_slices(volume, axis)?;
    let masks = extract_mask_slices(mask, axis)?;
    images
        .iter()
        .zip(&masks)
        .map(|(s, m)| {
            let img = prepare_backbone_input(s, size)?;
            let target = prepare_backbone_mask(m, &img.meta)?;
            Ok(Sample {
                input: Tensor::new(&[3, size, size], normalize_image(&img))?,
                target: Tensor::new(&[1, size, size], target)?,
            })
        })
        .collect()
}

/// Non-overlapping `p x p` patches of `[N, C, S, S]` as
/// `[N, (S/p)^2, C p p]`, each patch flattened channel-major.
fn patchify<'g, T: Scalar>(x: &Var<'g, T>, p: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(n * ch * h * w);
    for b in 0..n {
        for i in 0..gh {
            for j in 0..gw {
                for c in 0..ch {
                    for ky in 0..p {
                        for kx in 0..p {
                            index.push(((b * ch + c) * h + i * p + ky) * w + j * p + kx);
                        }
                    }
                }
            }
        }
    }
    Ok(x.gather(Arc::new(index), &[n, gh * gw, ch * p * p])?)
}

/// `[B, H, W, C]` -> `[B * nh * nw, ws, ws, C]`, zero-padding H and W up
/// to multiples of `ws`. Also returns the padded extents.
fn window_partition<'g, T: Scalar>(x: &Var<'g, T>, ws: usize) -> Result<(Var<'g, T>, (usize, usize))> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let x = x.pad_axis(1, 0, hp - h)?.pad_axis(2, 0, wp - w)?;
    let (nh, nw) = (hp / ws, wp / ws);
    let out = x
        .reshape(&[b, nh, ws, nw, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nh * nw, ws, ws, c])?;
    Ok((out, (hp, wp)))
}

fn window_unpartition<'g, T: Scalar>(
    x: &Var<'g, T>,
    ws: usize,
    (hp, wp): (usize, usize),
    (h, w): (usize, usize),
) -> Result<Var<'g, T>> {
    let c = x.shape()[3];
    let (nh, nw) = (hp / ws, wp / ws);
    let b = x.shape()[0] / (nh * nw);
    let mut out = x
        .reshape(&[b, nh, nw, ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, hp, wp, c])?;
    if hp != h {
        out = out.narrow(1, 0, h)?;
    }
    if wp != w {
        out = out.narrow(2, 0, w)?;
    }
    Ok(out)
}

/// `attn [B, HW, HW] + rel_h + rel_w` where for query `(i, j)` and key
/// `(k, l)` the added terms are `q_ij . Rh[i - k + H - 1]` and
/// `q_ij . Rw[j - l + W - 1]`. `q` is `[B, HW, d]`, `rel_h` is
/// `[2H - 1, d]` and `rel_w` is `[2W - 1, d]`.
pub fn add_decomposed_rel_pos<'g, T: Scalar>(
    attn: &Var<'g, T>,
    q: &Var<'g, T>,
    rel_h: &Var<'g, T>,
    rel_w: &Var<'g, T>,
    (h, w): (usize, usize),
) -> Result<Var<'g, T>> {
    let (av, qv, rhv, rwv) = (attn.value(), q.value(), rel_h.value(), rel_w.value());
    let l = h * w;
    let (&[b, q1, k1], &[b2, q2, d]) = (av.shape(), qv.shape()) else {
        return Err(Error::InvalidArgument(format!("rel-pos on attn {:?} and q {:?}", av.shape(), qv.shape())));
    };
    if q1 != l || k1 != l || b2 != b || q2 != l || rhv.shape() != [2 * h - 1, d] || rwv.shape() != [2 * w - 1, d] {
        return Err(Error::InvalidArgument(format!(
            "rel-pos shapes attn {:?}, q {:?}, rel_h {:?}, rel_w {:?} for a {h}x{w} grid",
            av.shape(),
            qv.shape(),
            rhv.shape(),
            rwv.shape()
        )));
    }
    let dot = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| x * y).sum() };
    let mut out = av.as_ref().clone();
    {
        let o = out.data_mut();
        let (qd, rh, rw) = (qv.data(), rhv.data(), rwv.data());
        let mut th = vec![T::zero(); h];
        let mut tw = vec![T::zero(); w];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let qi = i * w + j;
                    let qrow = &qd[(bi * l + qi) * d..(bi * l + qi + 1) * d];
                    for (k, t) in th.iter_mut().enumerate() {
                        let r = i + h - 1 - k;
                        *t = dot(qrow, &rh[r * d..(r + 1) * d]);
                    }
                    for (m, t) in tw.iter_mut().enumerate() {
                        let r = j + w - 1 - m;
                        *t = dot(qrow, &rw[r * d..(r + 1) * d]);
                    }
                    let row = &mut o[(bi * l + qi) * l..(bi * l + qi + 1) * l];
                    for k in 0..h {
                        for m in 0..w {
                            row[k * w + m] += th[k] + tw[m];
                        }
                    }
                }
            }
        }
    }
    Ok(attn.graph().record(out, &[*attn, *q, *rel_h, *rel_w], move |g, needs| {
        let gd = g.data();
        let (qd, rh, rw) = (qv.data(), rhv.data(), rwv.data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut drh = vec![T::zero(); rh.len()];
        let mut drw = vec![T::zero(); rw.len()];
        let mut gh = vec![T::zero(); h];
        let mut gw = vec![T::zero(); w];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let qi = i * w + j;
                    let row = &gd[(bi * l + qi) * l..(bi * l + qi + 1) * l];
                    gh.iter_mut().for_each(|v| *v = T::zero());
                    gw.iter_mut().for_each(|v| *v = T::zero());
                    for k in 0..h {
                        for m in 0..w {
                            let v = row[k * w + m];
                            gh[k] += v;
                            gw[m] += v;
                        }
                    }
                    let base = (bi * l + qi) * d;
                    for (k, &gk) in gh.iter().enumerate() {
                        let r = (i + h - 1 - k) * d;
                        for c in 0..d {
                            dq[base + c] += gk * rh[r + c];
                            drh[r + c] += gk * qd[base + c];
                        }
                    }
                    for (m, &gm) in gw.iter().enumerate() {
                        let r = (j + w - 1 - m) * d;
                        for c in 0..d {
                            dq[base + c] += gm * rw[r + c];
                            drw[r + c] += gm * qd[base + c];
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| Tensor::new(qv.shape(), dq).unwrap()),
            needs[2].then(|| Tensor::new(rhv.shape(), drh).unwrap()),
            needs[3].then(|| Tensor::new(rwv.shape(), drw).unwrap()),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_mask_output_is_rejected() {
        let cfg = PromptlessViTConfig { output_masks: 3, ..PromptlessViTConfig::toy() };
        assert!(matches!(PromptlessViT::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn window_roundtrip_with_padding() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 5, 7, 3], |i| i as f64));
        let (win, padded) = window_partition(&x, 4).unwrap();
        assert_eq!(padded, (8, 8));
        assert_eq!(win.shape(), vec![8, 4, 4, 3]);
        let back = window_unpartition(&win, 4, padded, (5, 7)).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn toy_forward_shapes() {
        let m = PromptlessViT::<f32>::new(PromptlessViTConfig::toy(), 1).unwrap();
        let g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 3, 128, 128]));
        assert_eq!(m.forward_2d(&g, x).unwrap().shape(), vec![1, 1, 32, 32]);
        assert!(m.forward(&g, x).unwrap().value().is_finite());
    }

    #[test]
    fn normalization_leaves_padding_zero() {
        let slice = Slice2D { rows: 2, cols: 4, data: vec![1.0; 8], spacing: [1.0; 2], index: 0 };
        let img = prepare_backbone_input(&slice, 8).unwrap();
        let n = normalize_image(&img);
        assert_eq!(img.meta.scaled, [4, 8]);
        assert!((n[0] - (255.0 - PIXEL_MEAN[0]) / PIXEL_STD[0]).abs() < 1e-5);
        assert_eq!(n[4 * 8], 0.0);
    }
}

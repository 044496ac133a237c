//! Volumetric U-Net.
//!
//! Each level is a block of `convs_per_block` 3x3x3 convolutions, each
//! followed by normalization and ReLU. Levels are joined by 2x2x2 max
//! pooling on the way down and by 2x upsampling on the way up, where the
//! encoder output of the same level is concatenated before the decoder
//! block. A final 1x1x1 convolution produces the logits. Features start at
//! `base_features` and double per level down to the bottleneck.

use std::sync::Arc;

use menisc_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ForwardCtx};
use crate::training::Sample;
use crate::volume::{BinaryMask, Volume};

/// Trainable parameter count reported for the reference 3D U-Net.
pub const REFERENCE_UNET_PARAMS: usize = 2_041_825;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    #[default]
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleKind {
    /// 2x2x2 transposed convolution with stride 2.
    #[default]
    TransposedConv,
    /// Nearest-neighbour doubling followed by a 1x1x1 convolution.
    NearestConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet3DConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_features: usize,
    /// Number of pooling steps; the bottleneck sits below the last one.
    pub depth: usize,
    pub convs_per_block: usize,
    pub normalization: NormKind,
    pub upsampling: UpsampleKind,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_features: 16,
            depth: 3,
            convs_per_block: 2,
            normalization: NormKind::Instance,
            upsampling: UpsampleKind::TransposedConv,
        }
    }
}

impl UNet3DConfig {
    /// Small network used by the desk-scale phantom experiments. It skips
    /// normalization: with only a handful of optimiser steps per epoch,
    /// normalized features keep the logits too timid to fit quickly.
    pub fn toy() -> Self {
        Self { base_features: 8, normalization: NormKind::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.base_features == 0
            || self.depth == 0
            || self.convs_per_block == 0
        {
            return Err(Error::Config(format!("U-Net sizes must all be at least 1: {self:?}")));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("U-Net depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Spatial extents must be multiples of this inside the network.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

pub struct UNet3D<T: Scalar = f32> {
    pub config: UNet3DConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> UNet3D<T> {
    pub fn new(config: UNet3DConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut add_block = |store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize| -> Result<()> {
            for j in 0..c.convs_per_block {
                let inp = if j == 0 { cin } else { cout };
                nn::add_conv(store, &format!("{name}.conv{j}"), inp, cout, &[3, 3, 3], true, &mut rng)?;
                let norm = format!("{name}.norm{j}");
                match c.normalization {
                    NormKind::None => {}
                    NormKind::Instance => nn::add_norm(store, &norm, cout)?,
                    NormKind::Batch => {
                        nn::add_norm(store, &norm, cout)?;
                        store.add_buffer(format!("{norm}.running_mean"), Tensor::zeros(&[cout]))?;
                        store.add_buffer(format!("{norm}.running_var"), Tensor::full(&[cout], T::one()))?;
                    }
                }
            }
            Ok(())
        };
        for l in 0..c.depth {
            let cin = if l == 0 { c.in_channels } else { c.features(l - 1) };
            add_block(&mut store, &format!("enc{l}"), cin, c.features(l))?;
        }
        add_block(&mut store, "bottleneck", c.features(c.depth - 1), c.features(c.depth))?;
        for l in (0..c.depth).rev() {
            add_block(&mut store, &format!("dec{l}"), 2 * c.features(l), c.features(l))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for l in 0..c.depth {
            let (cin, cout) = (c.features(l + 1), c.features(l));
            match c.upsampling {
                UpsampleKind::TransposedConv => {
                    // transposed-conv weights are [in, out, k...]
                    let bound = (6.0 / (cout * 8) as f64).sqrt();
                    store.add(format!("up{l}.weight"), nn::uniform(&[cin, cout, 2, 2, 2], bound, &mut rng))?;
                    store.add(format!("up{l}.bias"), Tensor::zeros(&[cout]))?;
                }
                UpsampleKind::NearestConv => {
                    nn::add_conv(&mut store, &format!("up{l}"), cin, cout, &[1, 1, 1], true, &mut rng)?;
                }
            }
        }
        nn::add_conv(&mut store, "head", c.features(0), c.out_channels, &[1, 1, 1], true, &mut rng)?;
        Ok(Self { config, params: store })
    }

    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.params.num_scalars(trainable_only)
    }

    fn block<'g>(&self, g: &'g Graph<T>, name: &str, mut x: Var<'g, T>, ctx: &mut ForwardCtx) -> Result<Var<'g, T>> {
        for j in 0..self.config.convs_per_block {
            x = nn::conv3d(g, &self.params, &format!("{name}.conv{j}"), &x, [1, 1, 1])?;
            let norm = format!("{name}.norm{j}");
            x = match self.config.normalization {
                NormKind::None => x,
                NormKind::Instance => {
                    let s = x.shape();
                    let (n, c, spatial) = (s[0], s[1], s[2..].iter().product::<usize>());
                    let w = nn::param(g, &self.params, &format!("{norm}.weight"))?;
                    let b = nn::param(g, &self.params, &format!("{norm}.bias"))?;
                    x.normalize(n * c, spatial, 1, menisc_autograd::ops::NormGroups::AcrossMid, NORM_EPS)?
                        .affine_channels(Some(&w), Some(&b))?
                }
                NormKind::Batch => nn::batch_norm(g, &self.params, &norm, &x, NORM_EPS, ctx)?,
            };
            x = x.relu();
        }
        Ok(x)
    }

    fn upsample<'g>(&self, g: &'g Graph<T>, level: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let name = format!("up{level}");
        match self.config.upsampling {
            UpsampleKind::TransposedConv => {
                let w = nn::param(g, &self.params, &format!("{name}.weight"))?;
                let b = nn::param(g, &self.params, &format!("{name}.bias"))?;
                Ok(x.conv_transpose3d(&w, Some(&b))?)
            }
            UpsampleKind::NearestConv => {
                let up = nearest_double(&x)?;
                nn::conv3d(g, &self.params, &name, &up, [0, 0, 0])
            }
        }
    }

    /// Logits `[N, out, X, Y, Z]` for input `[N, in, X, Y, Z]`. Extents that
    /// are not multiples of `2^depth` are zero-padded symmetrically inside
    /// the network and cropped again on output.
    pub fn forward<'g>(&self, g: &'g Graph<T>, input: Var<'g, T>, ctx: &mut ForwardCtx) -> Result<Var<'g, T>> {
        let shape = input.shape();
        if shape.len() != 5 || shape[1] != self.config.in_channels || shape[2..].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "U-Net input must be [N, {}, X, Y, Z], got {shape:?}",
                self.config.in_channels
            )));
        }
        let div = self.config.divisor();
        let mut x = input;
        let mut pads = [(0, 0); 3];
        for a in 0..3 {
            let extent = shape[2 + a];
            let total = extent.div_ceil(div) * div - extent;
            pads[a] = (total / 2, total - total / 2);
            x = x.pad_axis(2 + a, pads[a].0, pads[a].1)?;
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            x = self.block(g, &format!("enc{l}"), x, ctx)?;
            skips.push(x);
            x = x.max_pool3d([2, 2, 2])?;
        }
        x = self.block(g, "bottleneck", x, ctx)?;
        for l in (0..self.config.depth).rev() {
            let up = self.upsample(g, l, x)?;
            x = Var::concat(&[skips[l], up], 1)?;
            x = self.block(g, &format!("dec{l}"), x, ctx)?;
        }
        x = nn::conv3d(g, &self.params, "head", &x, [0, 0, 0])?;
        for a in 0..3 {
            if pads[a] != (0, 0) {
                x = x.narrow(2 + a, pads[a].0, shape[2 + a])?;
            }
        }
        Ok(x)
    }
}

impl UNet3D<f32> {
    /// Thresholded prediction (logit `>= 0`) for a single-channel volume.
    pub fn predict_volume(&self, volume: &Volume) -> Result<BinaryMask> {
        let [x, y, z] = volume.shape();
        let g = Graph::inference();
        let input = g.constant(Tensor::new(&[1, 1, x, y, z], volume.data().to_vec())?);
        let logits = self.forward(&g, input, &mut ForwardCtx::eval())?.value();
        BinaryMask::new(volume.geometry().clone(), logits.data().iter().map(|&l| (l >= 0.0) as u8).collect())
    }
}

/// Whole-volume training example: `input [1, X, Y, Z]`, `target [1, X, Y, Z]`.
pub fn volume_sample(volume: &Volume, mask: &BinaryMask) -> Result<Sample> {
    volume.geometry().ensure_same(mask.geometry())?;
    let [x, y, z] = volume.shape();
    Ok(Sample {
        input: Tensor::new(&[1, x, y, z], volume.data().to_vec())?,
        target: Tensor::new(&[1, x, y, z], mask.to_f32())?,
    })
}

impl crate::training::Segmenter for UNet3D<f32> {
    fn kind(&self) -> &'static str {
        "unet3d"
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn logits<'g>(&self, g: &'g Graph<f32>, input: Var<'g, f32>, ctx: &mut ForwardCtx) -> Result<Var<'g, f32>> {
        self.forward(g, input, ctx)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).unwrap_or_default()
    }
}

/// Doubles every spatial extent of `[N, C, X, Y, Z]` by repetition.
fn nearest_double<'g, T: Scalar>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (nc, d0, d1, d2) = (s[0] * s[1], s[2], s[3], s[4]);
    let out_shape = [s[0], s[1], 2 * d0, 2 * d1, 2 * d2];
    let mut index = Vec::with_capacity(nc * 8 * d0 * d1 * d2);
    for p in 0..nc {
        for a in 0..2 * d0 {
            for b in 0..2 * d1 {
                for c in 0..2 * d2 {
                    index.push(((p * d0 + a / 2) * d1 + b / 2) * d2 + c / 2);
                }
            }
        }
    }
    Ok(x.gather(Arc::new(index), &out_shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            UNet3DConfig { base_features: 0, ..Default::default() },
            UNet3DConfig { depth: 0, ..Default::default() },
            UNet3DConfig { convs_per_block: 0, ..Default::default() },
        ] {
            assert!(UNet3D::<f32>::new(c, 0).is_err());
        }
    }

    #[test]
    fn freezing_everything_leaves_nothing_trainable() {
        let mut m = UNet3D::<f32>::new(UNet3DConfig::toy(), 0).unwrap();
        assert!(m.parameter_count(true) > 0);
        m.params.set_all_trainable(false);
        assert_eq!(m.parameter_count(true), 0);
    }

    #[test]
    fn nearest_upsampling_repeats() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 1, 1, 2], |i| i as f32));
        let y = nearest_double(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2, 4]);
        assert_eq!(&y.value().data()[..4], &[0.0, 0.0, 1.0, 1.0]);
    }
}

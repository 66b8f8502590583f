//! Toy convolutional backbone: stride-2 conv blocks with instance
//! normalization and ReLU, then a 3x3 neck conv to the model dimension.
//! Produces an (h*w, d) feature map per image.

use crate::config::BackboneConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    in_gamma: ParamId,
    in_beta: ParamId,
    out_channels: usize,
}

pub struct ConvBackbone {
    blocks: Vec<ConvBlock>,
    neck_weight: ParamId,
    neck_bias: ParamId,
    pub out_dim: usize,
    pub stride: usize,
}

impl ConvBackbone {
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 3usize;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = cin * 9;
            blocks.push(ConvBlock {
                weight: store.add(
                    format!("backbone.block{i}.conv.weight"),
                    Tensor::uniform_fan_in(vec![cout, cin, 3, 3], fan_in, rng),
                )?,
                bias: store.add(
                    format!("backbone.block{i}.conv.bias"),
                    Tensor::uniform_fan_in(vec![cout], fan_in, rng),
                )?,
                in_gamma: store.add(
                    format!("backbone.block{i}.in.gamma"),
                    Tensor::full(vec![cout], 1.0),
                )?,
                in_beta: store.add(
                    format!("backbone.block{i}.in.beta"),
                    Tensor::zeros(vec![cout]),
                )?,
                out_channels: cout,
            });
            cin = cout;
        }
        let fan_in = cin * 9;
        let neck_weight = store.add(
            "backbone.neck.weight",
            Tensor::uniform_fan_in(vec![out_dim, cin, 3, 3], fan_in, rng),
        )?;
        let neck_bias = store.add(
            "backbone.neck.bias",
            Tensor::uniform_fan_in(vec![out_dim], fan_in, rng),
        )?;
        Ok(ConvBackbone {
            blocks,
            neck_weight,
            neck_bias,
            out_dim,
            stride: cfg.stride(),
        })
    }

    /// Feature map of shape (h*w, out_dim) with h = height/stride,
    /// w = width/stride. Differentiable end to end.
    pub fn extract(&self, tape: &mut Tape, store: &ParamStore, img: &Image) -> Result<Var> {
        if img.height % self.stride != 0 || img.width % self.stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by backbone stride {}",
                img.height, img.width, self.stride
            )));
        }
        let input = Tensor::from_vec(vec![3, img.height, img.width], img.data.clone())?;
        let mut x = tape.constant(&input);
        let (mut h, mut w) = (img.height, img.width);
        for block in &self.blocks {
            let kw = tape.param(store, block.weight);
            let kb = tape.param(store, block.bias);
            x = tape.conv2d(x, kw, kb, 2)?;
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
            // Instance normalization: per-channel stats over spatial
            // positions, per-channel affine.
            let flat = tape.reshape(x, vec![block.out_channels, h * w])?;
            let normed = tape.layer_norm(flat, None, None)?;
            let gamma = tape.param(store, block.in_gamma);
            let beta = tape.param(store, block.in_beta);
            let affined = tape.row_scale_shift(normed, gamma, beta)?;
            let activated = tape.relu(affined)?;
            x = tape.reshape(activated, vec![block.out_channels, h, w])?;
        }
        let kw = tape.param(store, self.neck_weight);
        let kb = tape.param(store, self.neck_bias);
        let neck = tape.conv2d(x, kw, kb, 1)?;
        let flat = tape.reshape(neck, vec![self.out_dim, h * w])?;
        tape.transpose(flat)
    }
}

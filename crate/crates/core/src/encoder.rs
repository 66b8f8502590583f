//! Standard post-norm Transformer encoder stack without positional
//! encoding (a learnable position embedding is available behind the
//! `pos_embed` ablation flag).

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// softmax(Q K^T / sqrt(d_k)) V.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = *tape
        .shape(q)
        .last()
        .ok_or_else(|| Error::Config("attention on empty shape".into()))?;
    if tape.shape(k).last() != Some(&dk) {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let attn = tape.softmax(scaled, 1)?;
    tape.matmul(attn, v)
}

/// Projection weights of one multi-head attention block. Heads are column
/// slices of the d x d projections.
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl MhaParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        shared_qk: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wq = store.add(format!("{prefix}.wq"), Tensor::uniform_fan_in(vec![d, d], d, rng))?;
        let wk = if shared_qk {
            wq
        } else {
            store.add(format!("{prefix}.wk"), Tensor::uniform_fan_in(vec![d, d], d, rng))?
        };
        let wv = store.add(format!("{prefix}.wv"), Tensor::uniform_fan_in(vec![d, d], d, rng))?;
        let wo = store.add(format!("{prefix}.wo"), Tensor::uniform_fan_in(vec![d, d], d, rng))?;
        Ok(MhaParams {
            wq,
            wk,
            wv,
            wo,
            heads,
            d,
        })
    }
}

/// Concat(head_1 .. head_H) W^O where head_i attends over column slices of
/// the shared projections.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    params: &MhaParams,
) -> Result<Var> {
    if params.d % params.heads != 0 {
        return Err(Error::Config(format!(
            "d = {} not divisible by heads = {}",
            params.d, params.heads
        )));
    }
    let dk = params.d / params.heads;
    let wq = tape.param(store, params.wq);
    let wk = tape.param(store, params.wk);
    let wv = tape.param(store, params.wv);
    let q = tape.matmul(x_q, wq)?;
    let k = tape.matmul(x_k, wk)?;
    let v = tape.matmul(x_v, wv)?;
    let mut head_t = Vec::with_capacity(params.heads);
    for hi in 0..params.heads {
        let (s, e) = (hi * dk, (hi + 1) * dk);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let out = scaled_dot_attention(tape, qh, kh, vh)?;
        head_t.push(tape.transpose(out)?);
    }
    let stacked = tape.concat_rows(&head_t)?;
    let concat = tape.transpose(stacked)?;
    let wo = tape.param(store, params.wo);
    tape.matmul(concat, wo)
}

struct EncoderLayer {
    attn: MhaParams,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Self-attention encoder stack applied independently to each feature map.
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    pos_embed: Option<ParamId>,
    final_norm: Option<(ParamId, ParamId)>,
    pub d: usize,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        d: usize,
        dim_ff: usize,
        heads: usize,
        seq_len: usize,
        pos_embed: bool,
        extra_final_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("{prefix}.{i}");
            layers.push(EncoderLayer {
                attn: MhaParams::new(store, &format!("{p}.attn"), d, heads, false, rng)?,
                ff1_w: store.add(format!("{p}.ff1.weight"), Tensor::uniform_fan_in(vec![d, dim_ff], d, rng))?,
                ff1_b: store.add(format!("{p}.ff1.bias"), Tensor::zeros(vec![dim_ff]))?,
                ff2_w: store.add(format!("{p}.ff2.weight"), Tensor::uniform_fan_in(vec![dim_ff, d], dim_ff, rng))?,
                ff2_b: store.add(format!("{p}.ff2.bias"), Tensor::zeros(vec![d]))?,
                ln1_g: store.add(format!("{p}.ln1.gamma"), Tensor::full(vec![d], 1.0))?,
                ln1_b: store.add(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]))?,
                ln2_g: store.add(format!("{p}.ln2.gamma"), Tensor::full(vec![d], 1.0))?,
                ln2_b: store.add(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]))?,
            });
        }
        let pos_embed = if pos_embed {
            Some(store.add(
                format!("{prefix}.pos_embed"),
                Tensor::uniform_fan_in(vec![seq_len, d], d, rng),
            )?)
        } else {
            None
        };
        let final_norm = if extra_final_norm {
            Some((
                store.add(format!("{prefix}.final.gamma"), Tensor::full(vec![d], 1.0))?,
                store.add(format!("{prefix}.final.beta"), Tensor::zeros(vec![d]))?,
            ))
        } else {
            None
        };
        Ok(EncoderStack {
            layers,
            pos_embed,
            final_norm,
            d,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Run the full stack: x -> layer 0 -> .. -> layer N-1.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let outputs = self.forward_all(tape, store, x)?;
        Ok(*outputs.last().unwrap())
    }

    /// Outputs after each layer (element 0 is the input, possibly with the
    /// position embedding added). Length = n_layers + 1.
    pub fn forward_all(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![0, self.d],
            });
        }
        let mut cur = x;
        if let Some(pe) = self.pos_embed {
            let embed = tape.param(store, pe);
            cur = tape.add(cur, embed)?;
        }
        let mut outputs = vec![cur];
        for layer in &self.layers {
            let attn = multi_head_attention(tape, store, cur, cur, cur, &layer.attn)?;
            let res = tape.add(cur, attn)?;
            let g1 = tape.param(store, layer.ln1_g);
            let b1 = tape.param(store, layer.ln1_b);
            let normed = tape.layer_norm(res, Some(g1), Some(b1))?;

            let w1 = tape.param(store, layer.ff1_w);
            let b1v = tape.param(store, layer.ff1_b);
            let h1 = tape.matmul(normed, w1)?;
            let h1 = tape.add_row_vec(h1, b1v)?;
            let h1 = tape.relu(h1)?;
            let w2 = tape.param(store, layer.ff2_w);
            let b2v = tape.param(store, layer.ff2_b);
            let h2 = tape.matmul(h1, w2)?;
            let h2 = tape.add_row_vec(h2, b2v)?;
            let res2 = tape.add(normed, h2)?;
            let g2 = tape.param(store, layer.ln2_g);
            let b2 = tape.param(store, layer.ln2_b);
            cur = tape.layer_norm(res2, Some(g2), Some(b2))?;
            outputs.push(cur);
        }
        if let Some((g, b)) = self.final_norm {
            let g = tape.param(store, g);
            let b = tape.param(store, b);
            let normed = tape.layer_norm(cur, Some(g), Some(b))?;
            *outputs.last_mut().unwrap() = normed;
        }
        Ok(outputs)
    }
}

//! Comparison architectures behind one scorer interface: concatenated-pair
//! encoding, encoder-decoder cross attention, and a plain embedding with
//! cosine scoring.

use crate::backbone::ConvBackbone;
use crate::config::{ModelConfig, Variant};
use crate::data::Image;
use crate::encoder::{multi_head_attention, EncoderStack, MhaParams};
use crate::error::{Error, Result};
use crate::matcher::TransMatcher;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Common surface the trainer, evaluator, and CLI program against. Train
/// scoring stays on the caller's tape; eval scoring manages its own tapes.
pub trait Scorer {
    fn config(&self) -> &ModelConfig;

    /// Logits for every ordered (query, gallery) pair of the batch, shape
    /// (B*B, 1), row-major over (query, gallery). Train mode.
    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var>;

    /// Eval-mode query x gallery score grid.
    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>>;

    /// Mean-pooled, L2-normalized embedding used by the class-graph sampler.
    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>>;
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Mean-pool the rows of an (s, d) map and L2-normalize, on the tape.
fn pooled_unit(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1];
    let pooled = tape.mean_rows(x)?;
    let row = tape.reshape(pooled, vec![1, d])?;
    let sq = tape.mul(row, row)?;
    let ss = tape.sum_all(sq)?;
    let norm = tape.sqrt(ss)?;
    tape.div(row, norm)
}

/// Mean-pool + FC head shared by the cat and cross variants.
struct PoolHead {
    weight: ParamId,
    bias: ParamId,
}

impl PoolHead {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(PoolHead {
            weight: store.add(
                format!("{prefix}.weight"),
                Tensor::uniform_fan_in(vec![d, 1], d, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![1]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let pooled = tape.mean_rows(x)?;
        let row = tape.reshape(pooled, vec![1, d])?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(row, w)?;
        tape.add_row_vec(y, b)
    }
}

/// Encodes the concatenated pair sequence and pools it to a logit.
pub struct TransformerCat {
    pub cfg: ModelConfig,
    pub backbone: ConvBackbone,
    pub encoder: EncoderStack,
    head: PoolHead,
}

impl TransformerCat {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hw = cfg.seq_len()?;
        let backbone = ConvBackbone::new(store, &cfg.backbone, cfg.d, rng)?;
        // Always position-embedded: without positions, a permutation
        // equivariant encoder plus mean pooling makes concat order
        // irrelevant and the pair halves indistinguishable.
        let encoder = EncoderStack::new(
            store,
            "encoder",
            cfg.layers,
            cfg.d,
            cfg.dim_ff,
            cfg.heads,
            2 * hw,
            true,
            cfg.extra_final_norm,
            rng,
        )?;
        let head = PoolHead::new(store, "head", cfg.d, rng)?;
        Ok(TransformerCat {
            cfg: cfg.clone(),
            backbone,
            encoder,
            head,
        })
    }

    /// Concat along the sequence axis, encode, pool, project to a logit.
    pub fn cat_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        g: Var,
    ) -> Result<Var> {
        let joined = tape.concat_rows(&[q, g])?;
        let encoded = self.encoder.forward(tape, store, joined)?;
        self.head.apply(tape, store, encoded)
    }

    fn extract_map(&self, store: &ParamStore, img: &Image) -> Result<Tensor> {
        let mut tape = Tape::new(self.cfg.precision);
        let m = self.backbone.extract(&mut tape, store, img)?;
        Ok(Tensor::from_vec(tape.shape(m).to_vec(), tape.value(m).to_vec()).unwrap())
    }
}

/// One vanilla post-norm decoder layer: self-attention, cross-attention
/// against the encoded memory, feed-forward.
struct CrossDecoderLayer {
    self_attn: MhaParams,
    cross_attn: MhaParams,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ln3: (ParamId, ParamId),
}

impl CrossDecoderLayer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        dim_ff: usize,
        heads: usize,
        shared_qk: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ln = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{prefix}.{name}.gamma"), Tensor::full(vec![d], 1.0))?,
                store.add(format!("{prefix}.{name}.beta"), Tensor::zeros(vec![d]))?,
            ))
        };
        Ok(CrossDecoderLayer {
            self_attn: MhaParams::new(store, &format!("{prefix}.self_attn"), d, heads, false, rng)?,
            cross_attn: MhaParams::new(
                store,
                &format!("{prefix}.cross_attn"),
                d,
                heads,
                shared_qk,
                rng,
            )?,
            ff1_w: store.add(
                format!("{prefix}.ff1.weight"),
                Tensor::uniform_fan_in(vec![d, dim_ff], d, rng),
            )?,
            ff1_b: store.add(format!("{prefix}.ff1.bias"), Tensor::zeros(vec![dim_ff]))?,
            ff2_w: store.add(
                format!("{prefix}.ff2.weight"),
                Tensor::uniform_fan_in(vec![dim_ff, d], dim_ff, rng),
            )?,
            ff2_b: store.add(format!("{prefix}.ff2.bias"), Tensor::zeros(vec![d]))?,
            ln1: ln(store, "ln1")?,
            ln2: ln(store, "ln2")?,
            ln3: ln(store, "ln3")?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
    ) -> Result<Var> {
        let norm = |tape: &mut Tape, v: Var, (g, b): (ParamId, ParamId)| -> Result<Var> {
            let gv = tape.param(store, g);
            let bv = tape.param(store, b);
            tape.layer_norm(v, Some(gv), Some(bv))
        };
        let sa = multi_head_attention(tape, store, x, x, x, &self.self_attn)?;
        let r1 = tape.add(x, sa)?;
        let x1 = norm(tape, r1, self.ln1)?;
        let ca = multi_head_attention(tape, store, x1, memory, memory, &self.cross_attn)?;
        let r2 = tape.add(x1, ca)?;
        let x2 = norm(tape, r2, self.ln2)?;
        let w1 = tape.param(store, self.ff1_w);
        let b1 = tape.param(store, self.ff1_b);
        let h = tape.matmul(x2, w1)?;
        let h = tape.add_row_vec(h, b1)?;
        let h = tape.relu(h)?;
        let w2 = tape.param(store, self.ff2_w);
        let b2 = tape.param(store, self.ff2_b);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row_vec(h, b2)?;
        let r3 = tape.add(x2, h)?;
        norm(tape, r3, self.ln3)
    }
}

/// Encodes the gallery; the raw query map drives vanilla decoder layers
/// cross-attending into that memory. Inherently asymmetric.
pub struct TransformerCross {
    pub cfg: ModelConfig,
    pub backbone: ConvBackbone,
    pub encoder: EncoderStack,
    decoders: Vec<CrossDecoderLayer>,
    head: PoolHead,
}

impl TransformerCross {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hw = cfg.seq_len()?;
        let backbone = ConvBackbone::new(store, &cfg.backbone, cfg.d, rng)?;
        let encoder = EncoderStack::new(
            store,
            "encoder",
            cfg.layers,
            cfg.d,
            cfg.dim_ff,
            cfg.heads,
            hw,
            cfg.pos_embed,
            cfg.extra_final_norm,
            rng,
        )?;
        let mut decoders = Vec::with_capacity(cfg.layers);
        for n in 0..cfg.layers {
            decoders.push(CrossDecoderLayer::new(
                store,
                &format!("decoder.{n}"),
                cfg.d,
                cfg.dim_ff,
                cfg.heads,
                cfg.shared_qk_fc,
                rng,
            )?);
        }
        let head = PoolHead::new(store, "head", cfg.d, rng)?;
        Ok(TransformerCross {
            cfg: cfg.clone(),
            backbone,
            encoder,
            decoders,
        head,
        })
    }

    /// Query map straight into the decoders; gallery map through the
    /// encoders as memory. With multiscale_fusion the pooled score of every
    /// decoder layer is summed; otherwise only the last layer scores.
    pub fn cross_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        g: Var,
    ) -> Result<Var> {
        let memory = self.encoder.forward(tape, store, g)?;
        let mut x = q;
        let mut fused: Option<Var> = None;
        for layer in &self.decoders {
            x = layer.forward(tape, store, x, memory)?;
            if self.cfg.multiscale_fusion {
                let y = self.head.apply(tape, store, x)?;
                fused = Some(match fused {
                    Some(acc) => tape.add(acc, y)?,
                    None => y,
                });
            }
        }
        match fused {
            Some(acc) => Ok(acc),
            None => self.head.apply(tape, store, x),
        }
    }

    /// Decoder stack output for the pair, before pooling.
    pub fn decode_map(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        g: Var,
    ) -> Result<Var> {
        let memory = self.encoder.forward(tape, store, g)?;
        let mut x = q;
        for layer in &self.decoders {
            x = layer.forward(tape, store, x, memory)?;
        }
        Ok(x)
    }

    fn extract_map(&self, store: &ParamStore, img: &Image) -> Result<Tensor> {
        let mut tape = Tape::new(self.cfg.precision);
        let m = self.backbone.extract(&mut tape, store, img)?;
        Ok(Tensor::from_vec(tape.shape(m).to_vec(), tape.value(m).to_vec()).unwrap())
    }
}

/// Independent encoding, mean pooling, cosine similarity with a learnable
/// temperature. Exactly swap-symmetric.
pub struct PlainEmbed {
    pub cfg: ModelConfig,
    pub backbone: ConvBackbone,
    pub encoder: EncoderStack,
    temperature: ParamId,
}

impl PlainEmbed {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hw = cfg.seq_len()?;
        let backbone = ConvBackbone::new(store, &cfg.backbone, cfg.d, rng)?;
        let encoder = EncoderStack::new(
            store,
            "encoder",
            cfg.layers,
            cfg.d,
            cfg.dim_ff,
            cfg.heads,
            hw,
            cfg.pos_embed,
            cfg.extra_final_norm,
            rng,
        )?;
        let temperature = store.add("temperature", Tensor::from_vec(vec![1], vec![10.0])?)?;
        Ok(PlainEmbed {
            cfg: cfg.clone(),
            backbone,
            encoder,
            temperature,
        })
    }

    /// Unit embedding of one feature map, on the tape.
    pub fn embed_map(&self, tape: &mut Tape, store: &ParamStore, m: Var) -> Result<Var> {
        let encoded = self.encoder.forward(tape, store, m)?;
        pooled_unit(tape, encoded)
    }

    /// Cosine of two unit embeddings scaled by the temperature.
    pub fn plain_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        qe: Var,
        ge: Var,
    ) -> Result<Var> {
        let gt = tape.transpose(ge)?;
        let cos = tape.matmul(qe, gt)?;
        let t = tape.param(store, self.temperature);
        tape.mul(cos, t)
    }

    fn embed_image(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.cfg.precision);
        let m = self.backbone.extract(&mut tape, store, img)?;
        let e = self.embed_map(&mut tape, store, m)?;
        Ok(tape.value(e).to_vec())
    }

    pub fn temperature_value(&self, store: &ParamStore) -> f64 {
        store.get(self.temperature).value.data[0]
    }
}

impl Scorer for TransMatcher {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var> {
        let maps: Vec<Vec<Var>> = images
            .iter()
            .map(|im| self.feature_pyramid(tape, store, im))
            .collect::<Result<_>>()?;
        let out = self.score_pairs(tape, store, &maps, &maps, true, false)?;
        Ok(out.total)
    }

    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>> {
        let qf: Vec<_> = queries
            .iter()
            .map(|im| self.extract_features(store, im))
            .collect::<Result<Vec<_>>>()?;
        let gf: Vec<_> = galleries
            .iter()
            .map(|im| self.extract_features(store, im))
            .collect::<Result<Vec<_>>>()?;
        qf.iter()
            .map(|q| {
                gf.iter()
                    .map(|g| self.score_features(store, q, g, false).map(|(s, _)| s))
                    .collect()
            })
            .collect()
    }

    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        TransMatcher::embed(self, store, img)
    }
}

impl Scorer for TransformerCat {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var> {
        let maps: Vec<Var> = images
            .iter()
            .map(|im| self.backbone.extract(tape, store, im))
            .collect::<Result<_>>()?;
        let mut logits = Vec::with_capacity(maps.len() * maps.len());
        for &q in &maps {
            for &g in &maps {
                logits.push(self.cat_forward(tape, store, q, g)?);
            }
        }
        tape.concat_rows(&logits)
    }

    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>> {
        let qm: Vec<Tensor> = queries
            .iter()
            .map(|im| self.extract_map(store, im))
            .collect::<Result<_>>()?;
        let gm: Vec<Tensor> = galleries
            .iter()
            .map(|im| self.extract_map(store, im))
            .collect::<Result<_>>()?;
        qm.iter()
            .map(|q| {
                gm.iter()
                    .map(|g| {
                        let mut tape = Tape::new(self.cfg.precision);
                        let qv = tape.constant(q);
                        let gv = tape.constant(g);
                        let y = self.cat_forward(&mut tape, store, qv, gv)?;
                        Ok(tape.item(y))
                    })
                    .collect()
            })
            .collect()
    }

    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        let m = self.extract_map(store, img)?;
        let (hw, d) = (m.shape[0], m.shape[1]);
        let mut pooled = vec![0.0; d];
        for i in 0..hw {
            for j in 0..d {
                pooled[j] += m.data[i * d + j] / hw as f64;
            }
        }
        Ok(l2_normalized(pooled))
    }
}

impl Scorer for TransformerCross {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var> {
        let maps: Vec<Var> = images
            .iter()
            .map(|im| self.backbone.extract(tape, store, im))
            .collect::<Result<_>>()?;
        // Encode each gallery memory once, reuse across queries.
        let memories: Vec<Var> = maps
            .iter()
            .map(|&m| self.encoder.forward(tape, store, m))
            .collect::<Result<_>>()?;
        let mut logits = Vec::with_capacity(maps.len() * maps.len());
        for &q in &maps {
            for &memory in &memories {
                let mut x = q;
                let mut fused: Option<Var> = None;
                for layer in &self.decoders {
                    x = layer.forward(tape, store, x, memory)?;
                    if self.cfg.multiscale_fusion {
                        let y = self.head.apply(tape, store, x)?;
                        fused = Some(match fused {
                            Some(acc) => tape.add(acc, y)?,
                            None => y,
                        });
                    }
                }
                logits.push(match fused {
                    Some(acc) => acc,
                    None => self.head.apply(tape, store, x)?,
                });
            }
        }
        tape.concat_rows(&logits)
    }

    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>> {
        let qm: Vec<Tensor> = queries
            .iter()
            .map(|im| self.extract_map(store, im))
            .collect::<Result<_>>()?;
        let gm: Vec<Tensor> = galleries
            .iter()
            .map(|im| self.extract_map(store, im))
            .collect::<Result<_>>()?;
        qm.iter()
            .map(|q| {
                gm.iter()
                    .map(|g| {
                        let mut tape = Tape::new(self.cfg.precision);
                        let qv = tape.constant(q);
                        let gv = tape.constant(g);
                        let y = self.cross_forward(&mut tape, store, qv, gv)?;
                        Ok(tape.item(y))
                    })
                    .collect()
            })
            .collect()
    }

    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.cfg.precision);
        let m = self.backbone.extract(&mut tape, store, img)?;
        let e = self.encoder.forward(&mut tape, store, m)?;
        let pooled = tape.mean_rows(e)?;
        Ok(l2_normalized(tape.value(pooled).to_vec()))
    }
}

impl Scorer for PlainEmbed {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var> {
        let embeds: Vec<Var> = images
            .iter()
            .map(|im| {
                let m = self.backbone.extract(tape, store, im)?;
                self.embed_map(tape, store, m)
            })
            .collect::<Result<_>>()?;
        let mut logits = Vec::with_capacity(embeds.len() * embeds.len());
        for &q in &embeds {
            for &g in &embeds {
                logits.push(self.plain_forward(tape, store, q, g)?);
            }
        }
        tape.concat_rows(&logits)
    }

    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>> {
        let t = self.temperature_value(store);
        let qe: Vec<Vec<f64>> = queries
            .iter()
            .map(|im| self.embed_image(store, im))
            .collect::<Result<_>>()?;
        let ge: Vec<Vec<f64>> = galleries
            .iter()
            .map(|im| self.embed_image(store, im))
            .collect::<Result<_>>()?;
        Ok(qe
            .iter()
            .map(|q| {
                ge.iter()
                    .map(|g| t * q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        self.embed_image(store, img)
    }
}

/// Variant dispatch used by the trainer and CLI.
pub enum Model {
    Transmatcher(TransMatcher),
    Cat(TransformerCat),
    Cross(TransformerCross),
    Plain(PlainEmbed),
}

impl Model {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        Ok(match cfg.variant {
            Variant::Transmatcher => Model::Transmatcher(TransMatcher::new(store, cfg, rng)?),
            Variant::TransformerCat => Model::Cat(TransformerCat::new(store, cfg, rng)?),
            Variant::TransformerCross => Model::Cross(TransformerCross::new(store, cfg, rng)?),
            Variant::PlainEmbed => Model::Plain(PlainEmbed::new(store, cfg, rng)?),
        })
    }

    pub fn as_transmatcher(&self) -> Result<&TransMatcher> {
        match self {
            Model::Transmatcher(m) => Ok(m),
            _ => Err(Error::Config(
                "operation requires the transmatcher variant".into(),
            )),
        }
    }

    fn inner(&self) -> &dyn Scorer {
        match self {
            Model::Transmatcher(m) => m,
            Model::Cat(m) => m,
            Model::Cross(m) => m,
            Model::Plain(m) => m,
        }
    }
}

impl Scorer for Model {
    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }

    fn score_all_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &[&Image],
    ) -> Result<Var> {
        self.inner().score_all_train(tape, store, images)
    }

    fn score_grid(
        &self,
        store: &mut ParamStore,
        queries: &[&Image],
        galleries: &[&Image],
    ) -> Result<Vec<Vec<f64>>> {
        self.inner().score_grid(store, queries, galleries)
    }

    fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        self.inner().embed(store, img)
    }
}

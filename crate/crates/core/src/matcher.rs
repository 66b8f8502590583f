//! Hard-attention similarity decoder: shared FC transform, prior score
//! embedding, symmetric GMP over both directions, MLP score head, and
//! residual score fusion across stacked encoder-decoder blocks.

use crate::backbone::ConvBackbone;
use crate::config::ModelConfig;
use crate::data::Image;
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm parameters plus running-stat buffers.
pub struct BnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnUnit {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BnUnit {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(vec![channels], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: store
                .add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: store
                .add_buffer(format!("{prefix}.running_var"), Tensor::full(vec![channels], 1.0))?,
        })
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(
            x,
            g,
            b,
            store,
            self.running_mean,
            self.running_var,
            training,
            BN_MOMENTUM,
        )
    }
}

/// One decoder block. Optional parts follow the ablation flags; only the
/// final FC3+BN3 head is unconditional.
pub struct DecoderLayer {
    pub w: Option<ParamId>,
    pub r_raw: Option<ParamId>,
    pub bn1: Option<BnUnit>,
    pub fc2: Option<(ParamId, ParamId)>,
    pub bn2: Option<BnUnit>,
    pub fc3_w: ParamId,
    pub fc3_b: ParamId,
    pub bn3: BnUnit,
    pub sum_after_bn3: bool,
    pub hw: usize,
    pub d: usize,
}

/// Local matching products of one pair at one layer, kept as tape nodes.
pub struct LocalMatch {
    pub s: Var,
    pub s_prime: Var,
    /// (1, hw) row of per-query-location max scores.
    pub fwd: Var,
    /// (1, hw) row of per-gallery-location max scores.
    pub rev: Var,
    pub fwd_argmax: Vec<usize>,
    pub rev_argmax: Vec<usize>,
}

/// Extracted per-layer record of one scored pair.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub layer_score: f64,
    pub fwd_scores: Vec<f64>,
    pub fwd_argmax: Vec<usize>,
    pub rev_scores: Vec<f64>,
    pub rev_argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PairScore {
    pub query_id: String,
    pub gallery_id: String,
    pub score: f64,
    pub layers: Vec<LayerState>,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hw: usize,
        d: usize,
        dim_ff: usize,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = if cfg.fc1 {
            Some(store.add(format!("{prefix}.W"), Tensor::uniform_fan_in(vec![d, d], d, rng))?)
        } else {
            None
        };
        let r_raw = if cfg.prior_embed {
            Some(store.add(format!("{prefix}.R"), Tensor::zeros(vec![hw, hw]))?)
        } else {
            None
        };
        let bn1 = if cfg.bn1 {
            Some(BnUnit::new(store, &format!("{prefix}.bn1"), hw)?)
        } else {
            None
        };
        let (fc2, bn2, fc3_in) = if cfg.mlphead1 {
            (
                Some((
                    store.add(
                        format!("{prefix}.fc2.weight"),
                        Tensor::uniform_fan_in(vec![hw, dim_ff], hw, rng),
                    )?,
                    store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(vec![dim_ff]))?,
                )),
                Some(BnUnit::new(store, &format!("{prefix}.bn2"), dim_ff)?),
                dim_ff,
            )
        } else {
            (None, None, hw)
        };
        let fc3_w = store.add(
            format!("{prefix}.fc3.weight"),
            Tensor::uniform_fan_in(vec![fc3_in, 1], fc3_in, rng),
        )?;
        let fc3_b = store.add(format!("{prefix}.fc3.bias"), Tensor::zeros(vec![1]))?;
        let bn3 = BnUnit::new(store, &format!("{prefix}.bn3"), 1)?;
        Ok(DecoderLayer {
            w,
            r_raw,
            bn1,
            fc2,
            bn2,
            fc3_w,
            fc3_b,
            bn3,
            sum_after_bn3: cfg.direction_sum_after_bn3,
            hw,
            d,
        })
    }

    /// Score map and both GMP directions for a single (query, gallery) pair
    /// of (hw, d) feature maps.
    pub fn local_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
    ) -> Result<LocalMatch> {
        for m in [q, k] {
            if tape.shape(m) != [self.hw, self.d] {
                return Err(Error::ShapeMismatch {
                    op: "decode_layer",
                    lhs: tape.shape(m).to_vec(),
                    rhs: vec![self.hw, self.d],
                });
            }
        }
        let (qp, kp) = if let Some(wid) = self.w {
            let w = tape.param(store, wid);
            (tape.matmul(q, w)?, tape.matmul(k, w)?)
        } else {
            (q, k)
        };
        let kt = tape.transpose(kp)?;
        let s = tape.matmul(qp, kt)?;
        let s_prime = if let Some(rid) = self.r_raw {
            let r = tape.param(store, rid);
            let rt = tape.transpose(r)?;
            let sym = tape.add(r, rt)?;
            let r_eff = tape.scale(sym, 0.5)?;
            let gate = tape.sigmoid(r_eff)?;
            tape.mul(s, gate)?
        } else {
            s
        };
        let (fwd_v, fwd_argmax) = tape.max_reduce(s_prime, 1)?;
        let (rev_v, rev_argmax) = tape.max_reduce(s_prime, 0)?;
        let fwd = tape.reshape(fwd_v, vec![1, self.hw])?;
        let rev = tape.reshape(rev_v, vec![1, self.hw])?;
        Ok(LocalMatch {
            s,
            s_prime,
            fwd,
            rev,
            fwd_argmax,
            rev_argmax,
        })
    }

    /// Score head over a (2P, hw) matrix whose first P rows are forward GMP
    /// vectors and last P rows the reverse ones; returns (P, 1) pair scores.
    /// Both directions share one batch so normalization treats them alike.
    pub fn head(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if rows % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "decoder_head",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![rows / 2 * 2, self.hw],
            });
        }
        let p = rows / 2;
        let mut h = x;
        if let Some(bn1) = &self.bn1 {
            h = bn1.apply(tape, store, h, training)?;
        }
        if let Some((w2, b2)) = self.fc2 {
            let w = tape.param(store, w2);
            let b = tape.param(store, b2);
            h = tape.matmul(h, w)?;
            h = tape.add_row_vec(h, b)?;
            h = self.bn2.as_ref().unwrap().apply(tape, store, h, training)?;
            h = tape.relu(h)?;
        }
        let w3 = tape.param(store, self.fc3_w);
        let b3 = tape.param(store, self.fc3_b);
        let mut y = tape.matmul(h, w3)?;
        y = tape.add_row_vec(y, b3)?;
        if self.sum_after_bn3 {
            y = self.bn3.apply(tape, store, y, training)?;
            fold_directions(tape, y, p)
        } else {
            y = fold_directions(tape, y, p)?;
            self.bn3.apply(tape, store, y, training)
        }
    }

    /// Full single-pair decode: layer score (1, 1) plus the extracted state.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        q: Var,
        k: Var,
        training: bool,
    ) -> Result<(Var, LayerState)> {
        let lm = self.local_scores(tape, store, q, k)?;
        let x = tape.concat_rows(&[lm.fwd, lm.rev])?;
        let y = self.head(tape, store, x, training)?;
        let state = LayerState {
            layer_score: tape.item(y),
            fwd_scores: tape.value(lm.fwd).to_vec(),
            fwd_argmax: lm.fwd_argmax,
            rev_scores: tape.value(lm.rev).to_vec(),
            rev_argmax: lm.rev_argmax,
        };
        Ok((y, state))
    }
}

/// (2P, 1) column of direction scores -> (P, 1) sums of forward + reverse.
fn fold_directions(tape: &mut Tape, y: Var, p: usize) -> Result<Var> {
    let yt = tape.transpose(y)?;
    let f = tape.slice_cols(yt, 0, p)?;
    let r = tape.slice_cols(yt, p, 2 * p)?;
    let s = tape.add(f, r)?;
    tape.transpose(s)
}

/// All-ordered-pairs scores of one batch, still on the tape.
pub struct BatchScores {
    /// (P, 1) residual-fused logits, P = n_queries * n_galleries, row-major
    /// over (query, gallery).
    pub total: Var,
    /// Per-layer (P, 1) scores; `total` is their running sum.
    pub per_layer: Vec<Var>,
    pub states: Option<Vec<Vec<LayerState>>>,
}

pub struct TransMatcher {
    pub cfg: ModelConfig,
    pub backbone: ConvBackbone,
    pub encoder: EncoderStack,
    pub decoders: Vec<DecoderLayer>,
}

impl TransMatcher {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.feature_geometry()?;
        let hw = h * w;
        let backbone = ConvBackbone::new(store, &cfg.backbone, cfg.d, rng)?;
        let n_enc = if cfg.use_raw_first_pair {
            cfg.layers - 1
        } else {
            cfg.layers
        };
        let encoder = EncoderStack::new(
            store,
            "encoder",
            n_enc,
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
            decoders.push(DecoderLayer::new(
                store,
                &format!("decoder.{n}"),
                hw,
                cfg.d,
                cfg.dim_ff,
                cfg,
                rng,
            )?);
        }
        Ok(TransMatcher {
            cfg: cfg.clone(),
            backbone,
            encoder,
            decoders,
        })
    }

    /// The N feature maps consumed by decoders 1..N. With use_raw_first_pair
    /// the raw backbone map feeds decoder 1 and encoder outputs 1..N-1 feed
    /// the rest; otherwise encoder outputs 1..N feed the decoders.
    pub fn feature_pyramid(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        img: &Image,
    ) -> Result<Vec<Var>> {
        let raw = self.backbone.extract(tape, store, img)?;
        let outs = self.encoder.forward_all(tape, store, raw)?;
        let mut maps = Vec::with_capacity(self.cfg.layers);
        if self.cfg.use_raw_first_pair {
            maps.push(raw);
        }
        maps.extend(&outs[1..]);
        debug_assert_eq!(maps.len(), self.cfg.layers);
        Ok(maps)
    }

    /// Score every ordered (query, gallery) pair. In train mode the BN
    /// statistics couple all pairs of the batch; in eval mode each entry is
    /// independent of the rest.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        q_maps: &[Vec<Var>],
        g_maps: &[Vec<Var>],
        training: bool,
        record: bool,
    ) -> Result<BatchScores> {
        if q_maps.is_empty() || g_maps.is_empty() {
            return Err(Error::Config("score_pairs on empty batch".into()));
        }
        let p = q_maps.len() * g_maps.len();
        let mut per_layer = Vec::with_capacity(self.decoders.len());
        let mut states: Option<Vec<Vec<LayerState>>> =
            record.then(|| (0..p).map(|_| Vec::new()).collect());
        for (n, layer) in self.decoders.iter().enumerate() {
            let mut fwd_rows = Vec::with_capacity(p);
            let mut rev_rows = Vec::with_capacity(p);
            let mut locals = Vec::with_capacity(if record { p } else { 0 });
            for qm in q_maps {
                for gm in g_maps {
                    let lm = layer.local_scores(tape, store, qm[n], gm[n])?;
                    fwd_rows.push(lm.fwd);
                    rev_rows.push(lm.rev);
                    if record {
                        locals.push(lm);
                    }
                }
            }
            fwd_rows.extend_from_slice(&rev_rows);
            let x = tape.concat_rows(&fwd_rows)?;
            let y = layer.head(tape, store, x, training)?;
            if let Some(states) = states.as_mut() {
                let scores = tape.value(y).to_vec();
                for (pi, lm) in locals.into_iter().enumerate() {
                    states[pi].push(LayerState {
                        layer_score: scores[pi],
                        fwd_scores: tape.value(lm.fwd).to_vec(),
                        fwd_argmax: lm.fwd_argmax,
                        rev_scores: tape.value(lm.rev).to_vec(),
                        rev_argmax: lm.rev_argmax,
                    });
                }
            }
            per_layer.push(y);
        }
        let mut total = per_layer[0];
        for &y in &per_layer[1..] {
            total = tape.add(total, y)?;
        }
        Ok(BatchScores {
            total,
            per_layer,
            states,
        })
    }

    /// Eval-mode score of one image pair with retained decoder state.
    pub fn forward_pair(
        &self,
        store: &mut ParamStore,
        img_q: &Image,
        img_g: &Image,
    ) -> Result<PairScore> {
        let qf = self.extract_features(store, img_q)?;
        let gf = self.extract_features(store, img_g)?;
        let (score, layers) = self.score_features(store, &qf, &gf, true)?;
        Ok(PairScore {
            query_id: img_q.id.clone(),
            gallery_id: img_g.id.clone(),
            score,
            layers,
        })
    }

    /// Eval-mode feature pyramid as plain tensors, for caching across the
    /// many pairs of a retrieval grid.
    pub fn extract_features(&self, store: &ParamStore, img: &Image) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(self.cfg.precision);
        let maps = self.feature_pyramid(&mut tape, store, img)?;
        Ok(maps
            .into_iter()
            .map(|m| Tensor::from_vec(tape.shape(m).to_vec(), tape.value(m).to_vec()).unwrap())
            .collect())
    }

    /// Eval-mode pair score from cached pyramids.
    pub fn score_features(
        &self,
        store: &mut ParamStore,
        qf: &[Tensor],
        gf: &[Tensor],
        record: bool,
    ) -> Result<(f64, Vec<LayerState>)> {
        let mut tape = Tape::new(self.cfg.precision);
        let qv: Vec<Var> = qf.iter().map(|t| tape.constant(t)).collect();
        let gv: Vec<Var> = gf.iter().map(|t| tape.constant(t)).collect();
        let out = self.score_pairs(&mut tape, store, &[qv], &[gv], false, record)?;
        let layers = out.states.map(|mut s| s.remove(0)).unwrap_or_default();
        Ok((tape.item(out.total), layers))
    }

    /// Mean-pooled, L2-normalized final encoder output; used for the class
    /// graph, not for scoring.
    pub fn embed(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.cfg.precision);
        let raw = self.backbone.extract(&mut tape, store, img)?;
        let out = self.encoder.forward(&mut tape, store, raw)?;
        let pooled = tape.mean_rows(out)?;
        let mut v = tape.value(pooled).to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchRecord {
    pub query_id: String,
    pub gallery_id: String,
    pub layer: usize,
    pub direction: Direction,
    /// (row, col) on the feature grid.
    pub query_pos: (usize, usize),
    pub gallery_pos: (usize, usize),
    pub score: f64,
}

/// Per-layer local matches above `threshold`. `w` is the feature-grid width
/// used to split flat indices into (row, col).
pub fn extract_correspondences(pair: &PairScore, w: usize, threshold: f64) -> Vec<MatchRecord> {
    let pos = |i: usize| (i / w, i % w);
    let mut out = Vec::new();
    for (n, layer) in pair.layers.iter().enumerate() {
        for (i, &s) in layer.fwd_scores.iter().enumerate() {
            if s > threshold {
                out.push(MatchRecord {
                    query_id: pair.query_id.clone(),
                    gallery_id: pair.gallery_id.clone(),
                    layer: n,
                    direction: Direction::Forward,
                    query_pos: pos(i),
                    gallery_pos: pos(layer.fwd_argmax[i]),
                    score: s,
                });
            }
        }
        for (j, &s) in layer.rev_scores.iter().enumerate() {
            if s > threshold {
                out.push(MatchRecord {
                    query_id: pair.query_id.clone(),
                    gallery_id: pair.gallery_id.clone(),
                    layer: n,
                    direction: Direction::Reverse,
                    query_pos: pos(layer.rev_argmax[j]),
                    gallery_pos: pos(j),
                    score: s,
                });
            }
        }
    }
    out
}

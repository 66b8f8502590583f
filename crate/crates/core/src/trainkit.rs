//! Pairwise metric-learning loop: class-graph PK sampling, all-pairs
//! class-balanced BCE over the batch score matrix, SGD with per-group
//! learning rates, step decay, and gradient clipping.

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, LrGroups, Sgd};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::variants::Scorer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub instances_per_class: usize,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub decay_factor: f64,
    /// Learning rates are multiplied by decay_factor after this many epochs.
    pub decay_epoch: usize,
    pub clip_norm: f64,
    pub momentum: f64,
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_default()
    }
}

impl TrainConfig {
    /// CPU-sized defaults. The smaller batch and synthetic data need a hotter
    /// schedule than the reference recipe: 10x learning rates plus momentum.
    pub fn desk_default() -> Self {
        TrainConfig {
            batch_size: 16,
            instances_per_class: 4,
            epochs: 15,
            lr_backbone: 0.005,
            lr_new: 0.05,
            decay_factor: 0.1,
            decay_epoch: 10,
            clip_norm: 4.0,
            momentum: 0.9,
            flip_augment: true,
            seed: 1,
        }
    }

    /// Reference recipe: batch 64, K=4, lr 0.0005 / 0.005, plain SGD.
    pub fn paper_default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr_backbone: 0.0005,
            lr_new: 0.005,
            momentum: 0.0,
            ..TrainConfig::desk_default()
        }
    }

    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_per_class == 0 || self.batch_size % self.instances_per_class != 0 {
            return Err(Error::Config(format!(
                "batch size {} not divisible by instances per class {}",
                self.batch_size, self.instances_per_class
            )));
        }
        if self.classes_per_batch() < 2 {
            return Err(Error::Config(
                "need at least 2 classes per batch for negative pairs".into(),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_groups(&self, epoch: usize) -> LrGroups {
        let base = LrGroups {
            backbone: self.lr_backbone,
            new_layers: self.lr_new,
        };
        if epoch >= self.decay_epoch {
            base.scaled(self.decay_factor)
        } else {
            base
        }
    }
}

/// Nearest-class table driving the sampler. Rebuilt at each epoch start.
#[derive(Debug, Clone)]
pub struct ClassGraph {
    pub classes: Vec<u32>,
    /// Per class: indices (into `classes`) of its nearest neighbor classes,
    /// most similar first.
    pub neighbors: Vec<Vec<usize>>,
}

/// Mean embedding per class with the current model, then nearest
/// (classes_per_batch - 1) classes by cosine. Ties break by class index.
pub fn build_class_graph(
    model: &dyn Scorer,
    store: &ParamStore,
    dataset: &Dataset,
    classes_per_batch: usize,
) -> Result<ClassGraph> {
    let classes = dataset.identities();
    if classes.len() < classes_per_batch {
        return Err(Error::Config(format!(
            "dataset has {} identities, need at least {}",
            classes.len(),
            classes_per_batch
        )));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for img in dataset.images.iter().filter(|im| im.identity == c) {
            let e = model.embed(store, img)?;
            match &mut acc {
                Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
                None => acc = Some(e),
            }
            n += 1;
        }
        let mut mean = acc.ok_or_else(|| Error::Data(format!("class {c} has no images")))?;
        mean.iter_mut().for_each(|x| *x /= n as f64);
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        mean.iter_mut().for_each(|x| *x /= norm);
        means.push(mean);
    }
    let k = classes_per_batch - 1;
    let mut neighbors = Vec::with_capacity(classes.len());
    for i in 0..classes.len() {
        let mut sims: Vec<(usize, f64)> = (0..classes.len())
            .filter(|&j| j != i)
            .map(|j| {
                let cos = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum::<f64>();
                (j, cos)
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        neighbors.push(sims.into_iter().take(k).map(|(j, _)| j).collect());
    }
    Ok(ClassGraph {
        classes,
        neighbors,
    })
}

/// One PK batch: indices into the dataset's image list.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub anchor_class: u32,
}

/// Per-class pool drawing without replacement within the epoch, refilled by
/// reshuffle when exhausted.
struct ClassPool {
    images: Vec<usize>,
    queue: Vec<usize>,
}

impl ClassPool {
    fn draw(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.queue.is_empty() {
                self.queue = self.images.clone();
                self.queue.shuffle(rng);
            }
            out.push(self.queue.pop().unwrap());
        }
        out
    }
}

/// One epoch of batches: every class anchors exactly once (shuffled order);
/// each batch is the anchor plus its nearest classes, K instances each.
pub fn sample_epoch_batches(
    graph: &ClassGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    warnings: &mut Vec<String>,
) -> Result<Vec<Batch>> {
    let k = cfg.instances_per_class;
    let mut pools: Vec<ClassPool> = graph
        .classes
        .iter()
        .map(|&c| {
            let images: Vec<usize> = dataset
                .images
                .iter()
                .enumerate()
                .filter(|(_, im)| im.identity == c)
                .map(|(i, _)| i)
                .collect();
            ClassPool {
                images,
                queue: Vec::new(),
            }
        })
        .collect();
    for (ci, pool) in pools.iter_mut().enumerate() {
        if pool.images.len() < k {
            warnings.push(format!(
                "class {} has {} images, fewer than K={k}; sampling with replacement",
                graph.classes[ci],
                pool.images.len()
            ));
        }
    }
    let mut anchor_order: Vec<usize> = (0..graph.classes.len()).collect();
    anchor_order.shuffle(rng);
    let mut batches = Vec::with_capacity(anchor_order.len());
    for anchor in anchor_order {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        indices.extend(pools[anchor].draw(k, rng));
        for &nb in &graph.neighbors[anchor] {
            indices.extend(pools[nb].draw(k, rng));
        }
        batches.push(Batch {
            indices,
            anchor_class: graph.classes[anchor],
        });
    }
    Ok(batches)
}

/// Class-balanced BCE over the (B*B, 1) logits of all ordered pairs:
/// half the weight on positive pairs, half on negatives, self-pairs
/// excluded.
pub fn pairwise_bce_loss(tape: &mut Tape, logits: Var, ids: &[u32]) -> Result<Var> {
    let b = ids.len();
    if tape.shape(logits) != [b * b, 1] {
        return Err(Error::ShapeMismatch {
            op: "pairwise_bce_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![b * b, 1],
        });
    }
    let mut labels = vec![0.0; b * b];
    let mut pos_mask = vec![0.0; b * b];
    let mut neg_mask = vec![0.0; b * b];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let idx = i * b + j;
            if ids[i] == ids[j] {
                labels[idx] = 1.0;
                pos_mask[idx] = 1.0;
                n_pos += 1;
            } else {
                neg_mask[idx] = 1.0;
                n_neg += 1;
            }
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(format!(
            "batch needs both pair kinds: {n_pos} positive, {n_neg} negative"
        )));
    }
    let bce = tape.bce_with_logits(logits, &labels)?;
    let pm = tape.constant(&crate::tensor::Tensor::from_vec(vec![b * b, 1], pos_mask)?);
    let nm = tape.constant(&crate::tensor::Tensor::from_vec(vec![b * b, 1], neg_mask)?);
    let pos_terms = tape.mul(bce, pm)?;
    let pos_sum = tape.sum_all(pos_terms)?;
    let pos = tape.scale(pos_sum, 0.5 / n_pos as f64)?;
    let neg_terms = tape.mul(bce, nm)?;
    let neg_sum = tape.sum_all(neg_terms)?;
    let neg = tape.scale(neg_sum, 0.5 / n_neg as f64)?;
    tape.add(pos, neg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_new: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub warnings: Vec<String>,
    /// Post-clip global gradient norm per step, for the clipping invariant.
    pub post_clip_norms: Vec<f64>,
}

/// Full training loop. Deterministic given the config seed.
pub fn train(
    model: &dyn Scorer,
    store: &mut ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config().validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum);
    let mut report = TrainReport::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let graph = build_class_graph(model, store, dataset, cfg.classes_per_batch())?;
        let batches =
            sample_epoch_batches(&graph, dataset, cfg, &mut rng, &mut report.warnings)?;
        let lr = cfg.lr_groups(epoch);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let images: Vec<Image> = batch
                .indices
                .iter()
                .map(|&i| {
                    let im = &dataset.images[i];
                    if cfg.flip_augment && rng.gen::<f64>() < 0.5 {
                        im.flipped_horizontal()
                    } else {
                        im.clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let ids: Vec<u32> = images.iter().map(|im| im.identity).collect();
            let mut tape = Tape::new(model.config().precision);
            store.zero_grad();
            let logits = model.score_all_train(&mut tape, store, &refs)?;
            let loss = pairwise_bce_loss(&mut tape, logits, &ids)?;
            let loss_val = tape.item(loss);
            if !loss_val.is_finite() {
                return Err(Error::NanLoss(step));
            }
            tape.backward(loss)?;
            tape.apply_param_grads(store);
            clip_grad_norm(store, cfg.clip_norm)?;
            report.post_clip_norms.push(crate::optim::global_grad_norm(store));
            opt.step(store, lr)?;
            loss_sum += loss_val;
            step += 1;
        }
        report.history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.len() as f64,
            lr_new: lr.new_layers,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{DomainSpec, Split, SyntheticSpec};
    use crate::tape::Precision;
    use crate::variants::Model;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.d = 8;
        cfg.dim_ff = 16;
        cfg.layers = 1;
        cfg.image_height = 12;
        cfg.image_width = 8;
        cfg.backbone.channels = vec![4, 8];
        cfg
    }

    fn tiny_dataset(n_ids: usize, per_id: usize, seed: u64) -> Dataset {
        let mut spec = SyntheticSpec::easy(n_ids, per_id, seed);
        spec.height = 12;
        spec.width = 8;
        spec.domain = DomainSpec::noiseless("t");
        crate::data::generate_synthetic(&spec, Split::Train).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            instances_per_class: 2,
            epochs: 1,
            ..TrainConfig::desk_default()
        }
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Model::build(&mut store, cfg, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn desk_and_paper_defaults() {
        let desk = TrainConfig::desk_default();
        assert_eq!(desk.classes_per_batch(), 4);
        let paper = TrainConfig::paper_default();
        assert_eq!(paper.batch_size, 64);
        assert_eq!(paper.instances_per_class, 4);
        assert_eq!(paper.classes_per_batch(), 16);
        assert_eq!(paper.epochs, 15);
        assert_eq!(paper.decay_epoch, 10);
        assert_eq!(paper.clip_norm, 4.0);
        assert_eq!(paper.lr_backbone, 0.0005);
        assert_eq!(paper.lr_new, 0.005);
    }

    #[test]
    fn lr_schedule_decays_after_decay_epoch() {
        let cfg = TrainConfig::desk_default();
        for epoch in 0..10 {
            assert_eq!(cfg.lr_groups(epoch).new_layers, 0.05);
        }
        for epoch in 10..15 {
            assert!((cfg.lr_groups(epoch).new_layers - 0.005).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_graph_links_each_to_the_other() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 1);
        let ds = tiny_dataset(2, 2, 3);
        let graph = build_class_graph(&model, &store, &ds, 2).unwrap();
        assert_eq!(graph.classes.len(), 2);
        assert_eq!(graph.neighbors[0], vec![1]);
        assert_eq!(graph.neighbors[1], vec![0]);
    }

    #[test]
    fn class_graph_matches_brute_force_cosine_scan() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 2);
        let ds = tiny_dataset(6, 3, 5);
        let graph = build_class_graph(&model, &store, &ds, 3).unwrap();
        // Oracle: recompute all mean embeddings and do a full sort.
        for (i, &c) in graph.classes.iter().enumerate() {
            let mean = |class: u32| -> Vec<f64> {
                let imgs: Vec<_> = ds.images.iter().filter(|im| im.identity == class).collect();
                let mut acc = vec![0.0; cfg.d];
                for im in &imgs {
                    let e = model.embed(&store, im).unwrap();
                    acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
                }
                acc.iter_mut().for_each(|x| *x /= imgs.len() as f64);
                let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
                acc.iter_mut().for_each(|x| *x /= n);
                acc
            };
            let mi = mean(c);
            let mut sims: Vec<(usize, f64)> = graph
                .classes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &cj)| {
                    let mj = mean(cj);
                    (j, mi.iter().zip(&mj).map(|(a, b)| a * b).sum())
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = sims.into_iter().take(2).map(|(j, _)| j).collect();
            assert_eq!(graph.neighbors[i], want);
        }
    }

    #[test]
    fn too_few_identities_is_a_config_error() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 1);
        let ds = tiny_dataset(2, 2, 3);
        assert!(build_class_graph(&model, &store, &ds, 4).is_err());
    }

    #[test]
    fn batches_have_pk_structure_and_each_anchor_once() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 3);
        let ds = tiny_dataset(5, 6, 7);
        let tc = tiny_train_cfg();
        let graph = build_class_graph(&model, &store, &ds, tc.classes_per_batch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut warnings = Vec::new();
        let batches = sample_epoch_batches(&graph, &ds, &tc, &mut rng, &mut warnings).unwrap();
        assert_eq!(batches.len(), 5);
        let mut anchors: Vec<u32> = batches.iter().map(|b| b.anchor_class).collect();
        anchors.sort_unstable();
        assert_eq!(anchors, graph.classes);
        for b in &batches {
            assert_eq!(b.indices.len(), tc.batch_size);
            let mut counts = std::collections::HashMap::new();
            for &i in &b.indices {
                *counts.entry(ds.images[i].identity).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), tc.classes_per_batch());
            assert!(counts.values().all(|&n| n == tc.instances_per_class));
            assert!(counts.contains_key(&b.anchor_class));
        }
        assert!(warnings.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 3);
        let ds = tiny_dataset(5, 6, 7);
        let tc = tiny_train_cfg();
        let graph = build_class_graph(&model, &store, &ds, tc.classes_per_batch()).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut w = Vec::new();
            sample_epoch_batches(&graph, &ds, &tc, &mut rng, &mut w)
                .unwrap()
                .into_iter()
                .map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_class_warns_and_samples_with_replacement() {
        let cfg = tiny_cfg();
        let (model, store) = build(&cfg, 3);
        let ds = tiny_dataset(4, 1, 7);
        let tc = tiny_train_cfg();
        let graph = build_class_graph(&model, &store, &ds, tc.classes_per_batch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut warnings = Vec::new();
        let batches = sample_epoch_batches(&graph, &ds, &tc, &mut rng, &mut warnings).unwrap();
        assert_eq!(warnings.len(), 4);
        assert!(batches.iter().all(|b| b.indices.len() == tc.batch_size));
    }

    #[test]
    fn balanced_zero_logits_give_ln2() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(&crate::tensor::Tensor::zeros(vec![16, 1]));
        let ids = [0u32, 0, 1, 1];
        let loss = pairwise_bce_loss(&mut tape, logits, &ids).unwrap();
        assert!((tape.item(loss) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_logits_give_near_zero_loss() {
        let ids = [0u32, 0, 1, 1];
        let mut data = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                data[i * 4 + j] = if ids[i] == ids[j] { 20.0 } else { -20.0 };
            }
        }
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(&crate::tensor::Tensor::from_vec(vec![16, 1], data).unwrap());
        let loss = pairwise_bce_loss(&mut tape, logits, &ids).unwrap();
        assert!(tape.item(loss) < 1e-8);
    }

    #[test]
    fn loss_matches_per_pair_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ids = [3u32, 5, 3, 7];
        let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let mut tape = Tape::new(Precision::F64);
        let logits =
            tape.constant(&crate::tensor::Tensor::from_vec(vec![16, 1], data.clone()).unwrap());
        let loss = pairwise_bce_loss(&mut tape, logits, &ids).unwrap();
        let bce = |x: f64, z: f64| (1.0 + (-x.abs()).exp()).ln() + x.max(0.0) - x * z;
        let (mut ps, mut ns, mut np, mut nn) = (0.0, 0.0, 0, 0);
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                if ids[i] == ids[j] {
                    ps += bce(data[i * 4 + j], 1.0);
                    np += 1;
                } else {
                    ns += bce(data[i * 4 + j], 0.0);
                    nn += 1;
                }
            }
        }
        let want = 0.5 * ps / np as f64 + 0.5 * ns / nn as f64;
        assert!((tape.item(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_negative_count_at_constant_logits() {
        for (b, k) in [(4usize, 2usize), (8, 2), (12, 2)] {
            let ids: Vec<u32> = (0..b).map(|i| (i / k) as u32).collect();
            let mut tape = Tape::new(Precision::F64);
            let logits = tape.constant(&crate::tensor::Tensor::full(vec![b * b, 1], 0.7));
            let loss = pairwise_bce_loss(&mut tape, logits, &ids).unwrap();
            let bce = |x: f64, z: f64| (1.0 + (-x.abs()).exp()).ln() + x.max(0.0) - x * z;
            let want = 0.5 * bce(0.7, 1.0) + 0.5 * bce(0.7, 0.0);
            assert!((tape.item(loss) - want).abs() < 1e-12, "B = {b}");
        }
    }

    #[test]
    fn single_class_batch_is_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(&crate::tensor::Tensor::zeros(vec![9, 1]));
        assert!(pairwise_bce_loss(&mut tape, logits, &[1, 1, 1]).is_err());
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let cfg = tiny_cfg();
        let (model, mut store) = build(&cfg, 5);
        let before: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.value.data.clone()).collect();
        let ds = tiny_dataset(4, 4, 9);
        let tc = TrainConfig {
            epochs: 0,
            ..tiny_train_cfg()
        };
        train(&model, &mut store, &ds, &tc).unwrap();
        let after: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.value.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_bit_deterministic_and_clipped() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(4, 4, 9);
        let tc = TrainConfig {
            epochs: 2,
            ..tiny_train_cfg()
        };
        let run = || {
            let (model, mut store) = build(&cfg, 5);
            let report = train(&model, &mut store, &ds, &tc).unwrap();
            let params: Vec<Vec<f64>> =
                store.iter().map(|(_, p)| p.value.data.clone()).collect();
            (params, report)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(
            ra.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>(),
            rb.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>()
        );
        assert_eq!(ra.history.len(), 2);
        for n in &ra.post_clip_norms {
            assert!(*n <= tc.clip_norm + 1e-9);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let cfg = tiny_cfg();
        let (model, mut store) = build(&cfg, 6);
        let ds = tiny_dataset(4, 6, 11);
        let tc = TrainConfig {
            epochs: 5,
            ..tiny_train_cfg()
        };
        let report = train(&model, &mut store, &ds, &tc).unwrap();
        let first = report.history.first().unwrap().mean_loss;
        let last = report.history.last().unwrap().mean_loss;
        assert!(
            last < first,
            "loss did not improve: {first} -> {last} ({:?})",
            report.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>()
        );
    }
}

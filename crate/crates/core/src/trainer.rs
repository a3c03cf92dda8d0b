//! Toy joint-embedding model trained with the triplet losses.
//!
//! Each modality is a single linear projection followed by L2
//! normalization; similarity is the cosine (a dot product of unit vectors).
//! Gradients are derived by hand and checked against finite differences in
//! the tests.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::corpus::{self, Corpus, FeatureMatrix, Modality, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, Direction, EvalConfig, MSelection, MetricReport, RetrievalRun};
use crate::ngram::{self, CaptionScorer};
use crate::samloss::{
    self, anchor_margins, hinge_terms, LossParts, Negatives, SamConfig, SimBlock, Strategy,
    TripletAnchor, TripletBatch,
};
use crate::semrel::{self, SimMatrix};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ITMW";

/// Linear projections `σ_i(x) = W_img·x / ‖W_img·x‖` and likewise for captions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    dim: usize,
    img_dim: usize,
    cap_dim: usize,
    /// `dim × img_dim`, row-major.
    pub w_img: Vec<f64>,
    /// `dim × cap_dim`, row-major.
    pub w_cap: Vec<f64>,
}

impl EmbeddingModel {
    pub fn new(dim: usize, img_dim: usize, cap_dim: usize, w_img: Vec<f64>, w_cap: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!("joint dimension must be >= 2, got {dim}")));
        }
        if w_img.len() != dim * img_dim || w_cap.len() != dim * cap_dim {
            return Err(Error::Dimension(format!(
                "weights {}+{} do not fit {dim}x{img_dim} and {dim}x{cap_dim}",
                w_img.len(),
                w_cap.len()
            )));
        }
        if w_img.iter().chain(&w_cap).any(|w| !w.is_finite()) {
            return Err(Error::Integrity("non-finite model weight".into()));
        }
        Ok(EmbeddingModel {
            dim,
            img_dim,
            cap_dim,
            w_img,
            w_cap,
        })
    }

    /// Gaussian initialization with standard deviation `1/sqrt(input_dim)`.
    pub fn random(dim: usize, img_dim: usize, cap_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        };
        let w_img = draw(dim * img_dim, img_dim);
        let w_cap = draw(dim * cap_dim, cap_dim);
        EmbeddingModel::new(dim, img_dim, cap_dim, w_img, w_cap)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn img_dim(&self) -> usize {
        self.img_dim
    }

    pub fn cap_dim(&self) -> usize {
        self.cap_dim
    }

    fn weights(&self, modality: Modality) -> (&[f64], usize) {
        match modality {
            Modality::Image => (&self.w_img, self.img_dim),
            Modality::Caption => (&self.w_cap, self.cap_dim),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.w_img.len() + self.w_cap.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, self.dim as u32);
        binio::put_u32(&mut out, self.img_dim as u32);
        binio::put_u32(&mut out, self.cap_dim as u32);
        for w in self.w_img.iter().chain(&self.w_cap) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let dim = r.u32()? as usize;
        let img_dim = r.u32()? as usize;
        let cap_dim = r.u32()? as usize;
        let w_img = r.f64s(dim * img_dim)?;
        let w_cap = r.f64s(dim * cap_dim)?;
        r.finish()?;
        EmbeddingModel::new(dim, img_dim, cap_dim, w_img, w_cap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        EmbeddingModel::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

/// Projects one input; returns the unit embedding and the pre-normalization
/// norm. A zero projection maps to the first basis vector with norm 0.
fn project_one(w: &[f64], in_dim: usize, x: &[f32], out: &mut [f64]) -> f64 {
    let mut sq = 0.0;
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * in_dim..(r + 1) * in_dim];
        let mut acc = 0.0;
        for (a, &b) in row.iter().zip(x) {
            acc += a * b as f64;
        }
        *o = acc;
        sq += acc * acc;
    }
    let norm = sq.sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
    }
    norm
}

/// Unit-norm embeddings, row-major `rows × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn embed(model: &EmbeddingModel, features: &FeatureMatrix, modality: Modality) -> Result<Embeddings> {
    let (w, in_dim) = model.weights(modality);
    if features.dim() != in_dim {
        return Err(Error::Dimension(format!(
            "{modality:?} features have dimension {}, model expects {in_dim}",
            features.dim()
        )));
    }
    let mut data = vec![0.0; features.rows() * model.dim];
    for (i, out) in data.chunks_exact_mut(model.dim).enumerate() {
        project_one(w, in_dim, features.row(i), out);
    }
    Ok(Embeddings {
        rows: features.rows(),
        dim: model.dim,
        data,
    })
}

/// Input rows of one batch; entry `a` is the anchor pair (image a, caption a).
#[derive(Debug, Clone, Copy)]
pub struct BatchFeatures<'a> {
    pub images: &'a [&'a [f32]],
    pub captions: &'a [&'a [f32]],
}

struct Forward {
    img: Vec<f64>,
    img_norm: Vec<f64>,
    cap: Vec<f64>,
    cap_norm: Vec<f64>,
    sims: SimBlock,
}

fn forward(model: &EmbeddingModel, batch: &BatchFeatures<'_>) -> Forward {
    let b = batch.images.len();
    let d = model.dim;
    let mut img = vec![0.0; b * d];
    let mut cap = vec![0.0; b * d];
    let img_norm = img
        .chunks_exact_mut(d)
        .zip(batch.images)
        .map(|(o, x)| project_one(&model.w_img, model.img_dim, x, o))
        .collect();
    let cap_norm = cap
        .chunks_exact_mut(d)
        .zip(batch.captions)
        .map(|(o, x)| project_one(&model.w_cap, model.cap_dim, x, o))
        .collect();
    let mut values = vec![0.0; b * b];
    for a in 0..b {
        let ea = &img[a * d..(a + 1) * d];
        for c in 0..b {
            let ec = &cap[c * d..(c + 1) * d];
            values[a * b + c] = ea.iter().zip(ec).map(|(x, y)| x * y).sum();
        }
    }
    Forward {
        img,
        img_norm,
        cap,
        cap_norm,
        sims: SimBlock::new(b, values),
    }
}

/// Model similarity block ψ(i_a, c_b) for a batch.
pub fn batch_similarities(model: &EmbeddingModel, batch: &BatchFeatures<'_>) -> SimBlock {
    forward(model, batch).sims
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_img: Vec<f64>,
    pub w_cap: Vec<f64>,
}

/// Adds `coef` to ∂L/∂S at the entries touched by an active hinge.
fn push_hinge(grad_s: &mut [f64], b: usize, anchor: usize, neg: Negatives, active: (bool, bool), coef: f64) {
    if active.0 {
        grad_s[anchor * b + neg.caption] += coef;
        grad_s[anchor * b + anchor] -= coef;
    }
    if active.1 {
        grad_s[neg.image * b + anchor] += coef;
        grad_s[anchor * b + anchor] -= coef;
    }
}

/// Back-propagates ∂L/∂e through `e = u/‖u‖` and `u = W·x`.
fn backprop_modality(
    grad_e: &[f64],
    emb: &[f64],
    norms: &[f64],
    inputs: &[&[f32]],
    in_dim: usize,
    d: usize,
    grad_w: &mut [f64],
) {
    for (a, x) in inputs.iter().enumerate() {
        let norm = norms[a];
        if norm == 0.0 {
            continue;
        }
        let g = &grad_e[a * d..(a + 1) * d];
        let e = &emb[a * d..(a + 1) * d];
        let ge: f64 = g.iter().zip(e).map(|(p, q)| p * q).sum();
        for r in 0..d {
            let du = (g[r] - ge * e[r]) / norm;
            if du == 0.0 {
                continue;
            }
            let row = &mut grad_w[r * in_dim..(r + 1) * in_dim];
            for (gw, &xv) in row.iter_mut().zip(x.iter()) {
                *gw += du * xv as f64;
            }
        }
    }
}

/// Combined loss and its analytic gradient with respect to both projection
/// matrices. Negatives and consensus scores in `triplets` are held fixed.
/// Hinges exactly at zero are treated as inactive.
pub fn loss_and_grad(
    model: &EmbeddingModel,
    batch: &BatchFeatures<'_>,
    triplets: &TripletBatch,
    cfg: &SamConfig,
) -> Result<(LossParts, Gradients)> {
    let b = batch.images.len();
    if batch.captions.len() != b || triplets.len() != b {
        return Err(Error::Dimension(format!(
            "batch has {b} images, {} captions, {} anchors",
            batch.captions.len(),
            triplets.len()
        )));
    }
    triplets.validate()?;
    let d = model.dim;
    let fwd = forward(model, batch);
    let loss = samloss::sam_loss(triplets, &fwd.sims, cfg);

    let mut grad_s = vec![0.0; b * b];
    let sam_coef = cfg.sam_weight / b as f64;
    let tri_coef = if cfg.keep_original_triplet { 1.0 / b as f64 } else { 0.0 };
    for (a, anchor) in triplets.anchors.iter().enumerate() {
        if sam_coef != 0.0 {
            let (mi, mt) = anchor_margins(anchor, cfg);
            let (hi, ht) = hinge_terms(&fwd.sims.triplet(a, anchor.sam), mi, mt);
            push_hinge(&mut grad_s, b, a, anchor.sam, (hi > 0.0, ht > 0.0), sam_coef);
        }
        if tri_coef != 0.0 {
            let (hi, ht) = hinge_terms(&fwd.sims.triplet(a, anchor.hard), cfg.fixed_margin, cfg.fixed_margin);
            push_hinge(&mut grad_s, b, a, anchor.hard, (hi > 0.0, ht > 0.0), tri_coef);
        }
    }

    let mut grad_img_e = vec![0.0; b * d];
    let mut grad_cap_e = vec![0.0; b * d];
    for a in 0..b {
        for c in 0..b {
            let g = grad_s[a * b + c];
            if g == 0.0 {
                continue;
            }
            for r in 0..d {
                grad_img_e[a * d + r] += g * fwd.cap[c * d + r];
                grad_cap_e[c * d + r] += g * fwd.img[a * d + r];
            }
        }
    }
    let mut grads = Gradients {
        w_img: vec![0.0; model.w_img.len()],
        w_cap: vec![0.0; model.w_cap.len()],
    };
    backprop_modality(&grad_img_e, &fwd.img, &fwd.img_norm, batch.images, model.img_dim, d, &mut grads.w_img);
    backprop_modality(&grad_cap_e, &fwd.cap, &fwd.cap_norm, batch.captions, model.cap_dim, d, &mut grads.w_cap);
    Ok((loss, grads))
}

/// Loss only, with the same fixed negatives as [`loss_and_grad`].
pub fn batch_loss(model: &EmbeddingModel, batch: &BatchFeatures<'_>, triplets: &TripletBatch, cfg: &SamConfig) -> LossParts {
    samloss::sam_loss(triplets, &batch_similarities(model, batch), cfg)
}

/// Chooses negatives for a batch and looks up their consensus scores.
///
/// `phi(image, caption)` is evaluated for anchor image `image_ids[a]` against
/// the captions of the batch; `caption_ids[k]` is the caption paired with
/// batch image `k`.
pub fn build_triplets(
    sims: &SimBlock,
    strategy: Strategy,
    rng: &mut ChaCha8Rng,
    mut phi: impl FnMut(usize, usize) -> f64,
) -> Result<TripletBatch> {
    let hard = samloss::sample_negatives(sims, Strategy::Hard, rng)?;
    let sam = if strategy == Strategy::Hard {
        hard.clone()
    } else {
        samloss::sample_negatives(sims, strategy, rng)?
    };
    let anchors = (0..sims.size)
        .map(|a| TripletAnchor {
            sam: sam[a],
            hard: hard[a],
            phi_pos: phi(a, a),
            phi_neg_caption: phi(a, sam[a].caption),
            phi_neg_image: phi(a, sam[a].image),
        })
        .collect();
    Ok(TripletBatch { anchors })
}

/// Images, captions and features of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub images: FeatureMatrix,
    pub captions: FeatureMatrix,
}

impl Dataset {
    pub fn new(corpus: Corpus, images: FeatureMatrix, captions: FeatureMatrix) -> Result<Self> {
        if images.modality() != Modality::Image || captions.modality() != Modality::Caption {
            return Err(Error::InvalidParameter("feature modalities swapped".into()));
        }
        images.check_bound(&corpus)?;
        captions.check_bound(&corpus)?;
        Ok(Dataset {
            corpus,
            images,
            captions,
        })
    }

    pub fn subset(&self, image_indices: &[usize], split: Split) -> Result<Dataset> {
        let (corpus, caption_map) = self.corpus.subset(image_indices, split)?;
        Dataset::new(
            corpus,
            self.images.select_rows(image_indices),
            self.captions.select_rows(&caption_map),
        )
    }

    /// Keeps `ceil(fraction·|I|)` images (at least two) chosen by `rng`,
    /// each with all of its captions, in their original order.
    pub fn subsample(&self, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        check_fraction(fraction)?;
        let n = self.corpus.n_images();
        let keep = ((fraction * n as f64).ceil() as usize).max(2).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.truncate(keep);
        order.sort_unstable();
        self.subset(&order, self.corpus.split())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidParameter(format!("data_fraction must be in (0, 1], got {f}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate once `lr_decay_epoch` epochs
    /// have completed.
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub joint_dim: usize,
    pub eval_ks: Vec<usize>,
    /// Extended-set size for validation metrics; "k" follows the cut-off.
    pub eval_m: String,
    #[serde(skip)]
    pub sam: SamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.2,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 15,
            seed: 0,
            data_fraction: 1.0,
            joint_dim: 32,
            eval_ks: vec![1, 5, 10],
            eval_m: "k".into(),
            sam: SamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.data_fraction)?;
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lr_decay_factor must be > 0, got {}",
                self.lr_decay_factor
            )));
        }
        if self.joint_dim < 2 {
            return Err(Error::InvalidParameter(format!("joint_dim must be >= 2, got {}", self.joint_dim)));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::InvalidParameter("eval_ks must be non-empty positive cut-offs".into()));
        }
        self.eval_m.parse::<MSelection>()?;
        self.sam.validate()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval_ks.clone(),
            m: self.eval_m.parse().unwrap_or(MSelection::FollowK),
            gt_removed: false,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained initialization.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean total loss over the epoch's batches (0 for epoch 0).
    pub mean_loss: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the highest validation Nsum (earliest on ties).
    pub best: EmbeddingModel,
    pub best_epoch: usize,
    pub last: EmbeddingModel,
    pub history: Vec<EpochRecord>,
}

/// Frozen validation inputs: the dataset and its similarity matrix.
pub struct Validation<'a> {
    pub data: &'a Dataset,
    pub sim: &'a SimMatrix,
}

impl<'a> Validation<'a> {
    pub fn new(data: &'a Dataset, sim: &'a SimMatrix) -> Result<Self> {
        sim.check_bound(&data.corpus)?;
        Ok(Validation { data, sim })
    }
}

/// The deterministic batch schedule of one epoch: for each caption round
/// `r`, every image contributes its `r`-th caption (cycling for images with
/// fewer captions), images are shuffled, and consecutive chunks of
/// `batch_size` form the batches. Chunks smaller than two are dropped.
pub fn epoch_batches(corpus: &Corpus, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let rounds = corpus.gt_lists().iter().map(Vec::len).max().unwrap_or(0);
    let mut batches = Vec::new();
    for round in 0..rounds {
        let mut order: Vec<usize> = (0..corpus.n_images()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            batches.push(
                chunk
                    .iter()
                    .map(|&i| {
                        let g = corpus.gt(i);
                        (i, g[round % g.len()])
                    })
                    .collect(),
            );
        }
    }
    batches
}

struct Trainer<'a> {
    data: &'a Dataset,
    scorer: CaptionScorer,
    cfg: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    fn features(&self, pairs: &[(usize, usize)]) -> (Vec<&'a [f32]>, Vec<&'a [f32]>) {
        let imgs = pairs.iter().map(|&(i, _)| self.data.images.row(i)).collect();
        let caps = pairs.iter().map(|&(_, c)| self.data.captions.row(c)).collect();
        (imgs, caps)
    }

    fn triplets(&self, model: &EmbeddingModel, pairs: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<TripletBatch> {
        let (imgs, caps) = self.features(pairs);
        let sims = batch_similarities(model, &BatchFeatures { images: &imgs, captions: &caps });
        let use_phi = self.cfg.sam.uses_sam();
        build_triplets(&sims, self.cfg.sam.strategy, rng, |a, c| {
            if use_phi {
                self.scorer.phi(pairs[a].0, pairs[c].1)
            } else {
                0.0
            }
        })
    }

    /// One pass over `batches`; returns the mean batch loss.
    fn run_epoch(
        &self,
        model: &mut EmbeddingModel,
        batches: &[Vec<(usize, usize)>],
        lr: f64,
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (bi, pairs) in batches.iter().enumerate() {
            let triplets = self.triplets(model, pairs, rng)?;
            let (imgs, caps) = self.features(pairs);
            let batch = BatchFeatures { images: &imgs, captions: &caps };
            let (loss, grads) = loss_and_grad(model, &batch, &triplets, &self.cfg.sam)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: loss.total,
                });
            }
            for (w, g) in model.w_img.iter_mut().zip(&grads.w_img) {
                *w -= lr * g;
            }
            for (w, g) in model.w_cap.iter_mut().zip(&grads.w_cap) {
                *w -= lr * g;
            }
            if model.w_img.iter().chain(&model.w_cap).any(|w| !w.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }
            total += loss.total;
        }
        Ok(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 })
    }
}

/// Trains from a seeded initialization with plain gradient descent.
///
/// The training split is first subsampled to `data_fraction` of its images;
/// consensus scores use a df table built on that subsample only. After
/// every epoch the model is evaluated on `val`, and the epoch with the
/// highest Nsum is returned as `best`.
pub fn train(train_data: &Dataset, val: &Validation<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = if cfg.data_fraction < 1.0 {
        train_data.subsample(cfg.data_fraction, &mut rng)?
    } else {
        train_data.clone()
    };
    if data.corpus.n_images() < 2 {
        return Err(Error::InvalidParameter("training needs at least two images".into()));
    }
    let df = ngram::build_df(&data.corpus);
    let trainer = Trainer {
        data: &data,
        scorer: CaptionScorer::new(&data.corpus, &df),
        cfg,
    };
    let mut model = EmbeddingModel::random(cfg.joint_dim, data.images.dim(), data.captions.dim(), &mut rng)?;
    let eval_cfg = cfg.eval_config();

    let mut history = vec![EpochRecord {
        epoch: 0,
        learning_rate: 0.0,
        mean_loss: 0.0,
        report: evaluate(&model, val.data, val.sim, &eval_cfg)?,
    }];
    let mut best = (model.clone(), 0usize, history[0].report.nsum);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let batches = epoch_batches(&data.corpus, cfg.batch_size, &mut rng);
        let mean_loss = trainer.run_epoch(&mut model, &batches, lr, epoch, &mut rng)?;
        let report = evaluate(&model, val.data, val.sim, &eval_cfg)?;
        if report.nsum > best.2 {
            best = (model.clone(), epoch, report.nsum);
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
            report,
        });
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        history,
    })
}

/// Mean loss of `model` over a fixed list of batches with frozen negatives.
/// Used to observe the objective independently of the update order.
pub fn objective(
    model: &EmbeddingModel,
    data: &Dataset,
    batches: &[Vec<(usize, usize)>],
    triplets: &[TripletBatch],
    cfg: &SamConfig,
) -> f64 {
    let mut total = 0.0;
    for (pairs, t) in batches.iter().zip(triplets) {
        let imgs: Vec<&[f32]> = pairs.iter().map(|&(i, _)| data.images.row(i)).collect();
        let caps: Vec<&[f32]> = pairs.iter().map(|&(_, c)| data.captions.row(c)).collect();
        total += batch_loss(model, &BatchFeatures { images: &imgs, captions: &caps }, t, cfg).total;
    }
    total / batches.len().max(1) as f64
}

/// Freezes negatives and consensus scores for `batches` under `model`,
/// as the training loop would pick them.
pub fn freeze_triplets(
    model: &EmbeddingModel,
    data: &Dataset,
    batches: &[Vec<(usize, usize)>],
    cfg: &SamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TripletBatch>> {
    let df = ngram::build_df(&data.corpus);
    let scorer = CaptionScorer::new(&data.corpus, &df);
    batches
        .iter()
        .map(|pairs| {
            let imgs: Vec<&[f32]> = pairs.iter().map(|&(i, _)| data.images.row(i)).collect();
            let caps: Vec<&[f32]> = pairs.iter().map(|&(_, c)| data.captions.row(c)).collect();
            let sims = batch_similarities(model, &BatchFeatures { images: &imgs, captions: &caps });
            build_triplets(&sims, cfg.strategy, rng, |a, c| scorer.phi(pairs[a].0, pairs[c].1))
        })
        .collect()
}

/// Full image × caption cosine matrix of a model on a dataset.
pub fn score_matrix(model: &EmbeddingModel, data: &Dataset) -> Result<Vec<f64>> {
    let ei = embed(model, &data.images, Modality::Image)?;
    let ec = embed(model, &data.captions, Modality::Caption)?;
    let mut scores = vec![0.0; ei.rows * ec.rows];
    for i in 0..ei.rows {
        let a = ei.row(i);
        for j in 0..ec.rows {
            scores[i * ec.rows + j] = a.iter().zip(ec.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(scores)
}

/// Both-direction rankings from an image × caption score matrix.
pub fn runs_from_scores(
    scores: &[f64],
    n_images: usize,
    n_captions: usize,
    tag: &str,
) -> Result<(RetrievalRun, RetrievalRun)> {
    if scores.len() != n_images * n_captions {
        return Err(Error::Dimension("score matrix does not match corpus".into()));
    }
    let i2t = RetrievalRun::from_scores(
        Direction::I2t,
        n_captions,
        (0..n_images).map(|i| scores[i * n_captions..(i + 1) * n_captions].to_vec()),
        tag,
    )?;
    let t2i = RetrievalRun::from_scores(
        Direction::T2i,
        n_images,
        (0..n_captions).map(|j| (0..n_images).map(|i| scores[i * n_captions + j]).collect()),
        tag,
    )?;
    Ok((i2t, t2i))
}

/// Ranks the dataset with the model (ties by ascending index) and computes
/// the metric report. Read-only.
pub fn evaluate(model: &EmbeddingModel, data: &Dataset, sim: &SimMatrix, cfg: &EvalConfig) -> Result<MetricReport> {
    let scores = score_matrix(model, data)?;
    let (i2t, t2i) = runs_from_scores(&scores, data.corpus.n_images(), data.corpus.n_captions(), "linear")?;
    metrics::aggregate(&i2t, &t2i, &data.corpus, sim, cfg)
}

/// Parameters of the bundled synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub topics: usize,
    pub pairs_per_topic: usize,
    pub dim: usize,
    /// Share of each topic's images held out for validation.
    pub val_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            topics: 10,
            pairs_per_topic: 50,
            dim: 64,
            val_fraction: 0.2,
        }
    }
}

/// Builds the synthetic corpus and splits it into train and validation,
/// holding out the last `val_fraction` of every topic's images.
pub fn synth_split(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "val_fraction must be in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let (corpus, images, captions) = corpus::synth_corpus(spec.seed, spec.topics, spec.pairs_per_topic, spec.dim)?;
    let all = Dataset::new(corpus, images, captions)?;
    let per_topic_val = ((spec.pairs_per_topic as f64 * spec.val_fraction).round() as usize)
        .clamp(1, spec.pairs_per_topic.saturating_sub(1).max(1));
    if per_topic_val >= spec.pairs_per_topic {
        return Err(Error::InvalidParameter("synthetic corpus too small to split".into()));
    }
    // images are laid out pair-major: index = p * topics + t
    let cut = (spec.pairs_per_topic - per_topic_val) * spec.topics;
    let n = all.corpus.n_images();
    let train_idx: Vec<usize> = (0..cut).collect();
    let val_idx: Vec<usize> = (cut..n).collect();
    Ok((all.subset(&train_idx, Split::Train)?, all.subset(&val_idx, Split::Val)?))
}

/// Validation similarity matrix built from the validation split's own
/// document frequencies.
pub fn validation_matrix(val: &Dataset) -> SimMatrix {
    let df = ngram::build_df(&val.corpus);
    semrel::build_sim_matrix(&val.corpus, &df)
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic" or "files".
    pub source: String,
    pub seed: u64,
    pub topics: usize,
    pub pairs_per_topic: usize,
    pub dim: usize,
    pub val_fraction: f64,
    pub captions: Option<PathBuf>,
    pub train_image_features: Option<PathBuf>,
    pub train_caption_features: Option<PathBuf>,
    pub val_image_features: Option<PathBuf>,
    pub val_caption_features: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        DataConfig {
            source: "synthetic".into(),
            seed: s.seed,
            topics: s.topics,
            pairs_per_topic: s.pairs_per_topic,
            dim: s.dim,
            val_fraction: s.val_fraction,
            captions: None,
            train_image_features: None,
            train_caption_features: None,
            val_image_features: None,
            val_caption_features: None,
        }
    }
}

impl DataConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            topics: self.topics,
            pairs_per_topic: self.pairs_per_topic,
            dim: self.dim,
            val_fraction: self.val_fraction,
        }
    }

    /// Loads (train, val). Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self.source.as_str() {
            "synthetic" => synth_split(&self.synth_spec()),
            "files" => {
                let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("[data] {key} is required for source = \"files\"")))?;
                    Ok(if p.is_absolute() { p.clone() } else { base.join(p) })
                };
                let captions = need(&self.captions, "captions")?;
                let load_split = |split: Split, img: &Option<PathBuf>, cap: &Option<PathBuf>, prefix: &str| -> Result<Dataset> {
                    let corpus = corpus::load_corpus(&captions, split)?;
                    let images = corpus::load_features(need(img, &format!("{prefix}_image_features"))?, &corpus, Modality::Image)?;
                    let caps = corpus::load_features(need(cap, &format!("{prefix}_caption_features"))?, &corpus, Modality::Caption)?;
                    Dataset::new(corpus, images, caps)
                };
                Ok((
                    load_split(Split::Train, &self.train_image_features, &self.train_caption_features, "train")?,
                    load_split(Split::Val, &self.val_image_features, &self.val_caption_features, "val")?,
                ))
            }
            other => Err(Error::Config(format!("unknown [data] source {other:?}"))),
        }
    }
}

/// Trainer config file with `[train]`, `[sam]` and `[data]` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sam: SamConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.sam = cfg.sam.clone();
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = binio::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        RunConfig::from_toml_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

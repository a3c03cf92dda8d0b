//! Shared fixtures for the benchmarks.

use itm_core::corpus::{self, Corpus, FeatureMatrix};
use itm_core::samloss::{SamConfig, TripletBatch};
use itm_core::trainer::{self, BatchFeatures, EmbeddingModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Synthetic corpus with at least `images` images (five captions each).
pub fn synth(images: usize) -> (Corpus, FeatureMatrix, FeatureMatrix) {
    let topics = images.clamp(1, 10);
    corpus::synth_corpus(11, topics, images.div_ceil(topics), 32).unwrap()
}

/// One training batch: a random model, the first `b` image-caption pairs
/// of a synthetic corpus and frozen triplets.
pub struct BatchFixture {
    pub model: EmbeddingModel,
    pub images: Vec<Vec<f32>>,
    pub captions: Vec<Vec<f32>>,
    pub triplets: TripletBatch,
    pub cfg: SamConfig,
}

pub fn slices(rows: &[Vec<f32>]) -> Vec<&[f32]> {
    rows.iter().map(Vec::as_slice).collect()
}

impl BatchFixture {
    pub fn new(b: usize, joint_dim: usize) -> Self {
        let (c, img, cap) = synth(b);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EmbeddingModel::random(joint_dim, img.dim(), cap.dim(), &mut rng).unwrap();
        let images: Vec<Vec<f32>> = (0..b).map(|i| img.row(i).to_vec()).collect();
        let captions: Vec<Vec<f32>> = (0..b).map(|i| cap.row(c.gt(i)[0]).to_vec()).collect();
        let cfg = SamConfig::default();
        let (ir, cr) = (slices(&images), slices(&captions));
        let sims = trainer::batch_similarities(&model, &BatchFeatures { images: &ir, captions: &cr });
        let triplets =
            trainer::build_triplets(&sims, cfg.strategy, &mut rng, |a, k| ((a + 2 * k) % 7) as f64).unwrap();
        BatchFixture {
            model,
            images,
            captions,
            triplets,
            cfg,
        }
    }
}

//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the scoring code under test: tokenization,
//! n-gram counting, document frequencies and the CIDEr-D formula are all
//! written out directly with plain maps.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use itm_core::corpus::{self, CaptionRecord, Corpus, Split};
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_corpus() -> Corpus {
    corpus::load_corpus(repo_root().join("data/toy_corpus.json"), Split::Test).unwrap()
}

pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() || c.is_ascii_digit() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// n-gram counts keyed by the space-joined tokens.
pub fn grams(tokens: &[String], n: usize) -> HashMap<String, f64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

pub struct OracleDf {
    pub n_images: usize,
    pub df: Vec<HashMap<String, u32>>,
}

pub fn oracle_df(corpus: &Corpus) -> OracleDf {
    let mut df = vec![HashMap::new(); 4];
    for i in 0..corpus.n_images() {
        for (n, table) in df.iter_mut().enumerate() {
            let mut present = HashSet::new();
            for &c in corpus.gt(i) {
                for g in grams(&words(&corpus.captions()[c].raw_text), n + 1).into_keys() {
                    present.insert(g);
                }
            }
            for g in present {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    OracleDf {
        n_images: corpus.n_images(),
        df,
    }
}

fn weights(tokens: &[String], n: usize, df: &OracleDf) -> HashMap<String, f64> {
    grams(tokens, n)
        .into_iter()
        .map(|(g, tf)| {
            let d = df.df[n - 1].get(&g).copied().unwrap_or(0).max(1) as f64;
            let idf = (df.n_images as f64).ln() - d.ln();
            (g, tf * idf)
        })
        .collect()
}

fn norm(v: &HashMap<String, f64>) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// Direct CIDEr-D: mean over orders 1..4 and references of the clipped
/// tf-idf cosine with a Gaussian length penalty, times ten.
pub fn oracle_cider(candidate: &str, refs: &[&str], df: &OracleDf) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let ct = words(candidate);
    let mut total = 0.0;
    for r in refs {
        let rt = words(r);
        let delta = ct.len() as f64 - rt.len() as f64;
        let penalty = (-(delta * delta) / 72.0).exp();
        for n in 1..=4 {
            let cv = weights(&ct, n, df);
            let rv = weights(&rt, n, df);
            let (nc, nr) = (norm(&cv), norm(&rv));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, &c) in &cv {
                if let Some(&r) = rv.get(g) {
                    dot += c.min(r) * r;
                }
            }
            total += dot / (nc * nr) * penalty;
        }
    }
    total / 4.0 / refs.len() as f64 * 10.0
}

/// Row-major |I| × |C| matrix of oracle scores.
pub fn oracle_matrix(corpus: &Corpus) -> Vec<f64> {
    let df = oracle_df(corpus);
    let texts: Vec<&str> = corpus.captions().iter().map(|c| c.raw_text.as_str()).collect();
    let mut out = Vec::with_capacity(corpus.n_images() * corpus.n_captions());
    for i in 0..corpus.n_images() {
        let refs: Vec<&str> = corpus.gt(i).iter().map(|&c| texts[c]).collect();
        for t in &texts {
            out.push(oracle_cider(t, &refs, &df));
        }
    }
    out
}

/// Builds a corpus from caption groups, one group per image.
pub fn corpus_from(groups: &[Vec<String>]) -> Corpus {
    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut lists = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        images.push(format!("img{i}"));
        let mut list = Vec::new();
        for t in g {
            list.push(captions.len());
            captions.push(CaptionRecord {
                raw_text: t.clone(),
                image_index: i,
                caption_id: captions.len().to_string(),
            });
        }
        lists.push(list);
    }
    Corpus::new(images, captions, lists, Split::Test).unwrap()
}

/// Random small corpus over a `vocab`-word vocabulary.
pub fn random_groups<R: Rng>(rng: &mut R, max_images: usize, vocab: usize) -> Vec<Vec<String>> {
    let n_images = rng.gen_range(1..=max_images);
    (0..n_images)
        .map(|_| {
            let n_caps = rng.gen_range(1..=5);
            (0..n_caps)
                .map(|_| {
                    let len = rng.gen_range(1..=9);
                    (0..len)
                        .map(|_| format!("w{}", rng.gen_range(0..vocab)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect()
        })
        .collect()
}

pub mod gradcheck {
    use itm_core::samloss::{self, SamConfig, Strategy, TripletBatch};
    use itm_core::trainer::{self, BatchFeatures, EmbeddingModel};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;

    pub struct Case {
        pub model: EmbeddingModel,
        pub images: Vec<Vec<f32>>,
        pub captions: Vec<Vec<f32>>,
        pub triplets: TripletBatch,
        pub cfg: SamConfig,
    }

    impl Case {
        pub fn loss(&self, model: &EmbeddingModel) -> f64 {
            let imgs: Vec<&[f32]> = self.images.iter().map(Vec::as_slice).collect();
            let caps: Vec<&[f32]> = self.captions.iter().map(Vec::as_slice).collect();
            trainer::batch_loss(model, &BatchFeatures { images: &imgs, captions: &caps }, &self.triplets, &self.cfg).total
        }

        /// Smallest distance of any active hinge argument from its kink.
        pub fn kink_distance(&self) -> f64 {
            let imgs: Vec<&[f32]> = self.images.iter().map(Vec::as_slice).collect();
            let caps: Vec<&[f32]> = self.captions.iter().map(Vec::as_slice).collect();
            let sims = trainer::batch_similarities(&self.model, &BatchFeatures { images: &imgs, captions: &caps });
            let mut closest = f64::INFINITY;
            for (a, anchor) in self.triplets.anchors.iter().enumerate() {
                let (mi, mt) = samloss::anchor_margins(anchor, &self.cfg);
                let (hi, ht) = samloss::hinge_terms(&sims.triplet(a, anchor.sam), mi, mt);
                let (fi, ft) = samloss::hinge_terms(&sims.triplet(a, anchor.hard), self.cfg.fixed_margin, self.cfg.fixed_margin);
                for h in [hi, ht, fi, ft] {
                    closest = closest.min(h.abs());
                }
            }
            closest
        }
    }

    /// Random batch with random consensus scores; negatives are chosen by
    /// the requested strategy under the random model.
    pub fn random_case(rng: &mut ChaCha8Rng, strategy: Strategy, tau: f64, variant: usize) -> Case {
        let (d, di, dc) = (rng.gen_range(2..6), rng.gen_range(2..7), rng.gen_range(2..7));
        let b = rng.gen_range(2..7);
        let model = EmbeddingModel::random(d, di, dc, rng).unwrap();
        let mut vecs = |n: usize, dim: usize| -> Vec<Vec<f32>> {
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
        };
        let images = vecs(b, di);
        let captions = vecs(b, dc);
        let phi: Vec<f64> = (0..b * b).map(|_| rng.gen_range(0.0..10.0)).collect();
        let cfg = SamConfig {
            tau,
            strategy,
            // 0: adaptive + fixed, 1: adaptive only, 2: fixed only
            sam_weight: if variant == 2 { 0.0 } else { rng.gen_range(0.5..5.0) },
            keep_original_triplet: variant != 1,
            clamp_negative_margin: rng.gen_bool(0.5),
            ..SamConfig::default()
        };
        let imgs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let caps: Vec<&[f32]> = captions.iter().map(Vec::as_slice).collect();
        let sims = trainer::batch_similarities(&model, &BatchFeatures { images: &imgs, captions: &caps });
        let triplets = trainer::build_triplets(&sims, strategy, rng, |a, c| phi[a * b + c]).unwrap();
        Case {
            model,
            images,
            captions,
            triplets,
            cfg,
        }
    }

    /// Norm-wise relative error between the analytic gradient and central
    /// differences over every weight.
    pub fn relative_error(case: &Case) -> f64 {
        let imgs: Vec<&[f32]> = case.images.iter().map(Vec::as_slice).collect();
        let caps: Vec<&[f32]> = case.captions.iter().map(Vec::as_slice).collect();
        let (_, grads) =
            trainer::loss_and_grad(&case.model, &BatchFeatures { images: &imgs, captions: &caps }, &case.triplets, &case.cfg).unwrap();
        let analytic: Vec<f64> = grads.w_img.iter().chain(&grads.w_cap).copied().collect();
        let n_img = case.model.w_img.len();
        let mut numeric = Vec::with_capacity(analytic.len());
        for p in 0..analytic.len() {
            let mut plus = case.model.clone();
            let mut minus = case.model.clone();
            if p < n_img {
                plus.w_img[p] += STEP;
                minus.w_img[p] -= STEP;
            } else {
                plus.w_cap[p - n_img] += STEP;
                minus.w_cap[p - n_img] -= STEP;
            }
            numeric.push((case.loss(&plus) - case.loss(&minus)) / (2.0 * STEP));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = scale(&analytic).max(scale(&numeric));
        if denom == 0.0 {
            0.0
        } else {
            diff / denom
        }
    }
}

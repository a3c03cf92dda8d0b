//! Image/caption corpora, ground-truth groupings and precomputed features.
//!
//! Images and captions are addressed by dense 0-based indices assigned in
//! file order. Every downstream matrix (similarities, rankings, features)
//! is keyed on these indices.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub raw_text: String,
    pub image_index: usize,
    pub caption_id: String,
}

/// An immutable image/caption corpus with its ground-truth mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    images: Vec<String>,
    captions: Vec<CaptionRecord>,
    gt: Vec<Vec<usize>>,
    split: Split,
}

impl Corpus {
    /// Builds a corpus from per-image caption groups, preserving order.
    ///
    /// Caption indices are assigned consecutively: all captions of the first
    /// image, then the second, and so on.
    pub fn from_groups<I, C>(split: Split, groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, C)>,
        C: IntoIterator<Item = (String, String)>,
    {
        let mut images = Vec::new();
        let mut captions = Vec::new();
        let mut gt = Vec::new();
        for (image_id, caps) in groups {
            let image_index = images.len();
            let mut list = Vec::new();
            for (caption_id, text) in caps {
                list.push(captions.len());
                captions.push(CaptionRecord {
                    raw_text: text.nfc().collect(),
                    image_index,
                    caption_id,
                });
            }
            images.push(image_id);
            gt.push(list);
        }
        Corpus::new(images, captions, gt, split)
    }

    /// Validates and assembles a corpus from its parts.
    pub fn new(
        images: Vec<String>,
        captions: Vec<CaptionRecord>,
        gt: Vec<Vec<usize>>,
        split: Split,
    ) -> Result<Self> {
        if gt.len() != images.len() {
            return Err(Error::Integrity(format!(
                "{} images but {} ground-truth lists",
                images.len(),
                gt.len()
            )));
        }
        let mut seen_images = HashSet::new();
        for id in &images {
            if !seen_images.insert(id.as_str()) {
                return Err(Error::Integrity(format!("duplicate image id {id:?}")));
            }
        }
        let mut owner = vec![None; captions.len()];
        for (image, list) in gt.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Integrity(format!(
                    "image {:?} has no captions",
                    images[image]
                )));
            }
            for &c in list {
                let rec = captions.get(c).ok_or_else(|| {
                    Error::Integrity(format!("caption index {c} out of range"))
                })?;
                if rec.image_index != image {
                    return Err(Error::Integrity(format!(
                        "caption {:?} listed under image {image} but belongs to {}",
                        rec.caption_id, rec.image_index
                    )));
                }
                if owner[c].replace(image).is_some() {
                    return Err(Error::Integrity(format!(
                        "caption {:?} listed twice",
                        rec.caption_id
                    )));
                }
            }
        }
        for (c, rec) in captions.iter().enumerate() {
            if owner[c].is_none() {
                return Err(Error::Integrity(format!(
                    "caption {:?} references image index {} which does not list it",
                    rec.caption_id, rec.image_index
                )));
            }
            if rec.raw_text.trim().is_empty() {
                return Err(Error::Integrity(format!(
                    "caption {:?} is empty",
                    rec.caption_id
                )));
            }
        }
        Ok(Corpus {
            images,
            captions,
            gt,
            split,
        })
    }

    pub fn images(&self) -> &[String] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_captions(&self) -> usize {
        self.captions.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Ground-truth caption indices of `image`.
    pub fn gt(&self, image: usize) -> &[usize] {
        &self.gt[image]
    }

    pub fn gt_lists(&self) -> &[Vec<usize>] {
        &self.gt
    }

    pub fn image_of(&self, caption: usize) -> usize {
        self.captions[caption].image_index
    }

    /// Restricts the corpus to the given images (in the given order) and
    /// reindexes densely. Returns the new corpus and, for every new caption
    /// index, the caption index it came from.
    pub fn subset(&self, image_indices: &[usize], split: Split) -> Result<(Corpus, Vec<usize>)> {
        let mut caption_map = Vec::new();
        let groups: Vec<(String, Vec<(String, String)>)> = image_indices
            .iter()
            .map(|&i| {
                let caps = self.gt[i]
                    .iter()
                    .map(|&c| {
                        caption_map.push(c);
                        let rec = &self.captions[c];
                        (rec.caption_id.clone(), rec.raw_text.clone())
                    })
                    .collect();
                (self.images[i].clone(), caps)
            })
            .collect();
        Ok((Corpus::from_groups(split, groups)?, caption_map))
    }
}

#[derive(Deserialize)]
struct KarpathyFile {
    images: Vec<KarpathyImage>,
}

#[derive(Deserialize)]
struct KarpathyImage {
    #[serde(alias = "filename")]
    id: serde_json::Value,
    split: String,
    sentences: Vec<KarpathySentence>,
}

#[derive(Deserialize)]
struct KarpathySentence {
    raw: String,
    sentid: serde_json::Value,
    #[serde(default, alias = "imgid")]
    image_id: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct KarpathyFileOut<'a> {
    images: Vec<KarpathyImageOut<'a>>,
}

#[derive(Serialize)]
struct KarpathyImageOut<'a> {
    id: &'a str,
    split: &'a str,
    sentences: Vec<KarpathySentenceOut<'a>>,
}

#[derive(Serialize)]
struct KarpathySentenceOut<'a> {
    raw: &'a str,
    sentid: serde_json::Value,
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" | "restval" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

/// Parses a caption file in the Karpathy-split JSON layout, keeping only
/// images tagged with `split` ("restval" counts as train).
pub fn parse_corpus(text: &str, split: Split) -> Result<Corpus> {
    let file: KarpathyFile = serde_json::from_str(text).map_err(|e| Error::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let all_ids: HashSet<String> = file.images.iter().map(|im| value_text(&im.id)).collect();
    let mut groups = Vec::new();
    for image in file.images {
        let image_id = value_text(&image.id);
        let image_split = parse_split(&image.split).ok_or_else(|| {
            Error::Integrity(format!(
                "image {image_id:?} has unknown split {:?}",
                image.split
            ))
        })?;
        for s in &image.sentences {
            if let Some(owner) = &s.image_id {
                let owner = value_text(owner);
                if owner != image_id {
                    let caption_id = value_text(&s.sentid);
                    return Err(Error::Integrity(if all_ids.contains(&owner) {
                        format!("caption {caption_id} references image {owner:?} but is nested under {image_id:?}")
                    } else {
                        format!("caption {caption_id} references unknown image {owner:?}")
                    }));
                }
            }
        }
        if image_split != split {
            continue;
        }
        let caps: Vec<(String, String)> = image
            .sentences
            .into_iter()
            .map(|s| (value_text(&s.sentid), s.raw))
            .collect();
        groups.push((image_id, caps));
    }
    Corpus::from_groups(split, groups)
}

pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = binio::read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Integrity(format!("{}: not UTF-8: {e}", path.display())))?;
    parse_corpus(text, split)
}

/// Serializes the corpus back into the Karpathy layout.
pub fn corpus_to_json(corpus: &Corpus) -> String {
    let images = corpus
        .images
        .iter()
        .zip(&corpus.gt)
        .map(|(id, list)| KarpathyImageOut {
            id,
            split: corpus.split.as_str(),
            sentences: list
                .iter()
                .map(|&c| {
                    let rec = &corpus.captions[c];
                    let sentid = rec
                        .caption_id
                        .parse::<i64>()
                        .map(serde_json::Value::from)
                        .unwrap_or_else(|_| serde_json::Value::from(rec.caption_id.clone()));
                    KarpathySentenceOut {
                        raw: &rec.raw_text,
                        sentid,
                    }
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&KarpathyFileOut { images }).expect("corpus serializes")
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), corpus_to_json(corpus).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    fn side(self, corpus: &Corpus) -> usize {
        match self {
            Modality::Image => corpus.n_images(),
            Modality::Caption => corpus.n_captions(),
        }
    }
}

/// Row-major feature matrix, one row per image or caption.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    modality: Modality,
}

const FEATURE_MAGIC: &[u8; 4] = b"ITMF";

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, modality: Modality) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if dim == 0 {
            return Err(Error::Dimension("feature dimension is zero".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(FeatureMatrix {
            rows,
            dim,
            data,
            modality,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
            modality: self.modality,
        }
    }

    /// Checks that this matrix has one row per item of `modality` in `corpus`.
    pub fn check_bound(&self, corpus: &Corpus) -> Result<()> {
        let expected = self.modality.side(corpus);
        if self.rows != expected {
            return Err(Error::RowCount {
                expected,
                found: self.rows,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        binio::put_u32(&mut out, self.rows as u32);
        binio::put_u32(&mut out, self.dim as u32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], modality: Modality) -> Result<Self> {
        let mut r = Reader::new(bytes, "feature file");
        r.magic(FEATURE_MAGIC)?;
        let rows = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f32s(rows * dim)?;
        r.finish()?;
        FeatureMatrix::new(rows, dim, data, modality)
    }
}

pub fn load_features(
    path: impl AsRef<Path>,
    corpus: &Corpus,
    modality: Modality,
) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = binio::read_file(path)?;
    // Row count is checked before the payload so a mismatched file fails fast.
    let mut r = Reader::new(&bytes, "feature file");
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u32()? as usize;
    let expected = modality.side(corpus);
    if rows != expected {
        return Err(Error::RowCount {
            expected,
            found: rows,
        });
    }
    FeatureMatrix::from_bytes(&bytes, modality)
}

pub fn write_features(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &features.to_bytes())
}

const SYLLABLE_ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Words per role in a topic's pool.
const ROLE_POOL: usize = 4;
/// Words per role an individual image draws its captions from.
const ROLE_PICK: usize = 2;
pub const CAPTIONS_PER_IMAGE: usize = 5;
const OFF_PROFILE_RATE: f64 = 0.15;
const FEATURE_NOISE: f64 = 0.35;

struct Topic {
    scene: String,
    nouns: Vec<String>,
    adjectives: Vec<String>,
    verbs: Vec<String>,
    objects: Vec<String>,
    center: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng, topic: usize, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(SYLLABLE_ONSETS.choose(rng).unwrap());
            w.push_str(SYLLABLE_VOWELS.choose(rng).unwrap());
        }
        // the topic suffix keeps vocabularies of different topics disjoint
        w.push_str(&topic.to_string());
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn project(m: &[f64], z: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|r| m[r * dim..(r + 1) * dim].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates a deterministic synthetic corpus with `topics × pairs_per_topic`
/// images, five captions each, and matching image/caption features.
///
/// Every topic owns a pool of pseudo-words, disjoint across topics. Each
/// image picks a subset of its topic's pool; its captions are sampled from
/// that subset (occasionally from the wider topic pool) and always mention
/// the topic's scene word. Features come from a shared latent space: the
/// topic center plus the mean latent of the words involved, pushed through
/// a modality-specific random linear map and perturbed with Gaussian noise.
pub fn synth_corpus(
    seed: u64,
    topics: usize,
    pairs_per_topic: usize,
    dim: usize,
) -> Result<(Corpus, FeatureMatrix, FeatureMatrix)> {
    if topics == 0 || pairs_per_topic == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "synth_corpus counts must all be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img_map = gaussian(&mut rng, dim * dim, 1.0 / (dim as f64).sqrt());
    let cap_map = gaussian(&mut rng, dim * dim, 1.0 / (dim as f64).sqrt());

    let mut taken = HashSet::new();
    let mut word_latent = std::collections::HashMap::new();
    let mut pool = Vec::with_capacity(topics);
    for t in 0..topics {
        let mut role = |rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..ROLE_POOL).map(|_| pseudo_word(rng, t, &mut taken)).collect()
        };
        let nouns = role(&mut rng);
        let adjectives = role(&mut rng);
        let verbs = role(&mut rng);
        let objects = role(&mut rng);
        let scene = pseudo_word(&mut rng, t, &mut taken);
        for w in nouns.iter().chain(&adjectives).chain(&verbs).chain(&objects) {
            word_latent.insert(w.clone(), gaussian(&mut rng, dim, 1.0));
        }
        let center = gaussian(&mut rng, dim, 1.5);
        pool.push(Topic {
            scene,
            nouns,
            adjectives,
            verbs,
            objects,
            center,
        });
    }

    let mut groups = Vec::with_capacity(topics * pairs_per_topic);
    let mut img_feats = Vec::with_capacity(topics * pairs_per_topic * dim);
    let mut cap_feats = Vec::with_capacity(topics * pairs_per_topic * CAPTIONS_PER_IMAGE * dim);
    let mut caption_counter = 0usize;
    let latent_of = |words: &[&String], center: &[f64]| -> Vec<f64> {
        let mut z = center.to_vec();
        for w in words {
            for (zi, li) in z.iter_mut().zip(&word_latent[*w]) {
                *zi += li / words.len() as f64;
            }
        }
        z
    };
    for p in 0..pairs_per_topic {
        for (t, topic) in pool.iter().enumerate() {
            let pick = |rng: &mut ChaCha8Rng, from: &[String], n: usize| -> Vec<String> {
                from.choose_multiple(rng, n).cloned().collect()
            };
            let noun = pick(&mut rng, &topic.nouns, 1);
            let adjs = pick(&mut rng, &topic.adjectives, ROLE_PICK);
            let verbs = pick(&mut rng, &topic.verbs, ROLE_PICK);
            let objs = pick(&mut rng, &topic.objects, ROLE_PICK);

            let profile: Vec<&String> = noun.iter().chain(&adjs).chain(&verbs).chain(&objs).collect();
            let z_img = latent_of(&profile, &topic.center);
            let x_img = project(&img_map, &z_img, dim);
            let noise = gaussian(&mut rng, dim, FEATURE_NOISE);
            img_feats.extend(x_img.iter().zip(&noise).map(|(a, b)| (a + b) as f32));

            let mut caps = Vec::with_capacity(CAPTIONS_PER_IMAGE);
            for _ in 0..CAPTIONS_PER_IMAGE {
                let draw = |rng: &mut ChaCha8Rng, own: &[String], wide: &[String]| -> String {
                    if rng.gen_bool(OFF_PROFILE_RATE) {
                        wide.choose(rng).unwrap().clone()
                    } else {
                        own.choose(rng).unwrap().clone()
                    }
                };
                let adj = draw(&mut rng, &adjs, &topic.adjectives);
                let n = draw(&mut rng, &noun, &topic.nouns);
                let v = draw(&mut rng, &verbs, &topic.verbs);
                let o = draw(&mut rng, &objs, &topic.objects);
                let text = if rng.gen_bool(0.5) {
                    format!("{adj} {n} {v} {o} {}", topic.scene)
                } else {
                    format!("{n} {v} {adj} {o} {}", topic.scene)
                };
                let words = [&adj, &n, &v, &o];
                let z_cap = latent_of(&words, &topic.center);
                let x_cap = project(&cap_map, &z_cap, dim);
                let noise = gaussian(&mut rng, dim, FEATURE_NOISE);
                cap_feats.extend(x_cap.iter().zip(&noise).map(|(a, b)| (a + b) as f32));
                caps.push((caption_counter.to_string(), text));
                caption_counter += 1;
            }
            groups.push((format!("synth-{t:03}-{p:05}"), caps));
        }
    }
    let corpus = Corpus::from_groups(Split::Train, groups)?;
    let images = FeatureMatrix::new(corpus.n_images(), dim, img_feats, Modality::Image)?;
    let captions = FeatureMatrix::new(corpus.n_captions(), dim, cap_feats, Modality::Caption)?;
    Ok((corpus, images, captions))
}

/// Topic of a synthetic image id (`synth-TTT-PPPPP`), if it is one.
pub fn synth_topic(image_id: &str) -> Option<usize> {
    image_id.strip_prefix("synth-")?.split('-').next()?.parse().ok()
}

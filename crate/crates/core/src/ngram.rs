//! Tokenization, n-gram statistics and the CIDEr-D consensus score.
//!
//! Two scoring paths share one arithmetic:
//!
//! * [`cider_d`] works directly on [`NgramProfile`]s and a [`DfTable`].
//! * [`CaptionScorer`] interns every n-gram of a corpus once, caches the
//!   tf-idf vector of each caption and scores (caption, reference set)
//!   pairs without allocating. The similarity-matrix builder and the
//!   trainer use it.
//!
//! Both accumulate every sum in ascending n-gram order, so results are
//! reproducible bit-for-bit across runs and thread schedules.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{self, Reader};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Standard deviation of the Gaussian length penalty.
pub const LENGTH_SIGMA: f64 = 6.0;
/// Final scale factor; a perfect match scores this much.
pub const CIDER_SCALE: f64 = 10.0;
/// Joins the tokens of an n-gram into a single key.
pub const NGRAM_SEPARATOR: char = '\u{1f}';
pub const SCORER_NAME: &str = "cider-d";
pub const TOKENIZER_TAG: &str = "lower-alnum-v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases, replaces everything outside `[a-z0-9]` by a space and splits
/// on whitespace.
pub fn tokenize(raw: &str) -> TokenSeq {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    TokenSeq {
        tokens: cleaned.split_whitespace().map(str::to_owned).collect(),
    }
}

/// Joins tokens into the n-gram key used by profiles and document frequencies.
pub fn ngram_key<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut key = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            key.push(NGRAM_SEPARATOR);
        }
        key.push_str(t.as_ref());
    }
    key
}

/// Per-order n-gram counts of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NgramProfile {
    orders: [HashMap<String, u32>; MAX_ORDER],
    length: usize,
}

impl NgramProfile {
    /// Counts at order `n` (1-based).
    pub fn counts(&self, n: usize) -> &HashMap<String, u32> {
        &self.orders[n - 1]
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// N-grams of order `n` with counts, sorted by key.
    fn sorted(&self, n: usize) -> Vec<(&str, u32)> {
        let mut v: Vec<_> = self.orders[n - 1].iter().map(|(k, &c)| (k.as_str(), c)).collect();
        v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        v
    }
}

pub fn profile(tokens: &TokenSeq) -> NgramProfile {
    let mut orders: [HashMap<String, u32>; MAX_ORDER] = Default::default();
    for (i, order) in orders.iter_mut().enumerate() {
        let n = i + 1;
        for window in tokens.tokens.windows(n) {
            *order.entry(ngram_key(window)).or_insert(0) += 1;
        }
    }
    NgramProfile {
        orders,
        length: tokens.len(),
    }
}

pub fn profile_text(raw: &str) -> NgramProfile {
    profile(&tokenize(raw))
}

/// Document frequencies: for every n-gram, the number of images whose
/// reference set contains it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfTable {
    orders: [HashMap<String, u32>; MAX_ORDER],
    corpus_size: u32,
}

const DF_MAGIC: &[u8; 4] = b"ITDF";

impl DfTable {
    pub fn corpus_size(&self) -> u32 {
        self.corpus_size
    }

    /// Document frequency of `gram` at order `n`; 0 when unseen.
    pub fn df(&self, n: usize, gram: &str) -> u32 {
        self.orders[n - 1].get(gram).copied().unwrap_or(0)
    }

    pub fn entries(&self, n: usize) -> &HashMap<String, u32> {
        &self.orders[n - 1]
    }

    /// `ln(corpus_size) - ln(max(df, 1))`.
    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        idf_from(self.corpus_size, self.df(n, gram))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DF_MAGIC);
        binio::put_u32(&mut out, self.corpus_size);
        for order in &self.orders {
            let mut entries: Vec<_> = order.iter().collect();
            entries.sort_unstable_by(|a, b| a.0.cmp(b.0));
            binio::put_u32(&mut out, entries.len() as u32);
            for (gram, &df) in entries {
                binio::put_u32(&mut out, gram.len() as u32);
                out.extend_from_slice(gram.as_bytes());
                binio::put_u32(&mut out, df);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "df table");
        r.magic(DF_MAGIC)?;
        let corpus_size = r.u32()?;
        let mut orders: [HashMap<String, u32>; MAX_ORDER] = Default::default();
        for (i, order) in orders.iter_mut().enumerate() {
            let n = i + 1;
            let count = r.u32()? as usize;
            order.reserve(count.min(bytes.len()));
            for _ in 0..count {
                let len = r.u32()? as usize;
                let gram = std::str::from_utf8(r.take(len)?)
                    .map_err(|e| Error::Integrity(format!("df n-gram is not UTF-8: {e}")))?
                    .to_owned();
                let df = r.u32()?;
                if gram.split(NGRAM_SEPARATOR).count() != n {
                    return Err(Error::Integrity(format!(
                        "n-gram {gram:?} stored under order {n}"
                    )));
                }
                if df == 0 || df > corpus_size {
                    return Err(Error::Integrity(format!(
                        "df {df} of {gram:?} outside 1..={corpus_size}"
                    )));
                }
                if order.insert(gram, df).is_some() {
                    return Err(Error::Integrity("duplicate n-gram in df table".into()));
                }
            }
        }
        r.finish()?;
        Ok(DfTable {
            orders,
            corpus_size,
        })
    }

    /// Hex SHA-256 of the serialized table; identifies the statistics a
    /// similarity matrix was built from.
    pub fn checksum(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DfTable::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[inline]
fn idf_from(corpus_size: u32, df: u32) -> f64 {
    (corpus_size as f64).ln() - (df.max(1) as f64).ln()
}

/// Counts, per n-gram, the images whose captions contain it at least once.
pub fn build_df(corpus: &Corpus) -> DfTable {
    build_df_from_profiles(corpus, &corpus_profiles(corpus))
}

pub fn corpus_profiles(corpus: &Corpus) -> Vec<NgramProfile> {
    corpus
        .captions()
        .iter()
        .map(|c| profile_text(&c.raw_text))
        .collect()
}

fn build_df_from_profiles(corpus: &Corpus, profiles: &[NgramProfile]) -> DfTable {
    let mut orders: [HashMap<String, u32>; MAX_ORDER] = Default::default();
    for image in 0..corpus.n_images() {
        for (i, order) in orders.iter_mut().enumerate() {
            let mut seen: HashSet<&str> = HashSet::new();
            for &c in corpus.gt(image) {
                for gram in profiles[c].orders[i].keys() {
                    if seen.insert(gram) {
                        *order.entry(gram.clone()).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    DfTable {
        orders,
        corpus_size: corpus.n_images() as u32,
    }
}

/// Sorted sparse tf-idf vector of one order.
#[derive(Debug, Clone, Default)]
struct SparseVec<K> {
    keys: Vec<K>,
    weights: Vec<f64>,
    norm: f64,
}

impl<K> SparseVec<K> {
    fn from_sorted(pairs: impl Iterator<Item = (K, f64)>) -> Self {
        let mut keys = Vec::new();
        let mut weights = Vec::new();
        let mut sq = 0.0;
        for (k, w) in pairs {
            sq += w * w;
            keys.push(k);
            weights.push(w);
        }
        SparseVec {
            keys,
            weights,
            norm: sq.sqrt(),
        }
    }
}

/// Σ_k min(c_k, r_k)·r_k over the shared keys, in ascending key order.
fn clipped_dot<K: Ord>(cand: &SparseVec<K>, refv: &SparseVec<K>) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < cand.keys.len() && j < refv.keys.len() {
        match cand.keys[i].cmp(&refv.keys[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let (c, r) = (cand.weights[i], refv.weights[j]);
                acc += c.min(r) * r;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

#[inline]
fn order_similarity(dot: f64, norm_c: f64, norm_r: f64, len_c: usize, len_r: usize) -> f64 {
    // clipped dot ≤ plain dot ≤ product of norms; min() only absorbs rounding
    let val = if norm_c > 0.0 && norm_r > 0.0 {
        (dot / (norm_c * norm_r)).min(1.0)
    } else {
        0.0
    };
    let delta = len_c as f64 - len_r as f64;
    val * (-(delta * delta) / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp()
}

/// Folds per-order similarity sums (already summed over references) into
/// the final score.
#[inline]
fn finish_score(per_order: &[f64; MAX_ORDER], n_refs: usize) -> f64 {
    let mut total = 0.0;
    for v in per_order {
        total += v;
    }
    total / MAX_ORDER as f64 / n_refs as f64 * CIDER_SCALE
}

fn tfidf_vectors<'p>(p: &'p NgramProfile, df: &DfTable) -> [SparseVec<&'p str>; MAX_ORDER] {
    std::array::from_fn(|i| {
        let n = i + 1;
        SparseVec::from_sorted(
            p.sorted(n)
                .into_iter()
                .map(|(k, c)| (k, c as f64 * df.idf(n, k))),
        )
    })
}

/// CIDEr-D of `candidate` against the reference set `refs`, in `[0, 10]`.
///
/// An empty reference set scores 0.
pub fn cider_d(candidate: &NgramProfile, refs: &[NgramProfile], df: &DfTable) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let cand = tfidf_vectors(candidate, df);
    let mut per_order = [0.0; MAX_ORDER];
    for r in refs {
        let rv = tfidf_vectors(r, df);
        for n in 0..MAX_ORDER {
            per_order[n] += order_similarity(
                clipped_dot(&cand[n], &rv[n]),
                cand[n].norm,
                rv[n].norm,
                candidate.length,
                r.length,
            );
        }
    }
    finish_score(&per_order, refs.len())
}

/// φ(G_image, caption): CIDEr-D of a corpus caption against the reference
/// set of an image. The caption stays in the reference set when it belongs
/// to it.
pub fn phi(corpus: &Corpus, df: &DfTable, image: usize, caption: usize) -> f64 {
    let cand = profile_text(&corpus.captions()[caption].raw_text);
    let refs: Vec<NgramProfile> = corpus
        .gt(image)
        .iter()
        .map(|&c| profile_text(&corpus.captions()[c].raw_text))
        .collect();
    cider_d(&cand, &refs, df)
}

#[derive(Debug, Clone)]
struct CaptionVec {
    orders: [SparseVec<u32>; MAX_ORDER],
    length: usize,
}

/// Cached CIDEr-D scorer over the captions of one corpus.
///
/// N-grams are interned per order into dense ids; each caption's tf-idf
/// vectors and norms are computed once.
#[derive(Debug, Clone)]
pub struct CaptionScorer {
    vectors: Vec<CaptionVec>,
    gt: Vec<Vec<usize>>,
    vocab_sizes: [usize; MAX_ORDER],
    leave_one_out: bool,
}

impl CaptionScorer {
    pub fn new(corpus: &Corpus, df: &DfTable) -> Self {
        let profiles = corpus_profiles(corpus);
        Self::from_profiles(corpus, &profiles, df)
    }

    pub fn from_profiles(corpus: &Corpus, profiles: &[NgramProfile], df: &DfTable) -> Self {
        let mut interner: [HashMap<&str, u32>; MAX_ORDER] = Default::default();
        // ids follow lexicographic key order so both scoring paths
        // accumulate in the same sequence
        for (i, table) in interner.iter_mut().enumerate() {
            let mut keys: Vec<&str> = profiles
                .iter()
                .flat_map(|p| p.orders[i].keys().map(String::as_str))
                .collect();
            keys.sort_unstable();
            keys.dedup();
            for (id, k) in keys.into_iter().enumerate() {
                table.insert(k, id as u32);
            }
        }
        let vectors = profiles
            .iter()
            .map(|p| CaptionVec {
                orders: std::array::from_fn(|i| {
                    let n = i + 1;
                    SparseVec::from_sorted(
                        p.sorted(n)
                            .into_iter()
                            .map(|(k, c)| (interner[i][k], c as f64 * df.idf(n, k))),
                    )
                }),
                length: p.length,
            })
            .collect();
        CaptionScorer {
            vectors,
            gt: corpus.gt_lists().to_vec(),
            vocab_sizes: std::array::from_fn(|i| interner[i].len()),
            leave_one_out: false,
        }
    }

    /// When set, φ(G_i, c) drops `c` from `G_i` before scoring.
    pub fn with_leave_one_out(mut self, on: bool) -> Self {
        self.leave_one_out = on;
        self
    }

    pub fn leave_one_out(&self) -> bool {
        self.leave_one_out
    }

    pub fn n_captions(&self) -> usize {
        self.vectors.len()
    }

    pub fn n_images(&self) -> usize {
        self.gt.len()
    }

    /// CIDEr-D of caption `candidate` against the captions `refs`.
    pub fn score(&self, candidate: usize, refs: &[usize]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let cand = &self.vectors[candidate];
        let mut per_order = [0.0; MAX_ORDER];
        for &r in refs {
            let rv = &self.vectors[r];
            for n in 0..MAX_ORDER {
                per_order[n] += order_similarity(
                    clipped_dot(&cand.orders[n], &rv.orders[n]),
                    cand.orders[n].norm,
                    rv.orders[n].norm,
                    cand.length,
                    rv.length,
                );
            }
        }
        finish_score(&per_order, refs.len())
    }

    /// φ(G_image, caption).
    pub fn phi(&self, image: usize, caption: usize) -> f64 {
        let refs = &self.gt[image];
        if self.leave_one_out && refs.contains(&caption) {
            let kept: Vec<usize> = refs.iter().copied().filter(|&c| c != caption).collect();
            self.score(caption, &kept)
        } else {
            self.score(caption, refs)
        }
    }

    pub fn row_scratch(&self) -> RowScratch {
        RowScratch {
            slots: std::array::from_fn(|i| vec![u32::MAX; self.vocab_sizes[i]]),
            weights: std::array::from_fn(|_| Vec::new()),
            touched: std::array::from_fn(|_| Vec::new()),
            per_ref: Vec::new(),
        }
    }

    /// Fills `out[j] = φ(G_image, j)` for every caption `j`.
    ///
    /// The reference vectors are scattered into dense per-order slot tables
    /// so each candidate n-gram costs one lookup. Sums run over candidate
    /// ids in ascending order, exactly as in [`CaptionScorer::score`].
    pub fn phi_row(&self, image: usize, scratch: &mut RowScratch, out: &mut [f64]) {
        assert_eq!(out.len(), self.vectors.len());
        let refs = &self.gt[image];
        if self.leave_one_out {
            // each candidate may see a different reference set
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.phi(image, j);
            }
            return;
        }
        let n_refs = refs.len();
        for n in 0..MAX_ORDER {
            for (ri, &r) in refs.iter().enumerate() {
                let v = &self.vectors[r].orders[n];
                for (&id, &w) in v.keys.iter().zip(&v.weights) {
                    let slot = &mut scratch.slots[n][id as usize];
                    if *slot == u32::MAX {
                        *slot = (scratch.weights[n].len() / n_refs) as u32;
                        scratch.weights[n].resize(scratch.weights[n].len() + n_refs, f64::NAN);
                        scratch.touched[n].push(id);
                    }
                    scratch.weights[n][*slot as usize * n_refs + ri] = w;
                }
            }
        }
        scratch.per_ref.clear();
        scratch.per_ref.resize(n_refs * MAX_ORDER, 0.0);
        for (j, o) in out.iter_mut().enumerate() {
            let cand = &self.vectors[j];
            let dots = &mut scratch.per_ref;
            dots.iter_mut().for_each(|d| *d = 0.0);
            for n in 0..MAX_ORDER {
                let v = &cand.orders[n];
                let slots = &scratch.slots[n];
                let weights = &scratch.weights[n];
                for (&id, &c) in v.keys.iter().zip(&v.weights) {
                    let slot = slots[id as usize];
                    if slot == u32::MAX {
                        continue;
                    }
                    let base = slot as usize * n_refs;
                    for ri in 0..n_refs {
                        let r = weights[base + ri];
                        // NaN marks "absent from this reference"
                        if !r.is_nan() {
                            dots[ri * MAX_ORDER + n] += c.min(r) * r;
                        }
                    }
                }
            }
            let mut per_order = [0.0; MAX_ORDER];
            for (ri, &r) in refs.iter().enumerate() {
                let rv = &self.vectors[r];
                for n in 0..MAX_ORDER {
                    per_order[n] += order_similarity(
                        dots[ri * MAX_ORDER + n],
                        cand.orders[n].norm,
                        rv.orders[n].norm,
                        cand.length,
                        rv.length,
                    );
                }
            }
            *o = finish_score(&per_order, n_refs);
        }
        for n in 0..MAX_ORDER {
            for &id in &scratch.touched[n] {
                scratch.slots[n][id as usize] = u32::MAX;
            }
            scratch.touched[n].clear();
            scratch.weights[n].clear();
        }
    }
}

/// Per-worker buffers for [`CaptionScorer::phi_row`].
#[derive(Debug)]
pub struct RowScratch {
    slots: [Vec<u32>; MAX_ORDER],
    weights: [Vec<f64>; MAX_ORDER],
    touched: [Vec<u32>; MAX_ORDER],
    per_ref: Vec<f64>,
}

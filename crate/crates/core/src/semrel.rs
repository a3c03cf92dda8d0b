//! The image × caption semantic similarity matrix and extended
//! ground-truth sets derived from it.

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::ngram::{self, CaptionScorer, DfTable};

const SIM_MAGIC: &[u8; 4] = b"ITSM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMeta {
    pub scorer: String,
    pub tokenizer: String,
    pub df_checksum: String,
    pub leave_one_out: bool,
    /// Hex SHA-256 over the little-endian value payload.
    pub values_sha256: String,
}

/// Dense row-major `n_images × n_captions` matrix of φ(G_i, c_j).
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    n_images: usize,
    n_captions: usize,
    values: Vec<f32>,
    meta: SimMeta,
}

impl SimMatrix {
    /// Wraps raw values, e.g. for hand-built test fixtures.
    pub fn from_values(
        n_images: usize,
        n_captions: usize,
        values: Vec<f32>,
        df_checksum: impl Into<String>,
    ) -> Result<Self> {
        if values.len() != n_images * n_captions {
            return Err(Error::Dimension(format!(
                "{} values for a {n_images}x{n_captions} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Integrity(format!(
                "similarity ({}, {}) = {} is not a finite non-negative value",
                pos / n_captions.max(1),
                pos % n_captions.max(1),
                values[pos]
            )));
        }
        let meta = SimMeta {
            scorer: ngram::SCORER_NAME.into(),
            tokenizer: ngram::TOKENIZER_TAG.into(),
            df_checksum: df_checksum.into(),
            leave_one_out: false,
            values_sha256: values_digest(&values),
        };
        Ok(SimMatrix {
            n_images,
            n_captions,
            values,
            meta,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_captions(&self) -> usize {
        self.n_captions
    }

    pub fn meta(&self) -> &SimMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, image: usize, caption: usize) -> f32 {
        self.values[image * self.n_captions + caption]
    }

    pub fn row(&self, image: usize) -> &[f32] {
        &self.values[image * self.n_captions..(image + 1) * self.n_captions]
    }

    pub fn check_bound(&self, corpus: &Corpus) -> Result<()> {
        if self.n_images != corpus.n_images() || self.n_captions != corpus.n_captions() {
            return Err(Error::Dimension(format!(
                "similarity matrix is {}x{}, corpus is {}x{}",
                self.n_images,
                self.n_captions,
                corpus.n_images(),
                corpus.n_captions()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + self.values.len() * 4);
        out.extend_from_slice(SIM_MAGIC);
        binio::put_u32(&mut out, self.n_images as u32);
        binio::put_u32(&mut out, self.n_captions as u32);
        binio::put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a matrix file. With `expected_df` set, the matrix must have
    /// been built from a df table with that checksum.
    pub fn from_bytes(bytes: &[u8], expected_df: Option<&str>) -> Result<Self> {
        let mut r = Reader::new(bytes, "similarity file");
        r.magic(SIM_MAGIC)?;
        let n_images = r.u32()? as usize;
        let n_captions = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let meta: SimMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Json {
            line: e.line(),
            column: e.column(),
            message: format!("similarity meta block: {e}"),
        })?;
        let values = r.f32s(n_images * n_captions)?;
        r.finish()?;
        let digest = values_digest(&values);
        if digest != meta.values_sha256 {
            return Err(Error::Checksum {
                expected: meta.values_sha256,
                found: digest,
            });
        }
        if let Some(expected) = expected_df {
            if expected != meta.df_checksum {
                return Err(Error::Provenance {
                    expected: expected.into(),
                    found: meta.df_checksum,
                });
            }
        }
        let mut m = SimMatrix::from_values(n_images, n_captions, values, meta.df_checksum.clone())?;
        m.meta = meta;
        Ok(m)
    }
}

fn values_digest(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_sim(sim: &SimMatrix, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &sim.to_bytes())
}

pub fn load_sim(path: impl AsRef<Path>, expected_df: Option<&str>) -> Result<SimMatrix> {
    SimMatrix::from_bytes(&binio::read_file(path.as_ref())?, expected_df)
}

fn fill_rows(scorer: &CaptionScorer, first_row: usize, out: &mut [f32]) {
    let n_captions = scorer.n_captions();
    out.par_chunks_mut(n_captions).enumerate().for_each_init(
        || (scorer.row_scratch(), vec![0.0f64; n_captions]),
        |(scratch, buf), (offset, row)| {
            scorer.phi_row(first_row + offset, scratch, buf);
            for (dst, &src) in row.iter_mut().zip(buf.iter()) {
                *dst = src as f32;
            }
        },
    );
}

fn base_meta(df: &DfTable, scorer: &CaptionScorer) -> SimMeta {
    SimMeta {
        scorer: ngram::SCORER_NAME.into(),
        tokenizer: ngram::TOKENIZER_TAG.into(),
        df_checksum: df.checksum(),
        leave_one_out: scorer.leave_one_out(),
        values_sha256: String::new(),
    }
}

/// Computes `N_ij = φ(G_i, c_j)` for every image and caption.
///
/// Rows are distributed over the current rayon pool; each row is produced
/// by a single worker with a fixed summation order, so the result is
/// identical for any thread count.
pub fn build_sim_matrix(corpus: &Corpus, df: &DfTable) -> SimMatrix {
    build_sim_matrix_with(corpus, df, false)
}

pub fn build_sim_matrix_with(corpus: &Corpus, df: &DfTable, leave_one_out: bool) -> SimMatrix {
    let scorer = CaptionScorer::new(corpus, df).with_leave_one_out(leave_one_out);
    let mut values = vec![0.0f32; corpus.n_images() * corpus.n_captions()];
    if corpus.n_captions() > 0 {
        fill_rows(&scorer, 0, &mut values);
    }
    let mut meta = base_meta(df, &scorer);
    meta.values_sha256 = values_digest(&values);
    SimMatrix {
        n_images: corpus.n_images(),
        n_captions: corpus.n_captions(),
        values,
        meta,
    }
}

/// Streams the matrix to `path` in blocks of `block_rows` rows without
/// materializing it. The file is byte-identical to [`save_sim`] of
/// [`build_sim_matrix_with`].
pub fn write_sim_streaming(
    corpus: &Corpus,
    df: &DfTable,
    leave_one_out: bool,
    block_rows: usize,
    path: impl AsRef<Path>,
) -> Result<SimMeta> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let scorer = CaptionScorer::new(corpus, df).with_leave_one_out(leave_one_out);
    let mut meta = base_meta(df, &scorer);
    // placeholder digest of the final width, patched once values are known
    meta.values_sha256 = "0".repeat(64);
    let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");

    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::new();
    header.extend_from_slice(SIM_MAGIC);
    binio::put_u32(&mut header, binio::to_u32(corpus.n_images(), "n_images")?);
    binio::put_u32(&mut header, binio::to_u32(corpus.n_captions(), "n_captions")?);
    binio::put_u32(&mut header, meta_bytes.len() as u32);
    w.write_all(&header).map_err(io)?;
    let meta_offset = header.len() as u64;
    w.write_all(&meta_bytes).map_err(io)?;

    let n_captions = corpus.n_captions();
    let block_rows = block_rows.max(1);
    let mut block = Vec::new();
    let mut digest = Sha256::new();
    let mut row = 0;
    while row < corpus.n_images() && n_captions > 0 {
        let rows = block_rows.min(corpus.n_images() - row);
        block.clear();
        block.resize(rows * n_captions, 0.0f32);
        fill_rows(&scorer, row, &mut block);
        for v in &block {
            let b = v.to_le_bytes();
            digest.update(b);
            w.write_all(&b).map_err(io)?;
        }
        row += rows;
    }
    meta.values_sha256 = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let final_meta = serde_json::to_vec(&meta).expect("meta serializes");
    debug_assert_eq!(final_meta.len(), meta_bytes.len());
    w.seek(SeekFrom::Start(meta_offset)).map_err(io)?;
    w.write_all(&final_meta).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// Image query; items are captions (a row of the matrix).
    Image,
    /// Caption query; items are images (a column of the matrix).
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub index: usize,
    pub value: f64,
}

/// Ĝ: the items most similar to a query under the similarity matrix,
/// sorted by descending value with ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedGt {
    pub kind: QueryKind,
    pub query: usize,
    pub m: usize,
    pub items: Vec<ScoredItem>,
}

impl ExtendedGt {
    pub fn contains(&self, index: usize) -> bool {
        self.items.iter().any(|it| it.index == index)
    }

    pub fn total(&self) -> f64 {
        self.items.iter().map(|it| it.value).sum()
    }
}

fn ranked(mut items: Vec<ScoredItem>, m: usize) -> Vec<ScoredItem> {
    let cmp = |a: &ScoredItem, b: &ScoredItem| {
        b.value
            .partial_cmp(&a.value)
            .expect("similarities are finite")
            .then(a.index.cmp(&b.index))
    };
    let m = m.min(items.len());
    if m < items.len() && m > 0 {
        items.select_nth_unstable_by(m - 1, cmp);
        items.truncate(m);
    } else {
        items.truncate(m);
    }
    items.sort_unstable_by(cmp);
    items
}

/// Similarity of every opposite-modality item to a query.
pub fn query_values(sim: &SimMatrix, kind: QueryKind, query: usize) -> Vec<ScoredItem> {
    match kind {
        QueryKind::Image => sim
            .row(query)
            .iter()
            .enumerate()
            .map(|(index, &v)| ScoredItem {
                index,
                value: v as f64,
            })
            .collect(),
        QueryKind::Caption => (0..sim.n_images())
            .map(|index| ScoredItem {
                index,
                value: sim.get(index, query) as f64,
            })
            .collect(),
    }
}

/// Top-`m` items for a query: a row for image queries, a column for
/// caption queries.
pub fn extended_gt(sim: &SimMatrix, kind: QueryKind, query: usize, m: usize) -> ExtendedGt {
    extended_gt_filtered(sim, kind, query, m, |_| true)
}

/// Like [`extended_gt`] but only items accepted by `keep` are eligible.
pub fn extended_gt_filtered(
    sim: &SimMatrix,
    kind: QueryKind,
    query: usize,
    m: usize,
    keep: impl Fn(usize) -> bool,
) -> ExtendedGt {
    let items = query_values(sim, kind, query)
        .into_iter()
        .filter(|it| keep(it.index))
        .collect();
    ExtendedGt {
        kind,
        query,
        m,
        items: ranked(items, m),
    }
}

/// Ĝ that always contains the annotated ground truth `gt`, topped up with
/// the best-scoring other items to `m` entries. With `m = |gt|` this is
/// exactly the ground truth.
pub fn extended_gt_force(
    sim: &SimMatrix,
    kind: QueryKind,
    query: usize,
    m: usize,
    gt: &[usize],
) -> ExtendedGt {
    let all = query_values(sim, kind, query);
    let forced: Vec<ScoredItem> = gt.iter().map(|&g| all[g]).collect();
    let rest = ranked(
        all.into_iter().filter(|it| !gt.contains(&it.index)).collect(),
        m.saturating_sub(gt.len()),
    );
    let mut items: Vec<ScoredItem> = forced.into_iter().chain(rest).collect();
    let n = items.len();
    items = ranked(items, n);
    ExtendedGt {
        kind,
        query,
        m,
        items,
    }
}

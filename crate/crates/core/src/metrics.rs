//! Retrieval metrics over ranked runs: ITM recall (R^V), IR recall (R),
//! Semantic Recall, NCS and its GT-removed variant, plus the Pearson
//! correlation used to compare metrics against human judgments.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::semrel::{self, ExtendedGt, QueryKind, SimMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image queries retrieving captions.
    I2t,
    /// Caption queries retrieving images.
    T2i,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::I2t => "i2t",
            Direction::T2i => "t2i",
        }
    }

    pub fn query_kind(self) -> QueryKind {
        match self {
            Direction::I2t => QueryKind::Image,
            Direction::T2i => QueryKind::Caption,
        }
    }

    fn code(self) -> u8 {
        match self {
            Direction::I2t => 0,
            Direction::T2i => 1,
        }
    }

    fn from_code(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Direction::I2t),
            1 => Ok(Direction::T2i),
            other => Err(Error::Integrity(format!("unknown direction byte {other}"))),
        }
    }
}

/// Full rankings of every opposite-modality item, one per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalRun {
    direction: Direction,
    n_items: usize,
    rankings: Vec<Vec<u32>>,
    pub model_tag: String,
}

const RUN_MAGIC: &[u8; 4] = b"ITRR";

impl RetrievalRun {
    /// Validates that every ranking is a permutation of `0..n_items`.
    pub fn new(
        direction: Direction,
        n_items: usize,
        rankings: Vec<Vec<u32>>,
        model_tag: impl Into<String>,
    ) -> Result<Self> {
        let mut seen = vec![false; n_items];
        for (q, r) in rankings.iter().enumerate() {
            if r.len() != n_items {
                return Err(Error::Integrity(format!(
                    "query {q}: ranking has {} items, expected {n_items}",
                    r.len()
                )));
            }
            seen.iter_mut().for_each(|s| *s = false);
            for &item in r {
                let slot = seen.get_mut(item as usize).ok_or_else(|| {
                    Error::Integrity(format!("query {q}: item {item} out of range"))
                })?;
                if std::mem::replace(slot, true) {
                    return Err(Error::Integrity(format!("query {q}: item {item} repeated")));
                }
            }
        }
        Ok(RetrievalRun {
            direction,
            n_items,
            rankings,
            model_tag: model_tag.into(),
        })
    }

    /// Ranks items by descending score; ties go to the lower index.
    pub fn from_scores(
        direction: Direction,
        n_items: usize,
        scores: impl IntoIterator<Item = Vec<f64>>,
        model_tag: impl Into<String>,
    ) -> Result<Self> {
        let rankings = scores
            .into_iter()
            .map(|s| {
                assert_eq!(s.len(), n_items);
                let mut idx: Vec<u32> = (0..n_items as u32).collect();
                idx.sort_by(|&a, &b| {
                    s[b as usize]
                        .total_cmp(&s[a as usize])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        RetrievalRun::new(direction, n_items, rankings, model_tag)
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn n_queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn ranking(&self, query: usize) -> &[u32] {
        &self.rankings[query]
    }

    /// Q_ik: the first `k` items retrieved for `query`.
    pub fn top_k(&self, query: usize, k: usize) -> &[u32] {
        let r = &self.rankings[query];
        &r[..k.min(r.len())]
    }

    pub fn check_bound(&self, corpus: &Corpus) -> Result<()> {
        let (q, i) = match self.direction {
            Direction::I2t => (corpus.n_images(), corpus.n_captions()),
            Direction::T2i => (corpus.n_captions(), corpus.n_images()),
        };
        if self.n_queries() != q || self.n_items != i {
            return Err(Error::Dimension(format!(
                "{} run is {}x{}, corpus needs {q}x{i}",
                self.direction.as_str(),
                self.n_queries(),
                self.n_items
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.rankings.len() * self.n_items * 4);
        out.extend_from_slice(RUN_MAGIC);
        out.push(self.direction.code());
        binio::put_u32(&mut out, self.rankings.len() as u32);
        binio::put_u32(&mut out, self.n_items as u32);
        for r in &self.rankings {
            for &i in r {
                binio::put_u32(&mut out, i);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], model_tag: impl Into<String>) -> Result<Self> {
        let mut r = Reader::new(bytes, "retrieval run");
        r.magic(RUN_MAGIC)?;
        let direction = Direction::from_code(r.u8()?)?;
        let n_queries = r.u32()? as usize;
        let n_items = r.u32()? as usize;
        let mut rankings = Vec::with_capacity(n_queries.min(bytes.len() / 4 + 1));
        for _ in 0..n_queries {
            rankings.push(r.u32s(n_items)?);
        }
        r.finish()?;
        RetrievalRun::new(direction, n_items, rankings, model_tag)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        RetrievalRun::from_bytes(&binio::read_file(path)?, tag)
    }
}

/// Annotated relevant items of a query: the five captions of an image, or
/// the single image of a caption.
pub fn ground_truth(corpus: &Corpus, direction: Direction, query: usize) -> Vec<usize> {
    match direction {
        Direction::I2t => corpus.gt(query).to_vec(),
        Direction::T2i => vec![corpus.image_of(query)],
    }
}

/// Per-query values and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub values: Vec<f64>,
    pub mean: f64,
}

impl QueryScores {
    fn from_values(values: Vec<f64>) -> Self {
        let mut sum = 0.0;
        for v in &values {
            sum += v;
        }
        let mean = if values.is_empty() {
            0.0
        } else {
            sum / values.len() as f64
        };
        QueryScores { values, mean }
    }
}

/// Membership test over a top-k slice; hashes only when the slice is long.
struct TopK<'a> {
    items: &'a [u32],
    set: Option<HashSet<u32>>,
}

impl<'a> TopK<'a> {
    fn new(items: &'a [u32]) -> Self {
        let set = (items.len() > 64).then(|| items.iter().copied().collect());
        TopK { items, set }
    }

    fn contains(&self, item: usize) -> bool {
        let item = item as u32;
        match &self.set {
            Some(s) => s.contains(&item),
            None => self.items.contains(&item),
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    Ok(())
}

/// R^V_i@k: 1 when any ground-truth item appears in the top `k`.
pub fn recall_vse(run: &RetrievalRun, corpus: &Corpus, k: usize) -> Result<QueryScores> {
    check_k(k)?;
    run.check_bound(corpus)?;
    let values = (0..run.n_queries())
        .map(|q| {
            let top = TopK::new(run.top_k(q, k));
            let hit = ground_truth(corpus, run.direction(), q)
                .into_iter()
                .any(|g| top.contains(g));
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(QueryScores::from_values(values))
}

/// R_i@k = |G_i ∩ Q_ik| / |G_i|.
pub fn recall_ir(run: &RetrievalRun, corpus: &Corpus, k: usize) -> Result<QueryScores> {
    check_k(k)?;
    run.check_bound(corpus)?;
    let values = (0..run.n_queries())
        .map(|q| {
            let top = TopK::new(run.top_k(q, k));
            let gt = ground_truth(corpus, run.direction(), q);
            let hits = gt.iter().filter(|&&g| top.contains(g)).count();
            hits as f64 / gt.len() as f64
        })
        .collect();
    Ok(QueryScores::from_values(values))
}

fn check_ext(run: &RetrievalRun, ext: &[ExtendedGt]) -> Result<()> {
    if ext.len() != run.n_queries() {
        return Err(Error::Dimension(format!(
            "{} extended sets for {} queries",
            ext.len(),
            run.n_queries()
        )));
    }
    Ok(())
}

/// SR_i@k = |Ĝ_i ∩ Q_ik| / |Ĝ_i|. An empty Ĝ_i scores 0.
pub fn semantic_recall(run: &RetrievalRun, ext: &[ExtendedGt], k: usize) -> Result<QueryScores> {
    check_k(k)?;
    check_ext(run, ext)?;
    let values = ext
        .iter()
        .enumerate()
        .map(|(q, e)| {
            if e.items.is_empty() {
                return 0.0;
            }
            let top = TopK::new(run.top_k(q, k));
            let hits = e.items.iter().filter(|it| top.contains(it.index)).count();
            hits as f64 / e.items.len() as f64
        })
        .collect();
    Ok(QueryScores::from_values(values))
}

fn ncs_one(top: &[u32], ext: &ExtendedGt) -> f64 {
    let top = TopK::new(top);
    let mut retrieved = 0.0;
    let mut ideal = 0.0;
    for it in &ext.items {
        ideal += it.value;
        if top.contains(it.index) {
            retrieved += it.value;
        }
    }
    if ideal > 0.0 {
        retrieved / ideal
    } else {
        0.0
    }
}

/// N_i@k: similarity mass of the extended items retrieved in the top `k`
/// over the total mass of the extended set. Zero-mass queries score 0 and
/// still count towards the mean.
pub fn ncs(run: &RetrievalRun, ext: &[ExtendedGt], k: usize) -> Result<QueryScores> {
    check_k(k)?;
    check_ext(run, ext)?;
    let values = ext
        .iter()
        .enumerate()
        .map(|(q, e)| ncs_one(run.top_k(q, k), e))
        .collect();
    Ok(QueryScores::from_values(values))
}

/// Size of the extended set Ĝ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MSelection {
    /// m equals the cut-off k of each cell.
    FollowK,
    Fixed(usize),
}

impl MSelection {
    pub fn resolve(self, k: usize) -> usize {
        match self {
            MSelection::FollowK => k,
            MSelection::Fixed(m) => m,
        }
    }

    pub fn label(self) -> String {
        match self {
            MSelection::FollowK => "k".into(),
            MSelection::Fixed(m) => m.to_string(),
        }
    }
}

impl std::str::FromStr for MSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "k" {
            return Ok(MSelection::FollowK);
        }
        match s.parse::<usize>() {
            Ok(m) if m >= 1 => Ok(MSelection::Fixed(m)),
            _ => Err(Error::InvalidParameter(format!(
                "m must be a positive integer or \"k\", got {s:?}"
            ))),
        }
    }
}

/// Extended sets for every query of `direction`.
pub fn extended_sets(sim: &SimMatrix, direction: Direction, m: usize) -> Vec<ExtendedGt> {
    let n = match direction {
        Direction::I2t => sim.n_images(),
        Direction::T2i => sim.n_captions(),
    };
    (0..n)
        .map(|q| semrel::extended_gt(sim, direction.query_kind(), q, m))
        .collect()
}

/// NCS after removing the annotated ground truth: GT items are dropped from
/// the ranking (later items move up) and from the extended-set candidates.
pub fn ncs_non_gt(
    run: &RetrievalRun,
    sim: &SimMatrix,
    corpus: &Corpus,
    m: usize,
    k: usize,
) -> Result<QueryScores> {
    check_k(k)?;
    run.check_bound(corpus)?;
    sim.check_bound(corpus)?;
    let dir = run.direction();
    let values = (0..run.n_queries())
        .map(|q| {
            let gt = ground_truth(corpus, dir, q);
            let ext = semrel::extended_gt_filtered(sim, dir.query_kind(), q, m, |i| !gt.contains(&i));
            let top: Vec<u32> = run
                .ranking(q)
                .iter()
                .copied()
                .filter(|&i| !gt.contains(&(i as usize)))
                .take(k)
                .collect();
            ncs_one(&top, &ext)
        })
        .collect();
    Ok(QueryScores::from_values(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub m: MSelection,
    /// Report NCS with the ground truth removed in the headline table.
    pub gt_removed: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            m: MSelection::FollowK,
            gt_removed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub m: String,
    pub scorer: String,
    pub gt_removed: bool,
    pub ks: Vec<usize>,
    pub model: String,
}

/// Means for one (direction, k) cell, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub direction: Direction,
    pub k: usize,
    pub recall_vse: f64,
    pub recall_ir: f64,
    pub semantic_recall: f64,
    pub ncs: f64,
    pub ncs_non_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: ReportConfig,
    pub cells: Vec<MetricCell>,
    /// Σ 100·R^V over all cells.
    pub rsum: f64,
    /// Σ 100·NCS over all cells.
    pub nsum: f64,
    /// Σ 100·NCS with ground truth removed.
    pub nsum_non_gt: f64,
}

impl MetricReport {
    pub fn cell(&self, direction: Direction, k: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.direction == direction && c.k == k)
    }

    /// The NCS sum shown in the headline: Nsum, or Nsum(N) when GT items
    /// were removed.
    pub fn headline_nsum(&self) -> f64 {
        if self.config.gt_removed {
            self.nsum_non_gt
        } else {
            self.nsum
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: recall cells and Rsum, then NCS cells and Nsum
    /// (or Nsum(N)), followed by the IR recall and Semantic Recall rows.
    pub fn to_table(&self) -> String {
        let ks = &self.config.ks;
        let dirs = [Direction::I2t, Direction::T2i];
        let nsum_label = if self.config.gt_removed { "Nsum(N)" } else { "Nsum" };
        let ncs_value = |c: &MetricCell| {
            if self.config.gt_removed {
                c.ncs_non_gt
            } else {
                c.ncs
            }
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# model={} scorer={} m={} gt_removed={}",
            self.config.model, self.config.scorer, self.config.m, self.config.gt_removed
        );
        let mut header = format!("{:<8}", "metric");
        for d in dirs {
            for k in ks {
                header.push_str(&format!("{:>10}", format!("{}@{}", d.as_str(), k)));
            }
        }
        header.push_str(&format!("{:>10}", "sum"));
        let _ = writeln!(out, "{header}");
        let rows: [(&str, &str, &dyn Fn(&MetricCell) -> f64); 4] = [
            ("R^V", "Rsum", &|c: &MetricCell| c.recall_vse),
            (if self.config.gt_removed { "NCS(N)" } else { "NCS" }, nsum_label, &ncs_value),
            ("R", "", &|c: &MetricCell| c.recall_ir),
            ("SR", "", &|c: &MetricCell| c.semantic_recall),
        ];
        for (label, _, get) in rows.iter() {
            let mut line = format!("{label:<8}");
            let mut sum = 0.0;
            for d in dirs {
                for &k in ks {
                    let v = self.cell(d, k).map(|c| 100.0 * get(c)).unwrap_or(f64::NAN);
                    sum += v;
                    line.push_str(&format!("{v:>10.1}"));
                }
            }
            line.push_str(&format!("{sum:>10.1}"));
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "Rsum {:.1}  {} {:.1}", self.rsum, nsum_label, self.headline_nsum());
        out
    }
}

/// Evaluates both directions at every cut-off and sums the percent-scaled
/// cells into Rsum, Nsum and Nsum(N).
pub fn aggregate(
    i2t: &RetrievalRun,
    t2i: &RetrievalRun,
    corpus: &Corpus,
    sim: &SimMatrix,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if i2t.direction() != Direction::I2t || t2i.direction() != Direction::T2i {
        return Err(Error::InvalidParameter(
            "aggregate needs one i2t run and one t2i run".into(),
        ));
    }
    if cfg.ks.is_empty() {
        return Err(Error::InvalidParameter("no cut-offs given".into()));
    }
    sim.check_bound(corpus)?;
    let mut cells = Vec::new();
    let (mut rsum, mut nsum, mut nsum_non_gt) = (0.0, 0.0, 0.0);
    let mut ext_cache: HashMap<(Direction, usize), Vec<ExtendedGt>> = HashMap::new();
    for run in [i2t, t2i] {
        let dir = run.direction();
        for &k in &cfg.ks {
            let m = cfg.m.resolve(k);
            let ext = ext_cache
                .entry((dir, m))
                .or_insert_with(|| extended_sets(sim, dir, m));
            let cell = MetricCell {
                direction: dir,
                k,
                recall_vse: recall_vse(run, corpus, k)?.mean,
                recall_ir: recall_ir(run, corpus, k)?.mean,
                semantic_recall: semantic_recall(run, ext, k)?.mean,
                ncs: ncs(run, ext, k)?.mean,
                ncs_non_gt: ncs_non_gt(run, sim, corpus, m, k)?.mean,
            };
            rsum += 100.0 * cell.recall_vse;
            nsum += 100.0 * cell.ncs;
            nsum_non_gt += 100.0 * cell.ncs_non_gt;
            cells.push(cell);
        }
    }
    Ok(MetricReport {
        config: ReportConfig {
            m: cfg.m.label(),
            scorer: sim.meta().scorer.clone(),
            gt_removed: cfg.gt_removed,
            ks: cfg.ks.clone(),
            model: i2t.model_tag.clone(),
        },
        cells,
        rsum,
        nsum,
        nsum_non_gt,
    })
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub image_id: String,
    pub caption_id: String,
    pub score: f64,
}

/// Reads `image_id <TAB> caption_id <TAB> score` rows. A first line whose
/// score column is not numeric is treated as a header.
pub fn parse_pair_scores(text: &str) -> Result<Vec<PairScore>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Integrity(format!(
                "line {}: expected 3 tab-separated columns",
                lineno + 1
            )));
        }
        match cols[2].trim().parse::<f64>() {
            Ok(score) if score.is_finite() => out.push(PairScore {
                image_id: cols[0].trim().to_owned(),
                caption_id: cols[1].trim().to_owned(),
                score,
            }),
            _ if lineno == 0 => continue,
            _ => {
                return Err(Error::Integrity(format!(
                    "line {}: score {:?} is not a finite number",
                    lineno + 1,
                    cols[2]
                )))
            }
        }
    }
    Ok(out)
}

pub fn load_pair_scores(path: impl AsRef<Path>) -> Result<Vec<PairScore>> {
    let path = path.as_ref();
    let bytes = binio::read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Integrity(format!("{}: not UTF-8: {e}", path.display())))?;
    parse_pair_scores(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pairs: usize,
    pub unmatched: usize,
    pub pearson_r: f64,
}

/// Joins judgments and metric scores on (image_id, caption_id) and
/// correlates them. Judgments without a matching score are counted as
/// unmatched.
pub fn correlate(judgments: &[PairScore], scores: &[PairScore]) -> Result<Correlation> {
    let lookup: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.image_id.as_str(), s.caption_id.as_str()), s.score))
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for j in judgments {
        if let Some(&s) = lookup.get(&(j.image_id.as_str(), j.caption_id.as_str())) {
            x.push(j.score);
            y.push(s);
        }
    }
    Ok(Correlation {
        pairs: x.len(),
        unmatched: judgments.len() - x.len(),
        pearson_r: pearson_r(&x, &y)?,
    })
}

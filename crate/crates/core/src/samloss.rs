//! Triplet losses for joint image/caption embeddings.
//!
//! The fixed-margin loss penalizes, for an anchor pair `(i_p, c_p)`, any
//! negative caption or image that comes within `α` of the positive
//! similarity. The semantic adaptive margin (SAM) variant replaces `α` by a
//! per-triplet margin derived from caption-consensus scores:
//!
//! ```text
//! α_i2t = (φ(G_p, c_p) − φ(G_p, c_m)) / τ
//! α_t2i = (φ(G_p, c_p) − φ(G_p, c_k)) / τ
//! ```
//!
//! so that negatives which describe the anchor image well are pushed away
//! less than unrelated ones.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Random in-batch negative.
    #[serde(rename = "RS")]
    Random,
    /// Hardest (most similar) in-batch negative.
    #[serde(rename = "HN")]
    Hard,
    /// Softest (least similar) in-batch negative.
    #[serde(rename = "SN")]
    Soft,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Hard, Strategy::Soft];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "RS",
            Strategy::Hard => "HN",
            Strategy::Soft => "SN",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RS" => Ok(Strategy::Random),
            "HN" => Ok(Strategy::Hard),
            "SN" => Ok(Strategy::Soft),
            _ => Err(Error::InvalidParameter(format!(
                "unknown sampling strategy {s:?} (expected RS, HN or SN)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamConfig {
    pub tau: f64,
    pub fixed_margin: f64,
    pub sam_weight: f64,
    pub keep_original_triplet: bool,
    pub strategy: Strategy,
    pub clamp_negative_margin: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            tau: 5.0,
            fixed_margin: 0.2,
            sam_weight: 5.0,
            keep_original_triplet: true,
            strategy: Strategy::Soft,
            clamp_negative_margin: false,
        }
    }
}

impl SamConfig {
    /// Plain fixed-margin triplet loss with hard negatives.
    pub fn fixed_only() -> Self {
        SamConfig {
            sam_weight: 0.0,
            keep_original_triplet: true,
            ..SamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.fixed_margin >= 0.0 && self.fixed_margin.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "fixed_margin must be >= 0, got {}",
                self.fixed_margin
            )));
        }
        if !(self.sam_weight >= 0.0 && self.sam_weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sam_weight must be >= 0, got {}",
                self.sam_weight
            )));
        }
        Ok(())
    }

    pub fn uses_sam(&self) -> bool {
        self.sam_weight > 0.0
    }
}

/// `(α_i2t, α_t2i)` from the consensus scores of the positive caption, the
/// negative caption and the caption paired with the negative image, each
/// against the anchor image's references.
pub fn adaptive_margins(
    phi_pos: f64,
    phi_neg_caption: f64,
    phi_neg_image: f64,
    tau: f64,
    clamp: bool,
) -> (f64, f64) {
    let mut i2t = (phi_pos - phi_neg_caption) / tau;
    let mut t2i = (phi_pos - phi_neg_image) / tau;
    if clamp {
        i2t = i2t.max(0.0);
        t2i = t2i.max(0.0);
    }
    (i2t, t2i)
}

/// Model similarities of one triplet: ψ(i_p, c_p), ψ(i_p, c_m), ψ(i_k, c_p).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSims {
    pub pos: f64,
    pub neg_caption: f64,
    pub neg_image: f64,
}

/// Hinge values `(i2t, t2i)` before clamping at zero.
#[inline]
pub fn hinge_terms(s: &TripletSims, margin_i2t: f64, margin_t2i: f64) -> (f64, f64) {
    (
        margin_i2t + s.neg_caption - s.pos,
        margin_t2i + s.neg_image - s.pos,
    )
}

/// max[α + ψ(i_p,c_m) − ψ(i_p,c_p), 0] + max[α + ψ(i_k,c_p) − ψ(i_p,c_p), 0]
pub fn fixed_triplet_loss(sims: &TripletSims, alpha: f64) -> f64 {
    let (a, b) = hinge_terms(sims, alpha, alpha);
    a.max(0.0) + b.max(0.0)
}

/// Negatives chosen for one anchor, as in-batch positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negatives {
    /// Batch position whose caption is the negative caption `c_m`.
    pub caption: usize,
    /// Batch position whose image is the negative image `i_k`.
    pub image: usize,
}

/// One anchor of a training batch with its negatives and consensus scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletAnchor {
    /// Negatives for the adaptive-margin term.
    pub sam: Negatives,
    /// Hard negatives for the fixed-margin term.
    pub hard: Negatives,
    /// φ(G_p, c_p), φ(G_p, c_m), φ(G_p, c_k).
    pub phi_pos: f64,
    pub phi_neg_caption: f64,
    pub phi_neg_image: f64,
}

/// A batch of B anchor pairs; anchor `a` is image `a` with caption `a` of
/// the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<TripletAnchor>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.anchors.len();
        for (a, anchor) in self.anchors.iter().enumerate() {
            for n in [anchor.sam, anchor.hard] {
                if n.caption == a || n.image == a || n.caption >= b || n.image >= b {
                    return Err(Error::InvalidParameter(format!(
                        "anchor {a}: negatives {n:?} invalid for batch of {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-major B×B block of model similarities, `sims[a * B + b] = ψ(i_a, c_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimBlock {
    pub size: usize,
    pub values: Vec<f64>,
}

impl SimBlock {
    pub fn new(size: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), size * size);
        SimBlock { size, values }
    }

    #[inline]
    pub fn get(&self, image: usize, caption: usize) -> f64 {
        self.values[image * self.size + caption]
    }

    pub fn triplet(&self, anchor: usize, neg: Negatives) -> TripletSims {
        TripletSims {
            pos: self.get(anchor, anchor),
            neg_caption: self.get(anchor, neg.caption),
            neg_image: self.get(neg.image, anchor),
        }
    }
}

/// Per-anchor loss terms, split by origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// Mean adaptive-margin loss over the batch.
    pub sam: f64,
    /// Mean fixed-margin loss over the batch.
    pub triplet: f64,
    /// `sam_weight·sam + [keep_original_triplet]·triplet`.
    pub total: f64,
}

/// Margins used for one anchor's adaptive term.
pub fn anchor_margins(anchor: &TripletAnchor, cfg: &SamConfig) -> (f64, f64) {
    adaptive_margins(
        anchor.phi_pos,
        anchor.phi_neg_caption,
        anchor.phi_neg_image,
        cfg.tau,
        cfg.clamp_negative_margin,
    )
}

/// Combined batch loss: mean SAM hinge loss weighted by `sam_weight`, plus
/// the mean fixed-margin hard-negative loss when the original triplet is kept.
pub fn sam_loss(batch: &TripletBatch, sims: &SimBlock, cfg: &SamConfig) -> LossParts {
    let b = batch.len();
    if b == 0 {
        return LossParts::default();
    }
    let (mut sam, mut triplet) = (0.0, 0.0);
    for (a, anchor) in batch.anchors.iter().enumerate() {
        let (mi, mt) = anchor_margins(anchor, cfg);
        let (hi, ht) = hinge_terms(&sims.triplet(a, anchor.sam), mi, mt);
        sam += hi.max(0.0) + ht.max(0.0);
        triplet += fixed_triplet_loss(&sims.triplet(a, anchor.hard), cfg.fixed_margin);
    }
    let sam = sam / b as f64;
    let triplet = triplet / b as f64;
    let total = cfg.sam_weight * sam + if cfg.keep_original_triplet { triplet } else { 0.0 };
    LossParts {
        sam,
        triplet,
        total,
    }
}

/// Picks a negative caption (along each row) and a negative image (along
/// each column) for every anchor of the block. Ties resolve to the lower
/// index; the random strategy draws uniformly among off-diagonal entries.
pub fn sample_negatives<R: Rng + ?Sized>(
    sims: &SimBlock,
    strategy: Strategy,
    rng: &mut R,
) -> Result<Vec<Negatives>> {
    let b = sims.size;
    if b < 2 {
        return Err(Error::InvalidParameter(format!(
            "negative sampling needs a batch of at least 2, got {b}"
        )));
    }
    let pick = |rng: &mut R, a: usize, value: &dyn Fn(usize) -> f64| -> usize {
        match strategy {
            Strategy::Random => {
                let r = rng.gen_range(0..b - 1);
                if r >= a {
                    r + 1
                } else {
                    r
                }
            }
            Strategy::Hard | Strategy::Soft => {
                let mut best: Option<(usize, f64)> = None;
                for j in (0..b).filter(|&j| j != a) {
                    let v = value(j);
                    let better = match best {
                        None => true,
                        Some((_, bv)) => match strategy {
                            Strategy::Hard => v > bv,
                            _ => v < bv,
                        },
                    };
                    if better {
                        best = Some((j, v));
                    }
                }
                best.expect("b >= 2").0
            }
        }
    };
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let caption = pick(rng, a, &|j| sims.get(a, j));
        let image = pick(rng, a, &|j| sims.get(j, a));
        out.push(Negatives { caption, image });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn margin_examples() {
        let (a, b) = adaptive_margins(0.8, 0.3, 0.3, 5.0, false);
        assert!((a - 0.1).abs() < 1e-15 && (b - 0.1).abs() < 1e-15);
        assert_eq!(adaptive_margins(0.4, 0.4, 0.1, 5.0, false).0, 0.0);
        let (a, _) = adaptive_margins(0.3, 0.8, 0.3, 5.0, false);
        assert!((a + 0.1).abs() < 1e-15);
        let (a, _) = adaptive_margins(0.3, 0.8, 0.3, 5.0, true);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn fixed_loss_examples() {
        let s = TripletSims {
            pos: 0.9,
            neg_caption: 0.5,
            neg_image: 0.5,
        };
        assert_eq!(fixed_triplet_loss(&s, 0.2), 0.0);
        let s = TripletSims {
            pos: 0.5,
            neg_caption: 0.5,
            neg_image: 0.5,
        };
        assert!((fixed_triplet_loss(&s, 0.2) - 0.4).abs() < 1e-15);
    }

    fn block(rows: &[&[f64]]) -> SimBlock {
        SimBlock::new(rows.len(), rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn hard_and_soft_pick_extremes() {
        let s = block(&[&[0.9, 0.7, 0.2], &[0.1, 0.8, 0.3], &[0.5, 0.6, 0.4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hn = sample_negatives(&s, Strategy::Hard, &mut rng).unwrap();
        assert_eq!(hn[0].caption, 1);
        // column 0 without the diagonal: rows 1 (0.1) and 2 (0.5)
        assert_eq!(hn[0].image, 2);
        let sn = sample_negatives(&s, Strategy::Soft, &mut rng).unwrap();
        assert_eq!(sn[0].caption, 2);
        assert_eq!(sn[0].image, 1);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = block(&[&[1.0, 0.5, 0.5], &[0.5, 1.0, 0.5], &[0.5, 0.5, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for strategy in [Strategy::Hard, Strategy::Soft] {
            let n = sample_negatives(&s, strategy, &mut rng).unwrap();
            assert_eq!(n[0], Negatives { caption: 1, image: 1 });
            assert_eq!(n[2], Negatives { caption: 0, image: 0 });
        }
    }

    #[test]
    fn random_is_seeded_and_off_diagonal() {
        let s = SimBlock::new(8, vec![0.0; 64]);
        let a = sample_negatives(&s, Strategy::Random, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_negatives(&s, Strategy::Random, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        for (i, n) in a.iter().enumerate() {
            assert!(n.caption != i && n.image != i);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let s = SimBlock::new(1, vec![1.0]);
        assert!(sample_negatives(&s, Strategy::Hard, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn anchor(sam: (usize, usize), hard: (usize, usize), phis: (f64, f64, f64)) -> TripletAnchor {
        TripletAnchor {
            sam: Negatives {
                caption: sam.0,
                image: sam.1,
            },
            hard: Negatives {
                caption: hard.0,
                image: hard.1,
            },
            phi_pos: phis.0,
            phi_neg_caption: phis.1,
            phi_neg_image: phis.2,
        }
    }

    #[test]
    fn zero_margins_equal_sims_zero_loss() {
        let s = SimBlock::new(2, vec![0.3; 4]);
        let batch = TripletBatch {
            anchors: vec![anchor((1, 1), (1, 1), (0.5, 0.5, 0.5)), anchor((0, 0), (0, 0), (2.0, 2.0, 2.0))],
        };
        let cfg = SamConfig {
            keep_original_triplet: false,
            ..SamConfig::default()
        };
        assert_eq!(sam_loss(&batch, &s, &cfg).total, 0.0);
    }

    #[test]
    fn single_anchor_scalar() {
        // batch of two so negatives exist; only check anchor 0 by zeroing anchor 1
        let s = block(&[&[0.6, 0.55], &[0.58, 2.0]]);
        let batch = TripletBatch {
            anchors: vec![anchor((1, 1), (1, 1), (0.8, 0.3, 0.3)), anchor((0, 0), (0, 0), (0.0, 0.0, 0.0))],
        };
        let cfg = SamConfig {
            tau: 5.0,
            sam_weight: 1.0,
            keep_original_triplet: false,
            ..SamConfig::default()
        };
        // anchor 0: margins 0.1; hinges 0.1 + 0.55 - 0.6 = 0.05 and 0.1 + 0.58 - 0.6 = 0.08
        // anchor 1: pos 2.0 dominates, both hinges inactive
        let got = sam_loss(&batch, &s, &cfg).total;
        assert!((got - (0.05 + 0.08) / 2.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn sam_weight_zero_is_fixed_triplet() {
        let s = block(&[&[0.5, 0.45, 0.1], &[0.4, 0.3, 0.2], &[0.35, 0.1, 0.6]]);
        let negs = sample_negatives(&s, Strategy::Hard, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = TripletBatch {
            anchors: negs
                .iter()
                .map(|&n| TripletAnchor {
                    sam: n,
                    hard: n,
                    phi_pos: 3.0,
                    phi_neg_caption: 0.2,
                    phi_neg_image: 1.0,
                })
                .collect(),
        };
        let cfg = SamConfig {
            sam_weight: 0.0,
            keep_original_triplet: true,
            ..SamConfig::default()
        };
        let expected: f64 = (0..3)
            .map(|a| fixed_triplet_loss(&s.triplet(a, negs[a]), 0.2))
            .sum::<f64>()
            / 3.0;
        assert_eq!(sam_loss(&batch, &s, &cfg).total, expected);
    }

    #[test]
    fn config_validation() {
        assert!(SamConfig::default().validate().is_ok());
        assert!(SamConfig { tau: 0.0, ..SamConfig::default() }.validate().is_err());
        assert!(SamConfig { fixed_margin: -0.1, ..SamConfig::default() }.validate().is_err());
        assert!(SamConfig { sam_weight: -1.0, ..SamConfig::default() }.validate().is_err());
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("sn".parse::<Strategy>().unwrap(), Strategy::Soft);
        assert_eq!("HN".parse::<Strategy>().unwrap(), Strategy::Hard);
        assert!("xx".parse::<Strategy>().is_err());
    }
}

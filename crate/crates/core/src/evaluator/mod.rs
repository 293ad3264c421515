//! Six-dimension scoring with a programmatic oracle judge, the negligible
//! difference cap, SSIM, rater statistics and a remote judge client.

pub mod judge;
pub mod report;
pub mod ssim;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::EditSample;
use crate::error::{MiveError, Result};
use crate::tensor::Video;

pub use judge::{remote_judge, sample_frame_indices, JudgeClient, JudgeRequest};
pub use ssim::{ssim, ssim_video};
pub use stats::{krippendorff_alpha, wilcoxon_signed_rank, Wilcoxon};

/// Clamp scale of the oracle error terms.
pub const TAU: f64 = 0.25;
/// Mean absolute difference under which an output counts as unedited.
pub const NEGLIGIBLE_DELTA: f64 = 1e-3;
pub const CAP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    IA,
    CC,
    TS,
    PR,
    VA,
    SC,
}

impl Dimension {
    pub const ALL: [Dimension; 6] = [
        Dimension::IA,
        Dimension::CC,
        Dimension::TS,
        Dimension::PR,
        Dimension::VA,
        Dimension::SC,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Dimension::IA => "IA",
            Dimension::CC => "CC",
            Dimension::TS => "TS",
            Dimension::PR => "PR",
            Dimension::VA => "VA",
            Dimension::SC => "SC",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Dimension::IA => "Instruction Adherence",
            Dimension::CC => "Content Consistency",
            Dimension::TS => "Temporal Smoothness",
            Dimension::PR => "Physical Realism",
            Dimension::VA => "Visual Aesthetics",
            Dimension::SC => "Style Coherence",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub score: f64,
    pub reasoning: String,
}

/// One score and justification per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Dimension, DimensionScore>", into = "BTreeMap<Dimension, DimensionScore>")]
pub struct EvalScores {
    dims: BTreeMap<Dimension, DimensionScore>,
}

impl EvalScores {
    /// Requires all six dimensions, each in `[0, 10]`.
    pub fn new(dims: BTreeMap<Dimension, DimensionScore>) -> Result<Self> {
        for d in Dimension::ALL {
            let s = dims
                .get(&d)
                .ok_or_else(|| MiveError::format(format!("scores lack dimension {d}")))?;
            if !(0.0..=10.0).contains(&s.score) {
                return Err(MiveError::format(format!("{d} score {} outside [0, 10]", s.score)));
            }
        }
        Ok(Self { dims })
    }

    pub fn get(&self, d: Dimension) -> f64 {
        self.dims[&d].score
    }

    pub fn reasoning(&self, d: Dimension) -> &str {
        &self.dims[&d].reasoning
    }

    pub fn values(&self) -> [f64; 6] {
        Dimension::ALL.map(|d| self.get(d))
    }

    pub fn mean(&self) -> f64 {
        self.values().iter().sum::<f64>() / 6.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Dimension, &DimensionScore)> {
        self.dims.iter().map(|(d, s)| (*d, s))
    }
}

impl TryFrom<BTreeMap<Dimension, DimensionScore>> for EvalScores {
    type Error = MiveError;

    fn try_from(dims: BTreeMap<Dimension, DimensionScore>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<EvalScores> for BTreeMap<Dimension, DimensionScore> {
    fn from(s: EvalScores) -> Self {
        s.dims
    }
}

fn score_from_error(err: f64) -> f64 {
    (10.0 * (1.0 - (err / TAU).min(1.0))).clamp(0.0, 10.0)
}

/// Mean absolute difference over all channels of the pixels where
/// `select(frame, y, x)` holds; `None` when nothing is selected.
fn region_mae(a: &Video, b: &Video, mask: &Array3<bool>, want: bool) -> Option<f64> {
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((f, y, x), &m) in mask.indexed_iter() {
        if m == want {
            for c in 0..3 {
                sum += (da[[f, c, y, x]] - db[[f, c, y, x]]).abs();
            }
            n += 3;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over frames `1..T` of `|(a_t - a_{t-1}) - (b_t - b_{t-1})|`.
fn temporal_error(a: &Video, b: &Video) -> Option<f64> {
    let t = a.frames();
    if t < 2 {
        return None;
    }
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    for f in 1..t {
        let ea = &da.index_axis(Axis(0), f) - &da.index_axis(Axis(0), f - 1);
        let eb = &db.index_axis(Axis(0), f) - &db.index_axis(Axis(0), f - 1);
        sum += (&ea - &eb).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Some(sum / (t - 1) as f64)
}

/// Forward-difference gradient magnitude `|dx| + |dy|` of a luma plane.
fn edge_map(l: &Array2<f64>) -> Array2<f64> {
    let (h, w) = l.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = if x + 1 < w { l[[y, x + 1]] - l[[y, x]] } else { 0.0 };
        let dy = if y + 1 < h { l[[y + 1, x]] - l[[y, x]] } else { 0.0 };
        dx.abs() + dy.abs()
    })
}

fn edge_error(a: &Video, b: &Video) -> f64 {
    let t = a.frames();
    (0..t)
        .map(|f| (&edge_map(&a.luma(f)) - &edge_map(&b.luma(f))).mapv(f64::abs).mean().unwrap_or(0.0))
        .sum::<f64>()
        / t as f64
}

fn luma_range(v: &Video, f: usize) -> f64 {
    let l = v.luma(f);
    let lo = l.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

fn range_error(a: &Video, b: &Video) -> f64 {
    let t = a.frames();
    (0..t).map(|f| (luma_range(a, f) - luma_range(b, f)).abs()).sum::<f64>() / t as f64
}

fn channel_stats(v: &Video, f: usize, c: usize) -> (f64, f64) {
    let plane = v.data().index_axis(Axis(0), f).index_axis(Axis(0), c).to_owned();
    let mean = plane.mean().unwrap_or(0.0);
    let var = plane.mapv(|x| (x - mean) * (x - mean)).mean().unwrap_or(0.0);
    (mean, var.sqrt())
}

fn color_stats_error(a: &Video, b: &Video) -> f64 {
    let t = a.frames();
    let mut sum = 0.0;
    for f in 0..t {
        for c in 0..3 {
            let (ma, sa) = channel_stats(a, f, c);
            let (mb, sb) = channel_stats(b, f, c);
            sum += (ma - mb).abs() + (sa - sb).abs();
        }
    }
    sum / (3 * t) as f64
}

/// Deterministic judge backed by the sample's exact ground truth.
///
/// IA, CC and TS follow directly from the target, source and mask. PR, VA and
/// SC are proxies: edge structure, per-frame luma range and per-frame colour
/// statistics, each compared against the target.
pub fn oracle_scores(sample: &EditSample, output: &Video) -> Result<EvalScores> {
    output.check_same_shape(&sample.tgt_video)?;
    output.check_same_shape(&sample.src_video)?;
    let mask = &sample.gt_mask;
    let (t, h, w) = output.dims();
    if mask.dim() != (t, h, w) {
        return Err(MiveError::shape(format!("mask {:?} does not cover a {t}x{h}x{w} video", mask.dim())));
    }
    let mut dims = BTreeMap::new();
    let mut put = |d: Dimension, err: Option<f64>, what: &str| {
        let (score, reasoning) = match err {
            Some(e) => (score_from_error(e), format!("{what} {e:.5} (tau {TAU})")),
            None => (10.0, format!("{what}: nothing to compare")),
        };
        dims.insert(d, DimensionScore { score, reasoning });
    };
    put(Dimension::IA, region_mae(output, &sample.tgt_video, mask, true), "mean abs error to target inside edit mask");
    put(Dimension::CC, region_mae(output, &sample.src_video, mask, false), "mean abs error to source outside edit mask");
    put(Dimension::TS, temporal_error(output, &sample.tgt_video), "mean frame-difference error to target");
    put(Dimension::PR, Some(edge_error(output, &sample.tgt_video)), "mean edge-magnitude error to target");
    put(Dimension::VA, Some(range_error(output, &sample.tgt_video)), "mean luma-range error to target");
    put(Dimension::SC, Some(color_stats_error(output, &sample.tgt_video)), "mean colour-statistics error to target");
    EvalScores::new(dims)
}

/// Caps every dimension at 6.0 when `output` barely differs from `src`.
pub fn apply_negligible_cap(scores: &EvalScores, src: &Video, output: &Video) -> Result<EvalScores> {
    if src.mean_abs_diff(output)? >= NEGLIGIBLE_DELTA {
        return Ok(scores.clone());
    }
    let dims = scores
        .iter()
        .map(|(d, s)| {
            let mut s = s.clone();
            if s.score > CAP {
                s.score = CAP;
                s.reasoning.push_str("; capped: output is indistinguishable from the source");
            }
            (d, s)
        })
        .collect();
    EvalScores::new(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    Penalize,
    NoPenalty,
}

/// Pixels within this max-channel distance of the anchor colour count as
/// showing the element.
const ANCHOR_TOL: f64 = 0.1;

fn region_color(v: &Video, f: usize, region: &Array3<bool>, frame: usize) -> [f64; 3] {
    let d = v.data();
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for ((y, x), &m) in region.index_axis(Axis(0), frame).indexed_iter() {
        if m {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += d[[f, c, y, x]];
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n)
}

fn visible(v: &Video, f: usize, anchor: [f64; 3], area: usize) -> bool {
    let d = v.data();
    let (_, h, w) = v.dims();
    let mut hits = 0usize;
    for y in 0..h {
        for x in 0..w {
            if (0..3).all(|c| (d[[f, c, y, x]] - anchor[c]).abs() <= ANCHOR_TOL) {
                hits += 1;
            }
        }
    }
    2 * hits >= area
}

/// Decides whether an element that vanishes from `output` was also gone
/// from the source.
///
/// The element's colour is read inside `region` at its first nonempty frame:
/// from the source for the source video and from the reference image for the
/// output. A frame shows the element when at least half the initial area
/// matches that colour. Vanishing is penalized only at frames where the
/// source still shows it.
pub fn reference_persistence_check(sample: &EditSample, output: &Video, region: &Array3<bool>) -> Result<Persistence> {
    output.check_same_shape(&sample.src_video)?;
    let (t, h, w) = output.dims();
    if region.dim() != (t, h, w) {
        return Err(MiveError::shape(format!("region {:?} does not cover a {t}x{h}x{w} video", region.dim())));
    }
    let Some(f0) = (0..t).find(|&f| region.index_axis(Axis(0), f).iter().any(|&m| m)) else {
        return Ok(Persistence::NoPenalty);
    };
    let area = region.index_axis(Axis(0), f0).iter().filter(|&&m| m).count();
    let src_anchor = region_color(&sample.src_video, f0, region, f0);
    let out_anchor = region_color(&sample.ref_image, 0, region, f0);
    for f in f0..t {
        if visible(&sample.src_video, f, src_anchor, area) && !visible(output, f, out_anchor, area) {
            return Ok(Persistence::Penalize);
        }
    }
    Ok(Persistence::NoPenalty)
}

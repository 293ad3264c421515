//! Per-sample scores, per-method means and the statistics block of an
//! evaluation run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::judge::{JudgeClient, DEFAULT_FRAMES};
use super::stats::{krippendorff_alpha, wilcoxon_signed_rank, Wilcoxon};
use super::{apply_negligible_cap, oracle_scores, ssim_video, Dimension, EvalScores};
use crate::datagen::EditSample;
use crate::error::{MiveError, Result};
use crate::tensor::Video;

/// Which judge scores the outputs.
#[derive(Debug, Clone)]
pub enum Judge {
    Oracle,
    Remote(JudgeClient),
}

impl Judge {
    /// Raw judge scores followed by the negligible-difference cap.
    pub fn score(&self, sample: &EditSample, output: &Video) -> Result<EvalScores> {
        let raw = match self {
            Judge::Oracle => oracle_scores(sample, output)?,
            Judge::Remote(client) => client.score(sample, output, DEFAULT_FRAMES)?,
        };
        apply_negligible_cap(&raw, &sample.src_video, output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub method: String,
    pub sample: String,
    pub edit_type: String,
    pub scores: EvalScores,
    pub mean: f64,
    pub ssim_to_target: f64,
    pub mae_to_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub samples: usize,
    pub means: BTreeMap<Dimension, f64>,
    pub overall: f64,
    pub ssim_to_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub result: Option<Wilcoxon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_note: Option<String>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub table: String,
    pub stats: StatsBlock,
}

/// Scores one output against its sample.
pub fn evaluate_one(judge: &Judge, method: &str, sample: &EditSample, output: &Video) -> Result<SampleEval> {
    let scores = judge.score(sample, output)?;
    Ok(SampleEval {
        method: method.to_string(),
        sample: sample.meta.id.clone(),
        edit_type: sample.edit_type().name().to_string(),
        mean: scores.mean(),
        scores,
        ssim_to_target: ssim_video(output, &sample.tgt_video)?,
        mae_to_target: output.mean_abs_diff(&sample.tgt_video)?,
    })
}

/// Per-method dimension means in method-name order.
pub fn summarize(evals: &[SampleEval]) -> BTreeMap<String, MethodSummary> {
    let mut groups: BTreeMap<String, Vec<&SampleEval>> = BTreeMap::new();
    for e in evals {
        groups.entry(e.method.clone()).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(m, es)| {
            let n = es.len() as f64;
            let means: BTreeMap<Dimension, f64> = Dimension::ALL
                .iter()
                .map(|&d| (d, es.iter().map(|e| e.scores.get(d)).sum::<f64>() / n))
                .collect();
            let overall = means.values().sum::<f64>() / 6.0;
            let ssim = es.iter().map(|e| e.ssim_to_target).sum::<f64>() / n;
            let summary = MethodSummary {
                samples: es.len(),
                means,
                overall,
                ssim_to_target: ssim,
            };
            (m, summary)
        })
        .collect()
}

/// Markdown table with one row per method and one column per dimension.
pub fn markdown_table(methods: &BTreeMap<String, MethodSummary>) -> String {
    let mut out = String::from("| Method |");
    for d in Dimension::ALL {
        out.push_str(&format!(" {d} |"));
    }
    out.push_str(" Mean |\n|---|");
    out.push_str(&"---:|".repeat(7));
    out.push('\n');
    for (name, s) in methods {
        out.push_str(&format!("| {name} |"));
        for d in Dimension::ALL {
            out.push_str(&format!(" {:.2} |", s.means[&d]));
        }
        out.push_str(&format!(" {:.2} |\n", s.overall));
    }
    out
}

/// Paired tests on per-sample mean scores for every pair of methods.
pub fn pairwise_tests(evals: &[SampleEval]) -> Vec<PairwiseTest> {
    let mut by_method: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for e in evals {
        by_method.entry(&e.method).or_default().insert(&e.sample, e.mean);
    }
    let names: Vec<&str> = by_method.keys().copied().collect();
    let mut out = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ma, mb) = (&by_method[a], &by_method[b]);
            let shared: Vec<&str> = ma.keys().filter(|k| mb.contains_key(*k)).copied().collect();
            let x: Vec<f64> = shared.iter().map(|k| ma[k]).collect();
            let y: Vec<f64> = shared.iter().map(|k| mb[k]).collect();
            let (result, note) = match wilcoxon_signed_rank(&x, &y) {
                Ok(w) => (Some(w), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(PairwiseTest {
                a: a.to_string(),
                b: b.to_string(),
                result,
                note,
            });
        }
    }
    out
}

/// Reads `rater,item,score` rows into a raters x items table.
pub fn read_ratings_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<Option<f64>>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| MiveError::format(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for rec in rdr.deserialize() {
        let (rater, item, score): (String, String, f64) =
            rec.map_err(|e| MiveError::format(format!("{}: {e}", path.display())))?;
        rows.push((rater, item, score));
    }
    Ok(ratings_table(&rows))
}

pub fn ratings_table(rows: &[(String, String, f64)]) -> Vec<Vec<Option<f64>>> {
    let mut raters: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let mut items: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
    raters.sort();
    raters.dedup();
    items.sort();
    items.dedup();
    let mut table = vec![vec![None; items.len()]; raters.len()];
    for (r, i, s) in rows {
        let ri = raters.binary_search(&r.as_str()).expect("rater listed");
        let ii = items.binary_search(&i.as_str()).expect("item listed");
        table[ri][ii] = Some(*s);
    }
    table
}

/// Assembles the full report; `ratings` feeds the agreement statistic.
pub fn build_report(evals: Vec<SampleEval>, ratings: Option<&[Vec<Option<f64>>]>) -> EvalReport {
    let methods = summarize(&evals);
    let table = markdown_table(&methods);
    let mut stats = StatsBlock {
        pairwise: pairwise_tests(&evals),
        ..Default::default()
    };
    if let Some(r) = ratings {
        match krippendorff_alpha(r) {
            Ok(a) => stats.alpha = Some(a),
            Err(e) => stats.alpha_note = Some(e.to_string()),
        }
    }
    EvalReport {
        samples: evals,
        methods,
        table,
        stats,
    }
}

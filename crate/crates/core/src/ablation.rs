//! Architecture and layer-selection ablations under one shared toy setting.

use serde::{Deserialize, Serialize};

use crate::adapter::LayerMode;
use crate::backbone::Arch;
use crate::datagen::EditSample;
use crate::editor::{Editor, DEFAULT_STEPS};
use crate::error::Result;
use crate::evaluator::report::{evaluate_one, summarize, Judge, MethodSummary, SampleEval};
use crate::evaluator::Dimension;
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub arch: Arch,
    pub layer_mode: LayerMode,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}+{}", self.arch.name(), self.layer_mode.name())
    }
}

/// Every architecture under every layer mode: twelve trainings.
pub fn full_grid() -> Vec<Cell> {
    Arch::ALL
        .iter()
        .flat_map(|&arch| LayerMode::ALL.map(|layer_mode| Cell { arch, layer_mode }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub edit_steps: usize,
    pub edit_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            edit_steps: DEFAULT_STEPS,
            edit_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<MethodSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Architecture,
    Layers,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: Table,
    pub label: String,
    pub cell: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
    pub rows: Vec<AblationRow>,
    pub markdown: String,
}

/// Trains `cell` on `train`, edits every `eval` sample and scores it with the
/// oracle judge.
pub fn run_cell(cell: Cell, cfg: &AblationConfig, train: &[EditSample], eval: &[EditSample]) -> Result<(f64, Vec<SampleEval>)> {
    let mut tc = cfg.train.clone();
    tc.model.arch = cell.arch;
    tc.model.layer_mode = cell.layer_mode;
    let mut trainer = Trainer::new(tc.clone(), train)?;
    let history = trainer.run(None, |_| {})?;
    let final_loss = history.last().map_or(f64::NAN, |m| m.loss);
    let editor = Editor::new(&tc, trainer.params)?;
    let mut evals = Vec::with_capacity(eval.len());
    for s in eval {
        let out = editor.edit(&s.src_video, &s.ref_image, s.instruction(), cfg.edit_steps, cfg.edit_seed)?;
        evals.push(evaluate_one(&Judge::Oracle, &cell.name(), s, &out)?);
    }
    Ok((final_loss, evals))
}

/// Runs each cell in order; a failing cell is recorded and the rest continue.
pub fn run_ablation(
    cells: &[Cell],
    cfg: &AblationConfig,
    train: &[EditSample],
    eval: &[EditSample],
    mut progress: impl FnMut(&CellResult),
) -> AblationReport {
    let mut results = Vec::with_capacity(cells.len());
    for &cell in cells {
        let r = match run_cell(cell, cfg, train, eval) {
            Ok((loss, evals)) => CellResult {
                cell,
                final_loss: Some(loss),
                summary: summarize(&evals).into_values().next(),
                error: None,
            },
            Err(e) => CellResult {
                cell,
                final_loss: None,
                summary: None,
                error: Some(format!("{}: {e}", e.kind())),
            },
        };
        progress(&r);
        results.push(r);
    }
    let rows = table_rows(&results);
    let markdown = render_markdown(&rows);
    AblationReport { cells: results, rows, markdown }
}

/// Architecture rows use both layers; layer rows use the self-attention
/// model; the grid lists every cell.
pub fn table_rows(results: &[CellResult]) -> Vec<AblationRow> {
    let row = |table: Table, label: String, r: &CellResult| AblationRow {
        table,
        label,
        cell: r.cell,
        means: r.summary.as_ref().map(|s| Dimension::ALL.map(|d| s.means[&d])),
        overall: r.summary.as_ref().map(|s| s.overall),
        error: r.error.clone(),
    };
    let mut rows = Vec::new();
    for r in results.iter().filter(|r| r.cell.layer_mode == LayerMode::FirstLast) {
        rows.push(row(Table::Architecture, r.cell.arch.name().to_string(), r));
    }
    for r in results.iter().filter(|r| r.cell.arch == Arch::UnifiedSelfAttn) {
        rows.push(row(Table::Layers, r.cell.layer_mode.name().to_string(), r));
    }
    for r in results {
        rows.push(row(Table::Grid, r.cell.name(), r));
    }
    rows
}

pub fn render_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for (table, title) in [
        (Table::Architecture, "Architecture"),
        (Table::Layers, "Layer selection"),
        (Table::Grid, "Full grid"),
    ] {
        out.push_str(&format!("### {title}\n\n| Variant |"));
        for d in Dimension::ALL {
            out.push_str(&format!(" {d} |"));
        }
        out.push_str(" Mean |\n|---|");
        out.push_str(&"---:|".repeat(7));
        out.push('\n');
        for r in rows.iter().filter(|r| r.table == table) {
            out.push_str(&format!("| {} |", r.label));
            match (&r.means, r.overall) {
                (Some(m), Some(o)) => {
                    for v in m {
                        out.push_str(&format!(" {v:.2} |"));
                    }
                    out.push_str(&format!(" {o:.2} |\n"));
                }
                _ => {
                    out.push_str(&" - |".repeat(7));
                    out.push('\n');
                }
            }
        }
        out.push('\n');
    }
    out
}

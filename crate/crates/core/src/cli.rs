//! The `mive` command line: argument parsing and subcommand wiring.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ndarray::{concatenate, Axis};
use serde::Serialize;

use crate::ablation::{full_grid, run_ablation, AblationConfig, AblationReport, Cell};
use crate::adapter::LayerMode;
use crate::backbone::{Arch, PredictionTarget};
use crate::config::FileConfig;
use crate::datagen::{
    cap_per_category, filter_decision, generate_corpus, read_dataset, read_sample, split_dir, write_dataset,
    write_sample, EditSample, EditType, GenConfig, Verdict,
};
use crate::diagnostics::{cross_modal_attention, depth_report, downsample_mask, mean_text_heatmap, write_heatmap};
use crate::editor::{Editor, DEFAULT_STEPS};
use crate::encoder::{EncoderConfig, ToyEncoder, Vocab};
use crate::error::{MiveError, Result};
use crate::evaluator::judge::JudgeClient;
use crate::evaluator::report::{build_report, evaluate_one, read_ratings_csv, EvalReport, Judge};
use crate::evaluator::{apply_negligible_cap, oracle_scores};
use crate::io::video::{read_image, read_mask, read_video, write_video, DEFAULT_FPS};
use crate::trainer::{checkpoint_dir, LrDecay, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mive", version, about = "Reference-guided video editing toolkit")]
pub struct Cli {
    /// JSON file with one section per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic paired samples.
    GenData(GenDataArgs),
    /// Threshold and cap a dataset by judge score.
    Filter(FilterArgs),
    /// Train the adapter and transformer with flow matching.
    Train(TrainArgs),
    /// Edit a video from a reference frame and an instruction.
    Edit(EditArgs),
    /// Cross-modal attention heatmaps and mask ratios of the encoder.
    Diagnose(DiagnoseArgs),
    /// Score edited outputs against their samples.
    Evaluate(EvaluateArgs),
    /// Train and score every architecture and layer-selection variant.
    Ablate(AblateArgs),
    /// Render a saved evaluation or ablation report as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of samples, cycling through the edit types.
    #[arg(long)]
    pub count: Option<usize>,
    /// Comma-separated edit types.
    #[arg(long, value_delimiter = ',')]
    pub types: Option<Vec<String>>,
    /// Data root; defaults to $MIVE_DATA_DIR, then ./data.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Split directory holding sample folders.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON object mapping sample id to a 0-10 score; the oracle scores the
    /// target otherwise.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Maximum retained samples per edit type.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Copy retained samples here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decision log path; defaults to `<dataset>/filter.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long = "layer-mode")]
    pub layer_mode: Option<LayerMode>,
    /// `x0` or `velocity`.
    #[arg(long, value_parser = parse_target)]
    pub target: Option<PredictionTarget>,
    #[arg(long, value_enum)]
    pub decay: Option<LrDecay>,
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<usize>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Source video directory.
    #[arg(long)]
    pub src: PathBuf,
    /// Edited first frame (PNG).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Checkpoint directory with weights.bin and config.json.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Source video directory.
    #[arg(long, required_unless_present = "sample")]
    pub video: Option<PathBuf>,
    #[arg(long, required_unless_present = "sample")]
    pub text: Option<String>,
    /// Reference image; the first video frame when absent.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Pixel mask directory over the video frames.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Sample directory supplying video, reference, text and mask.
    #[arg(long)]
    pub sample: Option<PathBuf>,
    /// Layers to export heatmaps for; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Encoder settings from a training checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Either `<method>/<sample_id>/` video folders or `<sample_id>/` folders
    /// for a single method.
    #[arg(long)]
    pub outputs: PathBuf,
    /// `oracle` or `remote`.
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Human ratings CSV with columns rater,item,score.
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Samples to edit and score; the training split when absent.
    #[arg(long = "eval")]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "edit-steps")]
    pub edit_steps: Option<usize>,
    /// Restrict to `arch+layer_mode` cells.
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// evaluation.json or ablation.json.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_target(s: &str) -> std::result::Result<PredictionTarget, String> {
    match s {
        "x0" => Ok(PredictionTarget::X0),
        "velocity" => Ok(PredictionTarget::Velocity),
        other => Err(format!("unknown prediction target `{other}` (x0 or velocity)")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| MiveError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| MiveError::io(path, e))
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&file, a),
        Command::Filter(a) => filter(&file, a),
        Command::Train(a) => train(&file, a),
        Command::Edit(a) => edit(&file, a),
        Command::Diagnose(a) => diagnose(&file, a),
        Command::Evaluate(a) => evaluate(&file, a),
        Command::Ablate(a) => ablate(&file, a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(file: &FileConfig, a: GenDataArgs) -> Result<()> {
    let sec = &file.gen_data;
    let defaults = GenConfig::default();
    let cfg = GenConfig {
        frames: a.frames.or(sec.frames).unwrap_or(defaults.frames),
        height: a.height.or(sec.height).unwrap_or(defaults.height),
        width: a.width.or(sec.width).unwrap_or(defaults.width),
    };
    let types = match a.types.or_else(|| sec.types.clone()) {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<EditType>>>()?,
        None => EditType::ALL.to_vec(),
    };
    let count = a.count.or(sec.count).unwrap_or(8);
    let split = a.split.or_else(|| sec.split.clone()).unwrap_or_else(|| "train".into());
    let root = file.data_root(a.out.as_deref());
    let samples = generate_corpus(&types, count, a.seed, cfg)?;
    write_dataset(&root, &split, &samples)?;
    println!("wrote {} samples to {}", samples.len(), split_dir(&root, &split).display());
    Ok(())
}

#[derive(Serialize)]
struct FilterEntry {
    id: String,
    edit_type: String,
    score: f64,
    verdict: Verdict,
    reason: String,
    kept: bool,
}

fn filter(file: &FileConfig, a: FilterArgs) -> Result<()> {
    let samples = read_dataset(&a.dataset)?;
    let scores: Option<BTreeMap<String, f64>> = match a.scores.or_else(|| file.filter.scores.clone()) {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| MiveError::io(&p, e))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let mut retained = Vec::new();
    let mut decisions = Vec::new();
    for s in samples {
        let score = match &scores {
            Some(m) => *m
                .get(&s.meta.id)
                .ok_or_else(|| MiveError::format(format!("no score for sample {}", s.meta.id)))?,
            None => {
                let raw = oracle_scores(&s, &s.tgt_video)?;
                apply_negligible_cap(&raw, &s.src_video, &s.tgt_video)?.mean()
            }
        };
        let d = filter_decision(score)?;
        decisions.push((s.meta.id.clone(), s.edit_type(), d.clone()));
        if d.verdict == Verdict::Retain {
            retained.push(s);
        }
    }
    let cap = a.cap.or(file.filter.cap).unwrap_or(usize::MAX);
    let kept = cap_per_category(retained, cap);
    let kept_ids: std::collections::HashSet<&str> = kept.iter().map(|s| s.meta.id.as_str()).collect();
    let log: Vec<FilterEntry> = decisions
        .iter()
        .map(|(id, t, d)| FilterEntry {
            id: id.clone(),
            edit_type: t.name().into(),
            score: d.score,
            verdict: d.verdict,
            reason: d.reason.clone(),
            kept: kept_ids.contains(id.as_str()),
        })
        .collect();
    let report = a.report.unwrap_or_else(|| a.dataset.join("filter.json"));
    write_json(&report, &log)?;
    if let Some(out) = &a.out {
        for s in &kept {
            write_sample(out.join(&s.meta.id), s)?;
        }
    }
    println!("kept {} of {} samples; decisions in {}", kept.len(), log.len(), report.display());
    Ok(())
}

fn train(file: &FileConfig, a: TrainArgs) -> Result<()> {
    let mut cfg = file.train.clone().unwrap_or_default();
    cfg.seed = a.seed;
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.decay {
        cfg.decay = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.arch {
        cfg.model.arch = v;
    }
    if let Some(v) = a.layer_mode {
        cfg.model.layer_mode = v;
    }
    if let Some(v) = a.target {
        cfg.model.prediction_target = v;
    }
    cfg.warmup_steps = cfg.warmup_steps.min(cfg.total_steps);
    cfg.validate()?;
    let samples = read_dataset(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir, Some(cfg), &samples)?,
        None => Trainer::new(cfg, &samples)?,
    };
    let every = (trainer.config.total_steps / 20).max(1);
    let history = trainer.run(Some(&a.out), |m| {
        if m.step % every == 0 {
            eprintln!("step {:6}  loss {:.6}  grad_norm {:.4}  lr {:.3e}", m.step, m.loss, m.grad_norm, m.lr);
        }
    })?;
    let last = history.last().map_or(f64::NAN, |m| m.loss);
    println!("trained {} steps (final loss {last:.6}); checkpoint in {}", trainer.step_count(), checkpoint_dir(&a.out).display());
    Ok(())
}

fn edit(file: &FileConfig, a: EditArgs) -> Result<()> {
    let editor = Editor::from_checkpoint(&a.ckpt)?;
    let src = read_video(&a.src)?;
    let reference = read_image(&a.reference)?;
    let steps = a.steps.or(file.edit.steps).unwrap_or(DEFAULT_STEPS);
    let out = editor.edit(&src, &reference, &a.text, steps, a.seed)?;
    write_video(&a.out, &out, DEFAULT_FPS)?;
    println!("wrote {} frames to {}", out.frames(), a.out.display());
    Ok(())
}

fn diagnose(file: &FileConfig, a: DiagnoseArgs) -> Result<()> {
    let (video, reference, text, mask) = match &a.sample {
        Some(dir) => {
            let s = read_sample(dir)?;
            let EditSample { src_video, ref_image, gt_mask, meta, .. } = s;
            (src_video, ref_image, meta.instruction, Some(gt_mask))
        }
        None => {
            let video = read_video(a.video.as_ref().expect("required by clap"))?;
            let reference = match &a.reference {
                Some(p) => read_image(p)?,
                None => video.frame(0),
            };
            let mask = a.mask.as_ref().map(read_mask).transpose()?;
            (video, reference, a.text.clone().expect("required by clap"), mask)
        }
    };
    let enc_cfg = match &a.ckpt {
        Some(dir) => TrainConfig::from_json_file(dir.join(crate::trainer::CONFIG_FILE))?.encoder,
        None => file.diagnose.encoder.clone().unwrap_or_else(EncoderConfig::default),
    };
    let vocab = Vocab::builtin();
    let encoder = ToyEncoder::new(enc_cfg, vocab.len())?;
    let (ctx, trace) = encoder.encode_unified(&vocab.tokenize(&text), &reference, &video)?;
    let layers = a
        .layers
        .or_else(|| file.diagnose.layers.clone())
        .unwrap_or_else(|| (1..=trace.num_layers()).collect());
    fs::create_dir_all(&a.out_dir).map_err(|e| MiveError::io(&a.out_dir, e))?;
    for &l in &layers {
        let att = cross_modal_attention(&trace, &ctx, l)?;
        let heat = mean_text_heatmap(&att, ctx.visual_grid)?;
        write_heatmap(&a.out_dir, &format!("layer{l:02}"), &heat)?;
    }
    let report = match mask {
        Some(m) => {
            // The reference occupies visual frame 0 and shares the first
            // frame's mask.
            let first = m.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
            let full = concatenate(Axis(0), &[first.view(), m.view()]).map_err(|e| MiveError::shape(e.to_string()))?;
            let tokens = downsample_mask(&full, encoder.config().patch)?;
            Some(depth_report(&trace, &ctx, &tokens)?)
        }
        None => None,
    };
    let path = a.out_dir.join("report.json");
    write_json(
        &path,
        &serde_json::json!({
            "num_text": ctx.num_text,
            "num_visual": ctx.num_visual,
            "visual_grid": [ctx.visual_grid.0, ctx.visual_grid.1, ctx.visual_grid.2],
            "heatmap_layers": layers,
            "mask_ratio": report,
        }),
    )?;
    println!("wrote heatmaps for {} layer(s) and {}", layers.len(), path.display());
    Ok(())
}

/// `(method, sample_id, dir)` for every output video folder.
fn discover_outputs(root: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let subdirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| MiveError::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::new();
    for d in subdirs(root)? {
        if d.join("meta.json").exists() {
            out.push((name(root), name(&d), d));
        } else {
            for s in subdirs(&d)? {
                if s.join("meta.json").exists() {
                    out.push((name(&d), name(&s), s));
                }
            }
        }
    }
    Ok(out)
}

fn evaluate(file: &FileConfig, a: EvaluateArgs) -> Result<()> {
    let samples: BTreeMap<String, EditSample> =
        read_dataset(&a.dataset)?.into_iter().map(|s| (s.meta.id.clone(), s)).collect();
    let sec = &file.evaluate;
    let judge = match a.judge.as_deref().or(sec.judge.as_deref()).unwrap_or("oracle") {
        "oracle" => Judge::Oracle,
        "remote" => {
            let endpoint = a
                .endpoint
                .or_else(|| sec.endpoint.clone())
                .ok_or_else(|| MiveError::invalid("remote judge needs --endpoint"))?;
            let mut client = JudgeClient::new(endpoint);
            if let Some(s) = sec.timeout_secs {
                client.timeout = Duration::from_secs(s);
            }
            Judge::Remote(client)
        }
        other => return Err(MiveError::invalid(format!("unknown judge `{other}` (oracle or remote)"))),
    };
    let mut evals = Vec::new();
    for (method, id, dir) in discover_outputs(&a.outputs)? {
        let sample = samples
            .get(&id)
            .ok_or_else(|| MiveError::format(format!("output {} has no sample in the dataset", dir.display())))?;
        let video = read_video(&dir)?;
        evals.push(evaluate_one(&judge, &method, sample, &video)?);
    }
    if evals.is_empty() {
        return Err(MiveError::invalid(format!("no output videos under {}", a.outputs.display())));
    }
    let ratings = match a.ratings.or_else(|| sec.ratings.clone()) {
        Some(p) => Some(read_ratings_csv(p)?),
        None => None,
    };
    let report = build_report(evals, ratings.as_deref());
    write_json(&a.report, &report)?;
    print!("{}", report.table);
    Ok(())
}

fn ablate(file: &FileConfig, a: AblateArgs) -> Result<()> {
    let mut cfg = file.ablate.clone().unwrap_or_else(|| AblationConfig {
        train: file.train.clone().unwrap_or_default(),
        ..Default::default()
    });
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.edit_seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    cfg.train.warmup_steps = cfg.train.warmup_steps.min(cfg.train.total_steps);
    if let Some(s) = a.edit_steps {
        cfg.edit_steps = s;
    }
    let train = read_dataset(&a.dataset)?;
    let eval = match &a.eval_dataset {
        Some(p) => read_dataset(p)?,
        None => train.clone(),
    };
    let cells: Vec<Cell> = match &a.cells {
        Some(names) => {
            let grid = full_grid();
            names
                .iter()
                .map(|n| {
                    grid.iter()
                        .copied()
                        .find(|c| &c.name() == n)
                        .ok_or_else(|| MiveError::invalid(format!("unknown cell `{n}`")))
                })
                .collect::<Result<_>>()?
        }
        None => full_grid(),
    };
    let report = run_ablation(&cells, &cfg, &train, &eval, |r| match &r.error {
        None => eprintln!("{}: mean {:.3}", r.cell.name(), r.summary.as_ref().map_or(f64::NAN, |s| s.overall)),
        Some(e) => eprintln!("{}: failed: {e}", r.cell.name()),
    });
    write_json(&a.out.join("ablation.json"), &report)?;
    write_text(&a.out.join("ablation.md"), &report.markdown)?;
    print!("{}", report.markdown);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| MiveError::io(&a.input, e))?;
    let markdown = if let Ok(r) = serde_json::from_str::<AblationReport>(&text) {
        r.markdown
    } else {
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| MiveError::format(format!("{}: neither an evaluation nor an ablation report ({e})", a.input.display())))?;
        let mut md = String::from("## Scores\n\n");
        md.push_str(&r.table);
        md.push_str("\n## Statistics\n\n");
        match (r.stats.alpha, &r.stats.alpha_note) {
            (Some(alpha), _) => md.push_str(&format!("Krippendorff alpha (ordinal): {alpha:.4}\n\n")),
            (None, Some(note)) => md.push_str(&format!("Krippendorff alpha: {note}\n\n")),
            _ => {}
        }
        for t in &r.stats.pairwise {
            match (&t.result, &t.note) {
                (Some(w), _) => md.push_str(&format!(
                    "- {} vs {}: W+ = {}, p = {:.4} (n = {}, {})\n",
                    t.a,
                    t.b,
                    w.statistic,
                    w.p_value,
                    w.n,
                    if w.exact { "exact" } else { "normal approx." }
                )),
                (None, Some(n)) => md.push_str(&format!("- {} vs {}: {n}\n", t.a, t.b)),
                _ => {}
            }
        }
        md
    };
    match &a.out {
        Some(p) => write_text(p, &markdown)?,
        None => print!("{markdown}"),
    }
    Ok(())
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &MiveError) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}

/// Parses `std::env::args`, runs the command and exits with its status.
pub fn main() -> ! {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let msg = serde_json::json!({"error": "usage", "message": e.to_string(), "exit_code": 2});
                eprintln!("{msg}");
                std::process::exit(2);
            }
            e.exit();
        }
    };
    match run(cli) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(e.exit_code());
        }
    }
}

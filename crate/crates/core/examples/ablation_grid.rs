//! Runs the architecture by layer-mode grid with a short training budget and
//! prints the tables.
//!
//! ```text
//! cargo run --release --example ablation_grid -- [train_steps]
//! ```

use mive::ablation::{full_grid, run_ablation, AblationConfig};
use mive::datagen::{generate_corpus, EditType, GenConfig};
use mive::trainer::TrainConfig;

fn main() -> mive::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let data = generate_corpus(&EditType::ALL, 4, 0, GenConfig::default())?;
    let cfg = AblationConfig {
        train: TrainConfig { lr: 1e-3, warmup_steps: steps / 10, total_steps: steps, ..Default::default() },
        edit_steps: 4,
        edit_seed: 0,
    };
    let report = run_ablation(&full_grid(), &cfg, &data, &data, |r| {
        eprintln!("{:40} loss {:.5}", r.cell.name(), r.final_loss.unwrap_or(f64::NAN));
    });
    print!("{}", report.markdown);
    Ok(())
}

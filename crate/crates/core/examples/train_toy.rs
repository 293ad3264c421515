//! Overfits the self-attention model on eight synthetic pairs and prints
//! the loss curve.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [lr] [batch]
//! ```

use std::time::Instant;

use mive::datagen::{generate_corpus, EditType, GenConfig};
use mive::trainer::{TrainConfig, Trainer};

fn main() -> mive::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = generate_corpus(&EditType::ALL, 8, 0, GenConfig::default())?;
    let cfg = TrainConfig {
        lr,
        warmup_steps: 100.min(steps),
        total_steps: steps,
        batch_size: batch,
        seed: 0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, &data)?;
    let start = Instant::now();
    let mut window = Vec::new();
    trainer.run(None, |m| {
        window.push(m.loss);
        if m.step % 25 == 0 {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {:5}  loss {avg:.5}  grad {:.3}  lr {:.2e}  {:.1}s",
                m.step,
                m.grad_norm,
                m.lr,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
    })?;
    Ok(())
}

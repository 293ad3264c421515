//! Oracle scoring of three stand-in methods, then the paired tests and
//! rater agreement of the report.

use mive::datagen::{generate_corpus, EditType, GenConfig};
use mive::evaluator::report::{build_report, evaluate_one, Judge};
use mive::Video;

fn blur(v: &Video) -> Video {
    let mut out = v.clone();
    let (t, h, w) = v.dims();
    for f in 0..t {
        for c in 0..3 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let d = v.data();
                    out.data_mut()[[f, c, y, x]] =
                        (d[[f, c, y - 1, x]] + d[[f, c, y + 1, x]] + d[[f, c, y, x - 1]] + d[[f, c, y, x + 1]]) / 4.0;
                }
            }
        }
    }
    out
}

fn main() -> mive::Result<()> {
    let data = generate_corpus(&EditType::ALL, 8, 5, GenConfig::default())?;
    let mut evals = Vec::new();
    for s in &data {
        evals.push(evaluate_one(&Judge::Oracle, "target", s, &s.tgt_video)?);
        evals.push(evaluate_one(&Judge::Oracle, "blurred_target", s, &blur(&s.tgt_video))?);
        evals.push(evaluate_one(&Judge::Oracle, "copy_source", s, &s.src_video)?);
    }
    let ratings = vec![
        vec![Some(5.0), Some(3.0), Some(1.0), Some(4.0)],
        vec![Some(5.0), Some(2.0), Some(1.0), Some(4.0)],
        vec![Some(4.0), Some(3.0), None, Some(4.0)],
    ];
    let report = build_report(evals, Some(&ratings));
    print!("{}", report.table);
    if let Some(a) = report.stats.alpha {
        println!("\nKrippendorff alpha {a:.4}");
    }
    for t in &report.stats.pairwise {
        match &t.result {
            Some(w) => println!("{} vs {}: W+ {} p {:.4}", t.a, t.b, w.statistic, w.p_value),
            None => println!("{} vs {}: {}", t.a, t.b, t.note.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

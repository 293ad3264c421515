//! Acceptance criteria A1-A12, one PASS/FAIL line each.
//!
//! `MIVE_ACCEPT_ONLY=A1,A8` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mive::ablation::{full_grid, run_ablation, AblationConfig, Table};
use mive::adapter::{LayerFeatures, LayerMode};
use mive::backbone::{block_modulation, init_params, visual_clean_mask, Arch, BackboneConfig, Conditioning};
use mive::codec::{build_joint, decode, encode, latent_frames, patch_split, LATENT_CHANNELS};
use mive::datagen::{filter_decision, generate_corpus, EditSample, EditType, GenConfig, Verdict};
use mive::diagnostics::{attention_mask_ratio, cross_modal_attention, CrossModalAttention, TokenMask};
use mive::editor::{Editor, DEFAULT_STEPS};
use mive::encoder::{EncoderConfig, ToyEncoder, Vocab};
use mive::evaluator::{
    apply_negligible_cap, krippendorff_alpha, oracle_scores, ssim, wilcoxon_signed_rank, Dimension, DimensionScore,
    EvalScores,
};
use mive::pipeline::Prepared;
use mive::trainer::{sample_loss, LrDecay, TrainConfig, Trainer};
use mive::{Latent, Video};
use mive_autograd::{Graph, Matrix, ParamStore};
use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const A1_TOL: f64 = 1e-6;
const A2_UNIFORM_TOL: f64 = 1e-9;
const A2_HAND_TOL: f64 = 1e-12;
const A4_REL_TOL: f64 = 1e-4;
const A4_STEP: f64 = 1e-5;
const A4_FLOOR: f64 = 1e-6;
const A4_PARAMS: usize = 200;
const A5_DROP: f64 = 0.90;
const A5_WINDOW: usize = 10;
const A5_STEPS: usize = 2000;
const A6_MAE: f64 = 0.05;
const A6_MIN_SCORE: f64 = 8.0;
const A9_CAP: f64 = 6.0;
const A10_KRIPP_TOL: f64 = 1e-10;
const A10_P_TOL: f64 = 1e-12;
const A12_SYM_TOL: f64 = 1e-12;
const A12_CONST_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn to_array(m: &Matrix) -> Array2<f64> {
    Array2::from_shape_vec((m.rows(), m.cols()), m.data().to_vec()).unwrap()
}

// A1 -------------------------------------------------------------------------

fn rms_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Full head-averaged attention of block `layer`, rebuilt from the block
/// input and the encoder weights.
fn attention_oracle(enc: &ToyEncoder, input: &Array2<f64>, layer: usize) -> Array2<f64> {
    let cfg = enc.config();
    let w = |n: &str| to_array(enc.params().get(&format!("blocks.{}.{n}", layer - 1)).unwrap());
    let xn = rms_rows(input);
    let (q, k) = (xn.dot(&w("wq")), xn.dot(&w("wk")));
    let hd = cfg.dim / cfg.heads;
    let s = input.nrows();
    let mut avg = Array2::<f64>::zeros((s, s));
    for h in 0..cfg.heads {
        let qh = rms_rows(&q.slice(s![.., h * hd..(h + 1) * hd]).to_owned());
        let kh = rms_rows(&k.slice(s![.., h * hd..(h + 1) * hd]).to_owned());
        avg += &softmax_rows(&(qh.dot(&kh.t()) / (hd as f64).sqrt()));
    }
    avg / cfg.heads as f64
}

fn a1() -> Outcome {
    let vocab = Vocab::builtin();
    let words = ["add", "red", "circle", "remove", "blue", "square", "background"];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut max_s = 0;
    let cases = 60;
    for case in 0..cases {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let cfg = EncoderConfig {
            layers: rng.random_range(1..=3),
            heads,
            dim: heads * 2 * rng.random_range(1..=4),
            patch: [4, 8][rng.random_range(0..2)],
            init_std: 0.5,
            seed: case,
            ..Default::default()
        };
        let frames_cap = if cfg.patch == 4 { 1 } else { 7 };
        let frames = rng.random_range(1..=frames_cap);
        let n_text = rng.random_range(0..=4);
        let text: Vec<&str> = (0..n_text).map(|_| words[rng.random_range(0..words.len())]).collect();
        let tokens = vocab.tokenize(&text.join(" "));
        let noise = |t: usize, rng: &mut ChaCha8Rng| {
            Video::new(Array4::from_shape_simple_fn((t, 3, 8, 8), || rng.random::<f64>())).unwrap()
        };
        let (r, v) = (noise(1, &mut rng), noise(frames, &mut rng));
        let enc = ToyEncoder::new(cfg.clone(), vocab.len()).map_err(|e| e.to_string())?;
        let (ctx, trace) = enc.encode_unified(&tokens, &r, &v).map_err(|e| e.to_string())?;
        ensure(ctx.len() <= 12, || format!("case {case}: S = {} exceeds 12", ctx.len()))?;
        max_s = max_s.max(ctx.len());
        for l in 1..=cfg.layers {
            let full = attention_oracle(&enc, &to_array(&trace.hidden[l - 1]), l);
            let block = full.slice(s![0..ctx.num_text, ctx.num_text..]);
            let got = cross_modal_attention(&trace, &ctx, l).map_err(|e| e.to_string())?;
            let got = to_array(&got.matrix);
            ensure(got.dim() == block.dim(), || format!("case {case}: block shape {:?} vs {:?}", got.dim(), block.dim()))?;
            for (a, b) in got.iter().zip(block.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < A1_TOL, || format!("max abs error {worst:.3e} >= {A1_TOL:e}"))?;
    Ok(format!("{cases} micro-encoders (S <= {max_s}, L <= 3), max abs error {worst:.2e} < {A1_TOL:e}"))
}

// A2 -------------------------------------------------------------------------

fn random_mask(grid: (usize, usize, usize), rng: &mut ChaCha8Rng) -> TokenMask {
    let m = grid.0 * grid.1 * grid.2;
    let members = (0..m).filter(|_| rng.random_bool(0.4)).collect();
    TokenMask::new(members, grid).unwrap()
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_uniform = 0.0f64;
    for _ in 0..200 {
        let grid = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let (n, m) = (rng.random_range(1..6), grid.0 * grid.1 * grid.2);
        let s = n + m;
        let a = CrossModalAttention { layer: 1, matrix: Matrix::filled(n, m, 1.0 / s as f64) };
        let mask = random_mask(grid, &mut rng);
        let r = attention_mask_ratio(&a, &mask).map_err(|e| e.to_string())?;
        worst_uniform = worst_uniform.max((r - mask.fraction()).abs());
    }
    ensure(worst_uniform < A2_UNIFORM_TOL, || format!("uniform case off by {worst_uniform:.3e}"))?;

    for i in 0..1000 {
        let grid = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let (n, m) = (rng.random_range(1..8), grid.0 * grid.1 * grid.2);
        let logits = Matrix::randn(n, n + m, 3.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let e: Vec<f64> = logits.row(r).iter().map(|v| v.exp()).collect();
                let z: f64 = e.iter().sum();
                e[n..].iter().map(|v| v / z).collect()
            })
            .collect();
        let a = CrossModalAttention { layer: 1, matrix: Matrix::from_rows(&rows).unwrap() };
        let r = attention_mask_ratio(&a, &random_mask(grid, &mut rng)).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&r), || format!("instance {i}: R = {r}"))?;
    }

    // Column sums 0.4, 0.25, 0.35 over a total of 1.0.
    let a = CrossModalAttention {
        layer: 1,
        matrix: Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.3, 0.05, 0.05]]).unwrap(),
    };
    let grid = (1, 1, 3);
    for (members, expect) in [(vec![0], 0.4), (vec![1, 2], 0.6), (vec![], 0.0), (vec![0, 1, 2], 1.0)] {
        let r = attention_mask_ratio(&a, &TokenMask::new(members.clone(), grid).unwrap()).map_err(|e| e.to_string())?;
        ensure((r - expect).abs() < A2_HAND_TOL, || format!("2x3 mask {members:?}: {r} vs {expect}"))?;
    }
    Ok(format!("uniform |R - frac| <= {worst_uniform:.1e}; 1000 random R in [0,1]; 2x3 hand case within {A2_HAND_TOL:e}"))
}

// A3 -------------------------------------------------------------------------

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let patch = 2;
    for case in 0..200 {
        let t = 4 * rng.random_range(0..6usize) + 1;
        let (h, w) = (16 * rng.random_range(1..=4usize), 16 * rng.random_range(1..=4usize));
        let video = Video::new(Array4::from_shape_simple_fn((t, 3, h, w), || rng.random::<f64>())).unwrap();
        let z = encode(&video).map_err(|e| e.to_string())?;
        let tp = t / 4 + 1;
        let (hp, wp) = (h / 8, w / 8);
        ensure(latent_frames(t) == tp, || format!("case {case}: latent_frames({t}) = {}", latent_frames(t)))?;
        ensure(z.shape() == [tp, LATENT_CHANNELS, hp, wp], || format!("case {case}: latent {:?}", z.shape()))?;
        ensure(decode(&z).map_err(|e| e.to_string())? == video, || format!("case {case}: roundtrip differs"))?;
        let z_ref = encode(&video.frame(0)).map_err(|e| e.to_string())?;
        let joint = build_joint(&z_ref, &z, &z).map_err(|e| e.to_string())?;
        ensure(joint.shape() == [tp + 1, 2 * LATENT_CHANNELS, hp, wp], || {
            format!("case {case}: joint {:?}", joint.shape())
        })?;
        let (tokens, grid) = patch_split(&joint.data, patch).map_err(|e| e.to_string())?;
        let n_v = (tp + 1) * (hp / patch) * (wp / patch);
        ensure(tokens.rows() == n_v && grid.num_tokens() == n_v, || {
            format!("case {case}: {} tokens, expected {n_v}", tokens.rows())
        })?;
        ensure(n_v * patch * patch == (tp + 1) * hp * wp, || format!("case {case}: N_v p^2 != (T'+1) H' W'"))?;
    }
    Ok("200 random (T,H,W): latent, joint and token counts match; codec roundtrip bit-exact".into())
}

// A4 -------------------------------------------------------------------------

fn micro_latent(rng: &mut ChaCha8Rng) -> Latent {
    Latent::new(Array4::from_shape_simple_fn((1, 4, 4, 4), || rng.random::<f64>() * 2.0 - 1.0))
}

fn micro_features(s: usize, d: usize, rng: &mut ChaCha8Rng) -> LayerFeatures {
    LayerFeatures {
        first: Matrix::randn(s, d, 1.0, rng),
        last: Matrix::randn(s, d, 1.0, rng),
        first_layer: 1,
        last_layer: 3,
    }
}

fn a4() -> Outcome {
    let d_vlm = 6;
    let cfg = BackboneConfig {
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        patch: 2,
        latent_channels: 4,
        freq_dim: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut params = init_params(&cfg, d_vlm).map_err(|e| e.to_string())?;
    // Move off the zero-gate initialization so every path carries gradient.
    for (_, m) in params.iter_mut() {
        for v in m.data_mut() {
            *v += 0.2 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    let sample = Prepared {
        z_ref: micro_latent(&mut rng),
        z_src: micro_latent(&mut rng),
        z_tgt: micro_latent(&mut rng),
        cond: Conditioning { unified: Some(micro_features(5, d_vlm, &mut rng)), ..Default::default() },
    };
    let t = 0.37;
    let loss = |p: &ParamStore| -> f64 {
        let g = Graph::new();
        let mut noise = ChaCha8Rng::seed_from_u64(7);
        sample_loss(&g, p, &cfg, &sample, t, &mut noise).unwrap().value().get(0, 0)
    };
    let g = Graph::new();
    let mut noise = ChaCha8Rng::seed_from_u64(7);
    let l = sample_loss(&g, &params, &cfg, &sample, t, &mut noise).map_err(|e| e.to_string())?;
    let grads = g.backward(l).map_err(|e| e.to_string())?;

    let mut slots: Vec<(String, usize)> = params.iter().flat_map(|(n, m)| (0..m.len()).map(move |k| (n.clone(), k))).collect();
    let total = slots.len();
    let mut picked = Vec::with_capacity(A4_PARAMS);
    for _ in 0..A4_PARAMS {
        picked.push(slots.swap_remove(rng.random_range(0..slots.len())));
    }
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, k) in &picked {
        let orig = params.get(name).unwrap().data()[*k];
        params.get_mut(name).unwrap().data_mut()[*k] = orig + A4_STEP;
        let up = loss(&params);
        params.get_mut(name).unwrap().data_mut()[*k] = orig - A4_STEP;
        let down = loss(&params);
        params.get_mut(name).unwrap().data_mut()[*k] = orig;
        let numeric = (up - down) / (2.0 * A4_STEP);
        let analytic = grads.get(name).map_or(0.0, |m| m.data()[*k]);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(A4_FLOOR);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{k}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    ensure(worst < A4_REL_TOL, || format!("relative error {worst:.3e} at {worst_at}"))?;
    Ok(format!(
        "{A4_PARAMS} of {total} parameters (D=16, P=2, N_v=8), h={A4_STEP:e}, max rel error {worst:.2e} < {A4_REL_TOL:e}"
    ))
}

// A5, A6 -----------------------------------------------------------------------

fn toy_corpus() -> Vec<EditSample> {
    generate_corpus(&EditType::ALL, 8, 0, GenConfig::default()).unwrap()
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 100,
        decay: LrDecay::Cosine,
        total_steps: A5_STEPS,
        batch_size: 1,
        seed: 0,
        ..Default::default()
    }
}

fn a5(trained: &mut Option<(TrainConfig, ParamStore, Vec<EditSample>)>) -> Outcome {
    let data = toy_corpus();
    let cfg = toy_train_config();
    ensure(cfg.model.arch == Arch::UnifiedSelfAttn, || "toy run must use unified_self_attn".into())?;
    let mut trainer = Trainer::new(cfg.clone(), &data).map_err(|e| e.to_string())?;
    let history = trainer.run(None, |_| {}).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = history.iter().map(|m| m.loss).collect();
    ensure(losses.len() == A5_STEPS, || format!("ran {} steps", losses.len()))?;
    let start = losses[..A5_WINDOW].iter().sum::<f64>() / A5_WINDOW as f64;
    let end = losses[A5_STEPS - A5_WINDOW..].iter().sum::<f64>() / A5_WINDOW as f64;
    let drop = 1.0 - end / start;
    *trained = Some((cfg, trainer.params, data));
    ensure(drop >= A5_DROP, || format!("loss {start:.5} -> {end:.5}, drop {:.1}%", 100.0 * drop))?;
    Ok(format!(
        "8 pairs, {A5_STEPS} steps: {A5_WINDOW}-step mean loss {start:.5} -> {end:.5} ({:.1}% drop >= {:.0}%)",
        100.0 * drop,
        100.0 * A5_DROP
    ))
}

fn a6(trained: &Option<(TrainConfig, ParamStore, Vec<EditSample>)>) -> Outcome {
    let (cfg, params, data) = trained.as_ref().ok_or("A5 produced no checkpoint")?;
    let editor = Editor::new(cfg, params.clone()).map_err(|e| e.to_string())?;
    let mut all_three = 0;
    let mut gated = None;
    for (i, s) in data.iter().enumerate() {
        let out = editor.edit(&s.src_video, &s.ref_image, s.instruction(), DEFAULT_STEPS, 0).map_err(|e| e.to_string())?;
        let mae = out.mean_abs_diff(&s.tgt_video).map_err(|e| e.to_string())?;
        let sc = oracle_scores(s, &out).map_err(|e| e.to_string())?;
        let (ia, cc) = (sc.get(Dimension::IA), sc.get(Dimension::CC));
        if mae < A6_MAE && ia >= A6_MIN_SCORE && cc >= A6_MIN_SCORE {
            all_three += 1;
        }
        // The gated pair is fixed in advance: the first one.
        if i == 0 {
            gated = Some((s.meta.id.clone(), mae, ia, cc));
        }
    }
    let (id, mae, ia, cc) = gated.expect("nonempty corpus");
    let detail = format!(
        "pair {id}: MAE {mae:.4} (< {A6_MAE}), IA {ia:.2}, CC {cc:.2} (>= {A6_MIN_SCORE}); {all_three}/{} training pairs meet all three",
        data.len()
    );
    ensure(mae < A6_MAE && ia >= A6_MIN_SCORE && cc >= A6_MIN_SCORE, || detail.clone())?;
    Ok(detail)
}

// A7 -------------------------------------------------------------------------

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn a7() -> Outcome {
    let data = generate_corpus(&[EditType::Recolor], 1, 7, GenConfig::default()).unwrap();
    let s = &data[0];
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut clean_checked = 0;
    for arch in Arch::ALL {
        let mut tc = TrainConfig::default();
        tc.model.arch = arch;
        let mut params = init_params(&tc.model, tc.encoder.dim).map_err(|e| e.to_string())?;
        for (_, m) in params.iter_mut() {
            for v in m.data_mut() {
                *v += 0.05 * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
        // 16 visual tokens, the first 4 of them the reference frame, after
        // a run of condition tokens.
        let grid = mive::codec::PatchGrid::for_latent(4, 4, 4, tc.model.patch).map_err(|e| e.to_string())?;
        let mut clean = vec![true; 20];
        clean.extend(visual_clean_mask(grid));
        for block in 0..tc.model.depth {
            let base = block_modulation(&params, &tc.model, block, &clean, 0.0).map_err(|e| e.to_string())?;
            for t in [0.25, 0.5, 0.75, 1.0] {
                let m = block_modulation(&params, &tc.model, block, &clean, t).map_err(|e| e.to_string())?;
                for (i, &c) in clean.iter().enumerate() {
                    let same = m.row(i).iter().zip(base.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                    if c {
                        ensure(same, || format!("{arch:?} block {block} clean row {i} moves at t={t}"))?;
                        clean_checked += 1;
                    } else {
                        ensure(!same, || format!("{arch:?} block {block} noisy row {i} ignores t={t}"))?;
                    }
                }
            }
        }
        let editor = Editor::new(&tc, params).map_err(|e| e.to_string())?;
        let mut seen: Vec<Vec<Vec<u64>>> = Vec::new();
        editor
            .edit_observed(&s.src_video, &s.ref_image, s.instruction(), DEFAULT_STEPS, 3, |v| {
                seen.push(v.condition.iter().map(bits).collect());
            })
            .map_err(|e| e.to_string())?;
        ensure(seen.len() == DEFAULT_STEPS, || format!("{arch:?}: observed {} steps", seen.len()))?;
        ensure(seen.iter().all(|c| !c.is_empty() && c == &seen[0]), || {
            format!("{arch:?}: condition tokens change across steps")
        })?;
    }
    Ok(format!(
        "{clean_checked} clean modulation rows bit-identical over t in {{0,.25,.5,.75,1}}; condition tokens bit-identical over {DEFAULT_STEPS} steps for 4 architectures"
    ))
}

// A8, A9 -----------------------------------------------------------------------

fn a8() -> Outcome {
    let expect = [
        (4.9, Verdict::RejectHard),
        (5.0, Verdict::RejectMinor),
        (8.4, Verdict::RejectMinor),
        (8.5, Verdict::Retain),
    ];
    for (score, verdict) in expect {
        let d = filter_decision(score).map_err(|e| e.to_string())?;
        ensure(d.verdict == verdict, || format!("{score} -> {:?}, expected {verdict:?}", d.verdict))?;
    }
    Ok("4.9 reject_hard, 5.0 reject_minor, 8.4 reject_minor, 8.5 retain".into())
}

fn a9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let data = generate_corpus(&EditType::ALL, 4, 9, GenConfig::default()).unwrap();
    let mut cases = 0;
    for s in &data {
        for _ in 0..25 {
            let dims = Dimension::ALL
                .iter()
                .map(|&d| (d, DimensionScore { score: (rng.random::<f64>() * 10.0), reasoning: String::new() }))
                .collect();
            let raw = EvalScores::new(dims).map_err(|e| e.to_string())?;
            let once = apply_negligible_cap(&raw, &s.src_video, &s.src_video).map_err(|e| e.to_string())?;
            ensure(once.values().iter().all(|&v| v <= A9_CAP), || format!("capped scores {:?}", once.values()))?;
            let twice = apply_negligible_cap(&once, &s.src_video, &s.src_video).map_err(|e| e.to_string())?;
            ensure(once == twice, || "cap is not idempotent".into())?;
            cases += 1;
        }
    }
    Ok(format!("{cases} random score sets on output == src: all six <= {A9_CAP}, idempotent"))
}

// A10 ------------------------------------------------------------------------

/// Two-sided exact p by enumerating all 2^n sign assignments of the ranks.
fn wilcoxon_enumerated(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let w: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for signs in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|&k| signs & (1 << k) != 0).map(|k| ranks[k]).sum();
        if s <= w + 1e-9 {
            le += 1;
        }
        if s >= w - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    Some((w, (2.0 * (le.min(ge) as f64) / total).min(1.0)))
}

/// Ordinal alpha from the coincidence matrix, written out term by term.
fn alpha_coincidence(table: &[Vec<Option<f64>>]) -> f64 {
    let mut values: Vec<f64> = table.iter().flatten().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let v = values.len();
    let idx = |x: f64| values.iter().position(|&u| u == x).unwrap();
    let mut o = vec![vec![0.0; v]; v];
    for unit in 0..table[0].len() {
        let vals: Vec<f64> = table.iter().filter_map(|r| r[unit]).collect();
        let m = vals.len();
        if m < 2 {
            continue;
        }
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    o[idx(vals[a])][idx(vals[b])] += 1.0 / (m as f64 - 1.0);
                }
            }
        }
    }
    let nc: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = nc.iter().sum();
    let delta = |c: usize, k: usize| {
        let (lo, hi) = (c.min(k), c.max(k));
        let s: f64 = nc[lo..=hi].iter().sum::<f64>() - (nc[c] + nc[k]) / 2.0;
        s * s
    };
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..v {
        for k in 0..v {
            num += o[c][k] * delta(c, k);
            den += nc[c] * nc[k] * delta(c, k);
        }
    }
    1.0 - (n - 1.0) * num / den
}

fn a10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_p = 0.0f64;
    let mut compared = 0;
    for i in 0..100 {
        let n = 1 + i % 8;
        // Integer scores make ties and zero differences common.
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64).collect();
        match (wilcoxon_signed_rank(&x, &y), wilcoxon_enumerated(&x, &y)) {
            (Ok(w), Some((stat, p))) => {
                ensure(w.exact, || format!("vector {i}: n={n} not exact"))?;
                ensure(w.statistic == stat, || format!("vector {i}: W+ {} vs {stat}", w.statistic))?;
                worst_p = worst_p.max((w.p_value - p).abs());
                compared += 1;
            }
            (Err(_), None) => {}
            (a, b) => return Err(format!("vector {i}: implementation {a:?}, enumeration {b:?}")),
        }
    }
    ensure(worst_p < A10_P_TOL, || format!("max |p - enumerated p| = {worst_p:.3e}"))?;

    let perfect = vec![vec![Some(1.0), Some(3.0), Some(5.0), None], vec![Some(1.0), Some(3.0), Some(5.0), Some(2.0)], vec![
        None,
        Some(3.0),
        Some(5.0),
        Some(2.0),
    ]];
    let a = krippendorff_alpha(&perfect).map_err(|e| e.to_string())?;
    ensure(a == 1.0, || format!("perfect agreement alpha {a}"))?;

    let mut worst_a = 0.0f64;
    let mut tables = 0;
    while tables < 10 {
        let raters = rng.random_range(2..=4);
        let units = rng.random_range(3..=8);
        let table: Vec<Vec<Option<f64>>> = (0..raters)
            .map(|_| {
                (0..units)
                    .map(|_| (!rng.random_bool(0.15)).then(|| rng.random_range(1..=5) as f64))
                    .collect()
            })
            .collect();
        let Ok(got) = krippendorff_alpha(&table) else { continue };
        worst_a = worst_a.max((got - alpha_coincidence(&table)).abs());
        tables += 1;
    }
    ensure(worst_a < A10_KRIPP_TOL, || format!("alpha off by {worst_a:.3e}"))?;
    Ok(format!(
        "{compared} paired vectors n<=8: max |p - enumeration| {worst_p:.1e}; alpha = 1 on agreement; 10 tables within {worst_a:.1e}"
    ))
}

// A11 ------------------------------------------------------------------------

fn a11() -> Outcome {
    let data = generate_corpus(&EditType::ALL, 4, 11, GenConfig::default()).unwrap();
    let cfg = AblationConfig {
        train: TrainConfig { lr: 1e-3, warmup_steps: 2, total_steps: 6, seed: 5, ..Default::default() },
        edit_steps: 2,
        edit_seed: 5,
    };
    let grid = full_grid();
    ensure(grid.len() == 12, || format!("grid has {} cells", grid.len()))?;
    let first = run_ablation(&grid, &cfg, &data, &data, |_| {});
    if let Some(bad) = first.cells.iter().find(|c| c.error.is_some()) {
        return Err(format!("{} failed: {}", bad.cell.name(), bad.error.as_deref().unwrap_or_default()));
    }
    let count = |t: Table| first.rows.iter().filter(|r| r.table == t).count();
    ensure(
        (count(Table::Architecture), count(Table::Layers), count(Table::Grid)) == (4, 3, 12),
        || "unexpected row counts".into(),
    )?;
    ensure(first.rows.iter().all(|r| r.means.is_some() && r.overall.is_some()), || "unpopulated row".into())?;
    let table_lines: Vec<&str> = first.markdown.lines().filter(|l| l.starts_with('|')).collect();
    ensure(table_lines.len() == 3 * 2 + 19, || format!("{} markdown table lines", table_lines.len()))?;
    ensure(table_lines.iter().all(|l| l.matches('|').count() == 9), || "ragged markdown row".into())?;

    let second = run_ablation(&grid, &cfg, &data, &data, |_| {});
    let self_attn = |r: &mive::ablation::AblationReport| {
        let c = r
            .cells
            .iter()
            .find(|c| c.cell.arch == Arch::UnifiedSelfAttn && c.cell.layer_mode == LayerMode::FirstLast)
            .unwrap();
        let s = c.summary.as_ref().unwrap();
        let mut v = vec![c.final_loss.unwrap().to_bits(), s.overall.to_bits(), s.ssim_to_target.to_bits()];
        v.extend(s.means.values().map(|m| m.to_bits()));
        v
    };
    ensure(self_attn(&first) == self_attn(&second), || "unified_self_attn row differs on rerun".into())?;
    let all_same = first == second;
    Ok(format!(
        "12 cells trained and scored; 4+3+12 table rows; unified_self_attn rerun bit-identical (whole report identical: {all_same})"
    ))
}

// A12 ------------------------------------------------------------------------

fn a12() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let img = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((24, 20), || rng.random::<f64>());
    let mut worst_sym = 0.0f64;
    for i in 0..50 {
        let (x, y) = (img(&mut rng), img(&mut rng));
        let self_sim = ssim(&x, &x).map_err(|e| e.to_string())?;
        ensure(self_sim == 1.0, || format!("pair {i}: ssim(x,x) = {self_sim:.17}"))?;
        let (a, b) = (ssim(&x, &y).map_err(|e| e.to_string())?, ssim(&y, &x).map_err(|e| e.to_string())?);
        worst_sym = worst_sym.max((a - b).abs());
    }
    ensure(worst_sym <= A12_SYM_TOL, || format!("asymmetry {worst_sym:.3e}"))?;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut worst_const = 0.0f64;
    for _ in 0..20 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let got = ssim(&Array2::from_elem((16, 16), a), &Array2::from_elem((16, 16), b)).map_err(|e| e.to_string())?;
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1) * (c2 / c2);
        worst_const = worst_const.max((got - expect).abs());
    }
    ensure(worst_const < A12_CONST_TOL, || format!("constant case off by {worst_const:.3e}"))?;
    Ok(format!(
        "ssim(x,x) == 1.0 on 50 images; asymmetry {worst_sym:.1e} <= {A12_SYM_TOL:e}; constant closed form within {worst_const:.1e}"
    ))
}

// ----------------------------------------------------------------------------

fn run(id: &str, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("runtime {:.1}s over budget {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64())),
        (o, _) => o,
    };
    let budget_note = budget.map_or(String::new(), |b| format!(", budget {:.0}s", b.as_secs_f64()));
    let timing = format!("[{:.1}s{budget_note}]", elapsed.as_secs_f64());
    match &outcome {
        Ok(detail) => println!("{id:<4} PASS  {title}: {detail} {timing}"),
        Err(detail) => println!("{id:<4} FAIL  {title}: {detail} {timing}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("MIVE_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_uppercase()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut ok = true;
    if wanted("A1") {
        ok &= run("A1", "attention decomposition oracle", secs(10), a1);
    }
    if wanted("A2") {
        ok &= run("A2", "mask ratio laws", secs(5), a2);
    }
    if wanted("A3") {
        ok &= run("A3", "shape laws and codec roundtrip", secs(30), a3);
    }
    if wanted("A4") {
        ok &= run("A4", "gradient check", secs(120), a4);
    }
    let mut trained = None;
    if wanted("A5") || wanted("A6") {
        ok &= run("A5", "toy overfit", secs(1200), || a5(&mut trained));
        ok &= run("A6", "edit fidelity on memorized pairs", None, || a6(&trained));
    }
    if wanted("A7") {
        ok &= run("A7", "stationarity invariants", None, a7);
    }
    if wanted("A8") {
        ok &= run("A8", "filter thresholds", None, a8);
    }
    if wanted("A9") {
        ok &= run("A9", "negligible-difference cap", None, a9);
    }
    if wanted("A10") {
        ok &= run("A10", "statistics oracles", secs(60), a10);
    }
    if wanted("A11") {
        ok &= run("A11", "ablation harness", None, a11);
    }
    if wanted("A12") {
        ok &= run("A12", "SSIM", None, a12);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

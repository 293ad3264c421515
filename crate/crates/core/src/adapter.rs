//! Projects selected encoder layers into the transformer width and fuses them
//! into condition tokens.

use mive_autograd::{Graph, Matrix, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderTrace, ToyEncoder};
use crate::error::{MiveError, Result};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    FirstOnly,
    LastOnly,
    #[default]
    FirstLast,
}

impl LayerMode {
    pub const ALL: [LayerMode; 3] = [LayerMode::FirstOnly, LayerMode::LastOnly, LayerMode::FirstLast];

    pub fn name(self) -> &'static str {
        match self {
            LayerMode::FirstOnly => "first_only",
            LayerMode::LastOnly => "last_only",
            LayerMode::FirstLast => "first_last",
        }
    }
}

impl std::str::FromStr for LayerMode {
    type Err = MiveError;

    fn from_str(s: &str) -> Result<Self> {
        LayerMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MiveError::invalid(format!("unknown layer mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    First,
    Last,
}

impl Branch {
    fn key(self) -> &'static str {
        match self {
            Branch::First => "first",
            Branch::Last => "last",
        }
    }
}

/// Early and late encoder features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub first: Matrix,
    pub last: Matrix,
    pub first_layer: usize,
    pub last_layer: usize,
}

impl LayerFeatures {
    /// Picks the configured early feature and the final-normed last layer.
    pub fn from_trace(encoder: &ToyEncoder, trace: &EncoderTrace) -> Self {
        let first_layer = match encoder.config().first_feature {
            crate::encoder::FirstFeature::Embedding => 0,
            crate::encoder::FirstFeature::AfterFirstBlock => 1,
        };
        Self {
            first: encoder.first_feature(trace).clone(),
            last: trace.final_hidden.clone(),
            first_layer,
            last_layer: trace.num_layers(),
        }
    }

    pub fn source_layers(&self, mode: LayerMode) -> Vec<usize> {
        match mode {
            LayerMode::FirstOnly => vec![self.first_layer],
            LayerMode::LastOnly => vec![self.last_layer],
            LayerMode::FirstLast => vec![self.first_layer, self.last_layer],
        }
    }
}

/// Stationary condition sequence `N_c x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub c: Matrix,
    pub source_layers: Vec<usize>,
}

/// Registers every adapter weight under `prefix`: per-branch gains and
/// `d_vlm -> D/2` projections, a single-layer `d_vlm -> D` projection and the
/// `D x D` fusion linear.
pub fn init_adapter<R: Rng + ?Sized>(
    params: &mut ParamStore,
    prefix: &str,
    d_vlm: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    if d_model % 2 != 0 {
        return Err(MiveError::invalid(format!("model width {d_model} must be even")));
    }
    let half = d_model / 2;
    let std_half = (2.0 / (d_vlm + half) as f64).sqrt();
    let std_full = (2.0 / (d_vlm + d_model) as f64).sqrt();
    for branch in ["first", "last"] {
        params.insert(format!("{prefix}.{branch}.gain"), Matrix::filled(1, d_vlm, 1.0));
        params.insert(format!("{prefix}.{branch}.w"), Matrix::randn(d_vlm, half, std_half, rng));
    }
    params.insert(format!("{prefix}.single.gain"), Matrix::filled(1, d_vlm, 1.0));
    params.insert(format!("{prefix}.single.w"), Matrix::randn(d_vlm, d_model, std_full, rng));
    params.insert(
        format!("{prefix}.fuse.w"),
        Matrix::randn(d_model, d_model, (1.0 / d_model as f64).sqrt(), rng),
    );
    Ok(())
}

fn norm_project<'g>(g: &'g Graph, params: &ParamStore, key: &str, phi: Var<'g>) -> Result<Var<'g>> {
    if !phi.value().is_finite() {
        return Err(MiveError::Numeric(format!("non-finite features entering {key}")));
    }
    let gain = g.param(params, &format!("{key}.gain"));
    let w = g.param(params, &format!("{key}.w"));
    Ok(phi.rms_norm(NORM_EPS).mul_row(gain)?.matmul(w)?)
}

/// RMS-normalizes rows of `phi` and maps them to `D/2` with the branch linear.
pub fn project_layer<'g>(
    g: &'g Graph,
    params: &ParamStore,
    prefix: &str,
    phi: Var<'g>,
    branch: Branch,
) -> Result<Var<'g>> {
    norm_project(g, params, &format!("{prefix}.{}", branch.key()), phi)
}

/// Concatenates the two projected halves and applies the fusion linear.
pub fn fuse<'g>(
    g: &'g Graph,
    params: &ParamStore,
    prefix: &str,
    first: Var<'g>,
    last: Var<'g>,
) -> Result<Var<'g>> {
    if first.shape() != last.shape() {
        return Err(MiveError::shape(format!(
            "fuse inputs differ: {:?} vs {:?}",
            first.shape(),
            last.shape()
        )));
    }
    let raw = Var::concat_cols(&[first, last])?;
    Ok(raw.matmul(g.param(params, &format!("{prefix}.fuse.w")))?)
}

/// Condition tokens for a layer-selection mode, on the tape.
pub fn select_layers<'g>(
    g: &'g Graph,
    params: &ParamStore,
    prefix: &str,
    feats: &LayerFeatures,
    mode: LayerMode,
) -> Result<Var<'g>> {
    let fuse_w = || g.param(params, &format!("{prefix}.fuse.w"));
    match mode {
        LayerMode::FirstLast => {
            let a = project_layer(g, params, prefix, g.constant(feats.first.clone()), Branch::First)?;
            let b = project_layer(g, params, prefix, g.constant(feats.last.clone()), Branch::Last)?;
            fuse(g, params, prefix, a, b)
        }
        LayerMode::FirstOnly | LayerMode::LastOnly => {
            let phi = if mode == LayerMode::FirstOnly { &feats.first } else { &feats.last };
            let single = norm_project(g, params, &format!("{prefix}.single"), g.constant(phi.clone()))?;
            Ok(single.matmul(fuse_w())?)
        }
    }
}

/// Evaluates [`select_layers`] without keeping the tape.
pub fn condition_tokens(
    params: &ParamStore,
    prefix: &str,
    feats: &LayerFeatures,
    mode: LayerMode,
) -> Result<ConditionTokens> {
    let g = Graph::new();
    let c = select_layers(&g, params, prefix, feats, mode)?.value();
    Ok(ConditionTokens {
        c: (*c).clone(),
        source_layers: feats.source_layers(mode),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d_vlm: usize, d: usize) -> ParamStore {
        let mut p = ParamStore::new();
        init_adapter(&mut p, "ad", d_vlm, d, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        p
    }

    fn feats(s: usize, d_vlm: usize, seed: u64) -> LayerFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LayerFeatures {
            first: Matrix::randn(s, d_vlm, 1.0, &mut rng),
            last: Matrix::randn(s, d_vlm, 1.0, &mut rng),
            first_layer: 1,
            last_layer: 4,
        }
    }

    #[test]
    fn zero_rows_and_scale_invariance() {
        let p = store(4, 6);
        let g = Graph::new();
        let x = Matrix::from_rows(&[vec![0.0; 4], vec![1.0, -2.0, 0.5, 3.0], vec![2.0, -4.0, 1.0, 6.0]]).unwrap();
        let y = project_layer(&g, &p, "ad", g.constant(x), Branch::First).unwrap().value();
        assert_eq!(y.shape(), (3, 3));
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        // Equal up to the epsilon inside the norm.
        for (a, b) in y.row(1).iter().zip(y.row(2)) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn projection_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("h.last.gain", Matrix::filled(1, 4, 1.0));
        p.insert(
            "h.last.w",
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap(),
        );
        let x = Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        let g = Graph::new();
        let y = project_layer(&g, &p, "h", g.constant(x), Branch::Last).unwrap().value();
        // Row 0 has rms 1, row 1 has rms 1 after dividing by sqrt(4 / 4) = 1.
        let r0 = 1.0 / (1.0f64 + 1e-6).sqrt();
        let r1 = 1.0 / (1.0f64 + 1e-6).sqrt();
        let expected = [[r0 * 1.0, r0 * 4.0], [r1 * 2.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.get(i, j) - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_cases() {
        let g = Graph::new();
        let mut p = ParamStore::new();
        p.insert("f.fuse.w", Matrix::identity(4));
        let a = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = fuse(&g, &p, "f", a, b).unwrap().value();
        assert_eq!(c.row(1), &[3.0, 4.0, 7.0, 8.0]);

        let w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 2.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, -1.0],
        ])
        .unwrap();
        p.insert("f.fuse.w", w.clone());
        let g = Graph::new();
        let a = g.constant(a.value().as_ref().clone());
        let b = g.constant(b.value().as_ref().clone());
        let c = fuse(&g, &p, "f", a, b).unwrap().value();
        // Row 0 of [1 2 5 6] times w.
        assert_eq!(c.row(0), &[6.0, 7.0, 8.0, -4.0]);

        let zero = g.constant(Matrix::zeros(2, 2));
        let c = fuse(&g, &p, "f", zero, b).unwrap().value();
        let lower = w.slice_rows(2, 2);
        assert_eq!(*c, b.value().matmul(&lower).unwrap());
        assert!(fuse(&g, &p, "f", a, g.constant(Matrix::zeros(3, 2))).is_err());
    }

    #[test]
    fn modes_compose_and_share_shape() {
        let p = store(8, 6);
        let f = feats(5, 8, 1);
        let g = Graph::new();
        let a = project_layer(&g, &p, "ad", g.constant(f.first.clone()), Branch::First).unwrap();
        let b = project_layer(&g, &p, "ad", g.constant(f.last.clone()), Branch::Last).unwrap();
        let direct = fuse(&g, &p, "ad", a, b).unwrap().value();
        let via = condition_tokens(&p, "ad", &f, LayerMode::FirstLast).unwrap();
        assert_eq!(via.c, *direct);
        assert_eq!(via.source_layers, vec![1, 4]);
        for mode in LayerMode::ALL {
            assert_eq!(condition_tokens(&p, "ad", &f, mode).unwrap().c.shape(), (5, 6));
        }
        let zero_last = LayerFeatures { last: Matrix::zeros(5, 8), ..f };
        let c = condition_tokens(&p, "ad", &zero_last, LayerMode::LastOnly).unwrap();
        assert!(c.c.data().iter().all(|&v| v == 0.0));
        assert!("middle".parse::<LayerMode>().is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut p = store(6, 4);
        let f = feats(3, 6, 2);
        let target = Matrix::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let loss = |p: &ParamStore| -> f64 {
            let g = Graph::new();
            let c = select_layers(&g, p, "ad", &f, LayerMode::FirstLast).unwrap();
            let t = g.constant(target.clone());
            c.sub(t).unwrap().square().sum().value().get(0, 0)
        };
        let g = Graph::new();
        let c = select_layers(&g, &p, "ad", &f, LayerMode::FirstLast).unwrap();
        let l = c.sub(g.constant(target.clone())).unwrap().square().sum();
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for (name, grad) in grads.iter() {
            for k in 0..grad.len() {
                let orig = p.get(name).unwrap().data()[k];
                p.get_mut(name).unwrap().data_mut()[k] = orig + h;
                let up = loss(&p);
                p.get_mut(name).unwrap().data_mut()[k] = orig - h;
                let down = loss(&p);
                p.get_mut(name).unwrap().data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.data()[k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{k}]: {analytic} vs {numeric}");
            }
        }
    }
}

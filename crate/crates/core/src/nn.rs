//! Layer helpers shared by the encoder, adapter and backbone.

use mive_autograd::{Graph, Matrix, ParamStore, Var};
use rand::Rng;

use crate::error::Result;

/// Registers `{name}.w` (`in x out`) and, optionally, `{name}.b` (`1 x out`).
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    bias: bool,
    rng: &mut R,
) {
    params.insert(format!("{name}.w"), Matrix::randn(fan_in, fan_out, std, rng));
    if bias {
        params.insert(format!("{name}.b"), Matrix::zeros(1, fan_out));
    }
}

/// `x W (+ b)` on the tape; the bias is used when `{name}.b` exists.
pub fn linear<'g>(g: &'g Graph, params: &ParamStore, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    let y = x.matmul(g.param(params, &format!("{name}.w")))?;
    let bias = format!("{name}.b");
    if params.contains(&bias) {
        Ok(y.add_row(g.param(params, &bias))?)
    } else {
        Ok(y)
    }
}

/// `x W (+ b)` without recording.
pub fn linear_eval(params: &ParamStore, name: &str, x: &Matrix) -> Result<Matrix> {
    let w = params
        .get(&format!("{name}.w"))
        .unwrap_or_else(|| panic!("missing parameter {name}.w"));
    let mut y = x.matmul(w)?;
    if let Some(b) = params.get(&format!("{name}.b")) {
        for r in 0..y.rows() {
            for (o, v) in y.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
    }
    Ok(y)
}

/// Transformer-style sinusoidal features of a scalar position: `dim/2` sines
/// followed by `dim/2` cosines with geometric frequencies.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Factorized 3D sinusoid: each of `(frame, row, col)` gets `2 * (dim / 6)`
/// channels; any remainder stays zero.
pub fn sinusoid_3d(frame: usize, row: usize, col: usize, dim: usize) -> Vec<f64> {
    let part = 2 * (dim / 6);
    let mut out = Vec::with_capacity(dim);
    for p in [frame, row, col] {
        out.extend(sinusoid(p as f64, part));
    }
    out.resize(dim, 0.0);
    out
}

/// Multi-head scaled dot-product attention on the tape.
///
/// `q` is `Nq x D`, `k` and `v` are `Nk x D`; heads split the feature axis.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let dim = q.cols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * head_dim, head_dim)?;
        let kh = k.slice_cols(h * head_dim, head_dim)?;
        let vh = v.slice_cols(h * head_dim, head_dim)?;
        let probs = qh.matmul_t(kh)?.scale(scale).softmax_rows();
        outs.push(probs.matmul(vh)?);
    }
    Ok(Var::concat_cols(&outs)?)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let s = sinusoid(0.0, 8);
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(sinusoid_3d(1, 2, 3, 16).len(), 16);
    }

    #[test]
    fn attention_rows_average_values() {
        let g = Graph::new();
        let q = g.constant(Matrix::zeros(2, 4));
        let k = g.constant(Matrix::from_rows(&[vec![1.0; 4], vec![-1.0; 4]]).unwrap());
        let v = g.constant(Matrix::from_rows(&[vec![2.0; 4], vec![4.0; 4]]).unwrap());
        let out = attention(q, k, v, 2).unwrap().value();
        assert!(out.data().iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }
}

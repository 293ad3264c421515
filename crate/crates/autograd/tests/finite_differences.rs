use mive_autograd::{Graph, Matrix, ParamStore, ShapeError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = for<'g> fn(&'g Graph, &ParamStore) -> Result<Var<'g>, ShapeError>;

fn scalar(build: Build, store: &ParamStore) -> f64 {
    let g = Graph::new();
    build(&g, store).unwrap().value().get(0, 0)
}

fn check(build: Build, store: &ParamStore) {
    let g = Graph::new();
    let out = build(&g, store).unwrap();
    let grads = g.backward(out).unwrap();
    let h = 1e-6;
    assert!(!grads.is_empty());
    for (name, analytic) in grads.iter() {
        let value = store.get(name).unwrap();
        for idx in 0..value.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (scalar(build, &plus) - scalar(build, &minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "{name}[{idx}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn store() -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    s.insert("a", Matrix::randn(3, 4, 1.0, &mut rng));
    s.insert("b", Matrix::randn(4, 5, 1.0, &mut rng));
    s.insert("c", Matrix::randn(3, 4, 1.0, &mut rng));
    s.insert("row", Matrix::randn(1, 4, 1.0, &mut rng));
    s
}

#[test]
fn matmul_family() {
    check(
        |g, s| {
            let y = g.param(s, "a").matmul(g.param(s, "b"))?;
            Ok(y.square().sum())
        },
        &store(),
    );
    check(
        |g, s| {
            let y = g.param(s, "a").matmul_t(g.param(s, "c"))?;
            Ok(y.gelu().sum())
        },
        &store(),
    );
}

#[test]
fn elementwise_and_broadcast() {
    check(
        |g, s| {
            let a = g.param(s, "a");
            let c = g.param(s, "c");
            let r = g.param(s, "row");
            let y = a.mul(c)?.sub(a)?.add(c)?.add_row(r)?.mul_row(r)?;
            Ok(y.silu().scale(0.7).add_scalar(0.1).square().mean())
        },
        &store(),
    );
}

#[test]
fn normalizations_and_softmax() {
    check(
        |g, s| {
            let a = g.param(s, "a");
            let w = g.param(s, "c");
            let y = a.layer_norm(1e-6).mul(w)?;
            let z = a.rms_norm(1e-6).add(y)?.softmax_rows().mul(w)?;
            Ok(z.sum())
        },
        &store(),
    );
}

#[test]
fn routing_ops() {
    check(
        |g, s| {
            let a = g.param(s, "a");
            let c = g.param(s, "c");
            let cat = Var::concat_cols(&[a, c])?;
            let rows = Var::concat_rows(&[cat, cat.slice_rows(1, 2)?])?;
            let picked = rows.gather_rows(&[0, 4, 0, 2])?.slice_cols(2, 5)?;
            Ok(picked.square().sum())
        },
        &store(),
    );
}

#[test]
fn untracked_constants_receive_no_gradient() {
    let s = store();
    let g = Graph::new();
    let k = g.constant(Matrix::filled(3, 4, 2.0));
    let y = g.param(&s, "a").mul(k).unwrap().sum();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.len(), 1);
    assert!(grads.get("a").unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let s = store();
    let g = Graph::new();
    let a = g.param(&s, "a");
    assert!(g.backward(a).is_err());
}

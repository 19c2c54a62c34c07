//! Central finite-difference checks for every differentiable graph op.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unitsep_nn::{BiLstm, Graph, LayerNorm, Linear, ParamId, ParamStore, Var, PAD_ROW};

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Objective = Σ out ⊙ probe, with a fixed random probe.
fn objective(store: &ParamStore, build: &dyn Fn(&mut Graph) -> Var, probe: &Array2<f64>) -> f64 {
    let mut g = Graph::new(store);
    let out = build(&mut g);
    (g.value(out) * probe).sum()
}

fn check(store: &mut ParamStore, build: &dyn Fn(&mut Graph) -> Var, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let (r, c) = g.shape(out);
        randn(r, c, &mut rng)
    };
    let grads = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        g.backward(&[(out, probe.clone())])
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let h = 1e-5;
    for id in ids {
        let shape = store.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = objective(store, build, &probe);
                store.get_mut(id)[[r, c]] = orig - h;
                let down = objective(store, build, &probe);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    err < tol,
                    "{}[{r},{c}]: analytic {analytic} vs numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }
}

#[test]
fn elementwise_and_matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", randn(4, 3, &mut rng));
    let b = store.add("b", randn(3, 5, &mut rng));
    let row = store.add("row", randn(1, 5, &mut rng));
    let c = store.add("c", randn(4, 5, &mut rng).mapv(|v| v.abs() + 0.5));
    let build = move |g: &mut Graph| {
        let (a, b, row, c) = (g.param(a), g.param(b), g.param(row), g.param(c));
        let m = g.matmul(a, b);
        let m = g.add_row(m, row);
        let t = g.tanh(m);
        let s = g.sigmoid(m);
        let p = g.mul(t, s);
        let q = g.sub(p, c);
        let r = g.relu(q);
        let sq = g.square(m);
        let l = g.log_eps(c, 1e-3);
        let sum = g.add(r, sq);
        let sum = g.add(sum, l);
        let sc = g.scale(sum, 0.7);
        let tt = g.transpose(sc);
        g.softmax_rows(tt)
    };
    check(&mut store, &build, 1e-5);
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", randn(6, 4, &mut rng));
    let b = store.add("b", randn(6, 2, &mut rng));
    let build = move |g: &mut Graph| {
        let (a, b) = (g.param(a), g.param(b));
        let cat = g.concat_cols(&[a, b]);
        let left = g.slice_cols(cat, 1, 5);
        let rows = g.gather_rows(left, vec![5, 0, PAD_ROW, 2, 2, 1, 3]);
        let top = g.slice_rows(rows, 0, 4);
        let stacked = g.concat_rows(&[top, rows]);
        let means = g.segment_mean(stacked, vec![(0, 3), (3, 5), (8, 3)]);
        let unfolded = g.unfold_rows(stacked, 3, 2, -1, 5);
        let oa = g.overlap_add(unfolded, 3, -2, 20);
        let first = g.slice_rows(means, 0, 1);
        let outer = g.matmul(oa, first);
        g.concat_rows(&[outer, means])
    };
    check(&mut store, &build, 1e-5);
}

#[test]
fn layer_norm_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", randn(5, 6, &mut rng));
    let lin = Linear::new(&mut store, "lin", 6, 4, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    // perturb the affine terms away from their identity init
    *store.get_mut(ln.gamma) = randn(1, 4, &mut rng);
    *store.get_mut(ln.beta) = randn(1, 4, &mut rng);
    let build = move |g: &mut Graph| {
        let x = g.param(x);
        let y = lin.forward(g, x);
        ln.forward(g, y)
    };
    check(&mut store, &build, 1e-5);
}

#[test]
fn lstm_forward_and_reverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.add("x", randn(4 * 3, 5, &mut rng));
    let bi = BiLstm::new(&mut store, "bi", 5, 3, &mut rng);
    let build = move |g: &mut Graph| {
        let x = g.param(x);
        bi.forward(g, x, 3)
    };
    check(&mut store, &build, 1e-5);
}

#[test]
fn lstm_matches_step_by_step_reference() {
    // Independent scalar implementation of one LSTM direction.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = randn(3 * 2, 4, &mut rng);
    let lstm = unitsep_nn::Lstm::new(&mut store, "l", 4, 3, &mut rng);
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let out = lstm.forward(&mut g, xv, 2, false);
    let got = g.value(out).clone();

    let (wi, wh, b) = (store.get(lstm.w_ih), store.get(lstm.w_hh), store.get(lstm.bias));
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for seq in 0..2 {
        let mut h = [0.0f64; 3];
        let mut c = [0.0f64; 3];
        for t in 0..3 {
            let row = t * 2 + seq;
            let mut z = [0.0f64; 12];
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = b[[0, k]];
                for i in 0..4 {
                    *zk += x[[row, i]] * wi[[i, k]];
                }
                for j in 0..3 {
                    *zk += h[j] * wh[[j, k]];
                }
            }
            for j in 0..3 {
                let (i, f, gg, o) = (sig(z[j]), sig(z[3 + j]), z[6 + j].tanh(), sig(z[9 + j]));
                c[j] = f * c[j] + i * gg;
                h[j] = o * c[j].tanh();
            }
            for j in 0..3 {
                assert!((got[[row, j]] - h[j]).abs() < 1e-12);
            }
        }
    }
}

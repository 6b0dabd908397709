//! Forward definitions and backward passes of the tensor engine, checked
//! against direct formulas and central finite differences at 64-bit.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgvl_core::numerics::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};
use sgvl_core::Error;
use std::sync::Arc;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds `sum(f(inputs) * w)` for a fixed random `w`, so every output
/// element reaches the loss with its own weight.
fn weighted_loss<F>(tape: &mut Tape<f64>, store: &ParamStore<f64>, ids: &[ParamId], f: &F, seed: u64) -> Var
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    let out = f(tape, &vars);
    if tape.shape(out).is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&tape.shape(out).to_vec(), &mut rng));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Largest relative error between backward gradients and central
/// differences over every input element. Errors are relative to
/// `max(|analytic|, |numeric|, 1e-3)`.
fn max_grad_error<F>(inputs: Vec<Tensor<f64>>, f: F, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    let mut tape = Tape::new();
    let loss = weighted_loss(&mut tape, &store, &ids, &f, seed);
    tape.backward(loss, &mut store).unwrap();
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = weighted_loss(&mut tape, store, &ids, &f, seed);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + H;
            let up = eval(&store);
            store.get_mut(id).value.data_mut()[k] = orig - H;
            let down = eval(&store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4], 0.7));
    let y = tape.softmax(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_rows_sum_to_one_and_respect_mask() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 5], &mut rng(1)));
    let valid: Vec<bool> = (0..10).map(|k| k % 5 != 3).collect();
    let mask = AttentionMask {
        valid: Arc::new(valid),
        keys: 5,
        rows_per_batch: 3,
    };
    let y = tape.softmax(x, Some(&mask)).unwrap();
    for row in tape.value(y).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 6], 3.25));
    let g = tape.constant(Tensor::full(&[6], 1.0));
    let b = tape.constant(Tensor::zeros(&[6]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_matches_definition() {
    let mut tape = Tape::new();
    let xv = random(&[3, 7], &mut rng(2));
    let gv = random(&[7], &mut rng(3));
    let bv = random(&[7], &mut rng(4));
    let (x, g, b) = (tape.constant(xv.clone()), tape.constant(gv.clone()), tape.constant(bv.clone()));
    let y = tape.layer_norm(x, g, b).unwrap();
    for (row, out) in xv.data().chunks(7).zip(tape.value(y).data().chunks(7)) {
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for k in 0..7 {
            let want = (row[k] - mean) / (var + 1e-12).sqrt() * gv.data()[k] + bv.data()[k];
            assert!((out[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::new();
    let a = random(&[3, 4], &mut rng(5));
    let eye = Tensor::new(&[3, 3], (0..9).map(|k| (k % 4 == 0) as u8 as f64).collect()).unwrap();
    let i = tape.constant(eye);
    let av = tape.constant(a.clone());
    let y = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn matmul_matches_triple_loop() {
    let (m, k, n) = (4, 5, 3);
    let a = random(&[m, k], &mut rng(6));
    let b = random(&[k, n], &mut rng(7));
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(av, bv).unwrap();
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
            assert!((tape.value(y).data()[i * n + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 3], vec![4, 5])),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gradient_of_sum_is_ones_and_accumulates() {
    let mut store = ParamStore::new();
    let p = store.add("p", random(&[2, 3], &mut rng(8)));
    for round in 1..=2 {
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let s = tape.sum(v);
        tape.backward(s, &mut store).unwrap();
        let g = store.get(p).grad.as_ref().unwrap();
        assert!(g.data().iter().all(|&x| x == round as f64));
    }
}

#[test]
fn gradient_of_half_square_norm_is_identity() {
    let mut store = ParamStore::new();
    let pv = random(&[5], &mut rng(9));
    let p = store.add("p", pv.clone());
    let mut tape = Tape::new();
    let v = tape.param(&store, p);
    let sq = tape.mul(v, v).unwrap();
    let half = tape.scale(sq, 0.5);
    let loss = tape.sum(half);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.as_ref().unwrap(), &pv);
}

#[test]
fn backward_requires_scalar() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::<f64>::zeros(&[3]));
    let mut tape = Tape::new();
    let v = tape.param(&store, p);
    assert!(matches!(tape.backward(v, &mut store), Err(Error::NonScalarLoss(_))));
}

#[test]
fn cross_entropy_nonnegative_and_zero_when_certain() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 6], &mut rng(10)));
    let l = tape.cross_entropy(x, &[Some(1), None, Some(5), Some(0)]).unwrap();
    assert!(tape.value(l).item() > 0.0);
    let sharp = tape.constant(Tensor::new(&[1, 3], vec![2000.0, 0.0, 0.0]).unwrap());
    let l = tape.cross_entropy(sharp, &[Some(0)]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[3, 3], &mut rng(11)));
    let y = tape.dropout(x, 0.0, &mut rng(0));
    assert_eq!(tape.value(x), tape.value(y));
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut r = rng(12);
    let inputs = vec![
        random(&[6, 5], &mut r),
        random(&[5, 8], &mut r),
        random(&[8], &mut r),
        random(&[8, 7], &mut r),
        random(&[7], &mut r),
        random(&[7, 4], &mut r),
    ];
    let err = max_grad_error(
        inputs,
        |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add(h, v[2]).unwrap();
            let h = t.gelu(h);
            let h = t.matmul(h, v[3]).unwrap();
            let h = t.add(h, v[4]).unwrap();
            let h = t.gelu(h);
            let logits = t.matmul(h, v[5]).unwrap();
            t.cross_entropy(logits, &[Some(0), Some(3), None, Some(1), Some(2), Some(3)]).unwrap()
        },
        12,
    );
    assert!(err < 1e-6, "{err}");
}

fn dims() -> impl Strategy<Value = usize> {
    1usize..5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grads(m in dims(), k in dims(), n in dims(), trans in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let b_shape = if trans { [n, k] } else { [k, n] };
        let inputs = vec![random(&[2, m, k], &mut r), random(&b_shape, &mut r)];
        let err = max_grad_error(inputs, |t, v| if trans { t.matmul_t(v[0], v[1]).unwrap() } else { t.matmul(v[0], v[1]).unwrap() }, seed);
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn bmm_grads(g in dims(), m in dims(), k in dims(), n in dims(), trans in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let b_shape = if trans { [g, n, k] } else { [g, k, n] };
        let inputs = vec![random(&[g, m, k], &mut r), random(&b_shape, &mut r)];
        let err = max_grad_error(inputs, |t, v| t.bmm(v[0], v[1], trans).unwrap(), seed);
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn elementwise_grads(a in dims(), b in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![random(&[a, b], &mut r), random(&[b], &mut r), random(&[a, b], &mut r)];
        let err = max_grad_error(
            inputs,
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let p = t.mul(s, v[2]).unwrap();
                let g = t.gelu(p);
                t.scale(g, -1.7)
            },
            seed,
        );
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn layer_norm_grads(rows in dims(), d in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![random(&[rows, d], &mut r), random(&[d], &mut r), random(&[d], &mut r)];
        let err = max_grad_error(inputs, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(), seed);
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn softmax_grads(b in dims(), rows in dims(), keys in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let valid: Vec<bool> = (0..b * keys).map(|k| k % keys == 0 || r.random_bool(0.7)).collect();
        let mask = AttentionMask { valid: Arc::new(valid), keys, rows_per_batch: rows };
        let inputs = vec![random(&[b, rows, keys], &mut r)];
        let err = max_grad_error(inputs, |t, v| t.softmax(v[0], Some(&mask)).unwrap(), seed);
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn embedding_and_gather_grads(v in 2usize..9, h in dims(), n in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ids: Vec<u32> = (0..n).map(|_| r.random_range(0..v as u32)).collect();
        let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let inputs = vec![random(&[v, h], &mut r)];
        let err = max_grad_error(
            inputs,
            |t, x| {
                let e = t.embedding(x[0], &ids).unwrap();
                t.gather_rows(e, &rows).unwrap()
            },
            seed,
        );
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn loss_grads(n in dims(), v in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let labels: Vec<Option<u32>> = (0..n).map(|_| r.random_bool(0.7).then(|| r.random_range(0..v as u32))).collect();
        let targets: Vec<f64> = (0..n * v).map(|_| r.random_range(0..2) as f64).collect();
        let inputs = vec![random(&[n, v], &mut r)];
        let err = max_grad_error(
            inputs,
            |t, x| {
                let ce = t.cross_entropy(x[0], &labels).unwrap();
                let bce = t.bce_with_logits(x[0], &targets).unwrap();
                let ce = t.reshape(ce, &[1]).unwrap();
                let bce = t.reshape(bce, &[1]).unwrap();
                let both = t.concat(&[ce, bce], 0).unwrap();
                t.sum(both)
            },
            seed,
        );
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn layout_grads(a in dims(), b in dims(), c in dims(), d in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![random(&[a, b, c, d], &mut r), random(&[a, b, 2, d], &mut r)];
        let start = r.random_range(0..c);
        let len = r.random_range(1..=c - start);
        let err = max_grad_error(
            inputs,
            |t, x| {
                let cat = t.concat(&[x[0], x[1]], 2).unwrap();
                let s = t.slice(cat, 2, start, len + 1).unwrap();
                let sw = t.swap_axes12(s).unwrap();
                t.reshape(sw, &[a * (len + 1), b * d]).unwrap()
            },
            seed,
        );
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn dropout_grads(n in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![random(&[n], &mut r)];
        // the same rng seed on every evaluation fixes the mask
        let err = max_grad_error(inputs, |t, x| t.dropout(x[0], 0.3, &mut rng(seed)), seed);
        prop_assert!(err < 1e-5, "{}", err);
    }
}

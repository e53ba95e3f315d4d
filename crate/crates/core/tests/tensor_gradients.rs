//! Finite-difference checks for every differentiable tape op.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reciperec_core::gradcheck::{check, DEFAULT_EPS};
use reciperec_core::{Activation, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so constant-sum outputs still test something.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, shape[0], shape[1]);
    let prod = tape.mul_const(y, r)?;
    Ok(tape.sum(prod))
}

fn assert_grads<F>(inputs: Vec<(&str, Tensor)>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let named: Vec<(String, Tensor)> = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    for r in check(&named, DEFAULT_EPS, build).unwrap() {
        assert!(
            r.passes(TOL),
            "{}: rel err {:.3e} at entry {} (analytic {}, numeric {})",
            r.name,
            r.max_rel_err,
            r.worst_entry,
            r.analytic,
            r.numeric
        );
    }
}

#[test]
fn matmul_sum_gradient_matches_fd_on_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 2);
    let named = vec![("a".to_string(), a), ("b".to_string(), b)];
    let reports = check(&named, DEFAULT_EPS, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(reports[0].max_rel_err < 1e-6, "{:?}", reports[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_elementwise_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        assert_grads(vec![("a", a.clone()), ("b", b.clone())], |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.sub(x, v[1])?;
            let z = t.mul(y, v[1])?;
            let w = t.scale(z, -1.7);
            let w = t.add_scalar(w, 0.3);
            probe(t, w, seed)
        });
    }

    #[test]
    fn matmul_and_transpose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 2);
        assert_grads(vec![("a", a), ("b", b)], |t, v| {
            let at = t.transpose(v[0])?;
            let y = t.matmul(at, v[1])?;
            probe(t, y, seed)
        });
    }

    #[test]
    fn broadcasts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 4, 3);
        let r = rand_tensor(&mut rng, 1, 3);
        let c = rand_tensor(&mut rng, 4, 1);
        assert_grads(vec![("x", x), ("row", r), ("col", c)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul_col(y, v[2])?;
            probe(t, y, seed)
        });
    }

    #[test]
    fn activations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 3, 5);
        for act in [Activation::Relu, Activation::Tanh, Activation::LeakyRelu { slope: 0.2 }] {
            assert_grads(vec![("x", x.clone())], |t, v| {
                let y = t.activation(v[0], act);
                probe(t, y, seed)
            });
        }
    }

    #[test]
    fn softmax_family(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 3, 4);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        assert_grads(vec![("x", x)], |t, v| {
            let a = t.softmax_scaled(v[0], 2.5)?;
            let b = t.masked_softmax(v[0], &mask)?;
            let c = t.log_softmax(v[0])?;
            let s = t.add(a, b)?;
            let s = t.add(s, c)?;
            probe(t, s, seed)
        });
    }

    #[test]
    fn structural_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 3, 2);
        let b = rand_tensor(&mut rng, 3, 3);
        assert_grads(vec![("a", a), ("b", b)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]])?;
            let s = t.slice_cols(c, 1, 3)?;
            let r = t.concat_rows(&[s, s])?;
            let g = t.gather_rows(r, vec![5, 0, 0, 2])?;
            let m = t.mean_rows(g)?;
            probe(t, m, seed)
        });
    }

    #[test]
    fn segment_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 6, 3);
        let seg = vec![0usize, 2, 0, 2, 2, 0];
        assert_grads(vec![("x", x)], |t, v| {
            let s = t.segment_sum(v[0], seg.clone(), 3)?;
            let sm = t.segment_softmax(v[0], seg.clone(), 3)?;
            let mx = t.segment_max(v[0], &seg, 3)?;
            let a = probe(t, s, seed)?;
            let b = probe(t, sm, seed + 1)?;
            let c = probe(t, mx, seed + 2)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        });
    }

    #[test]
    fn edge_weighted_sum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = rand_tensor(&mut rng, 4, 3);
        let weights = rand_tensor(&mut rng, 5, 1);
        assert_grads(vec![("values", values), ("weights", weights)], |t, v| {
            let y = t.edge_weighted_sum(v[0], v[1], vec![0, 1, 3, 3, 2], vec![1, 1, 0, 2, 0], 3)?;
            probe(t, y, seed)
        });
    }

    #[test]
    fn row_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 4, 3);
        assert_grads(vec![("a", a), ("b", b)], |t, v| {
            let n = t.row_normalize(v[0])?;
            let d = t.row_dot(n, v[1])?;
            let p = t.pick_per_row(v[1], &[2, 0, 1, 1])?;
            let s = t.add(d, p)?;
            probe(t, s, seed)
        });
    }

    #[test]
    fn dropout_mask_op(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 3, 3);
        let keep: Vec<bool> = (0..9).map(|_| rng.random_bool(0.7)).collect();
        assert_grads(vec![("x", x)], |t, v| {
            let y = t.dropout_mask(v[0], &keep, 0.3)?;
            probe(t, y, seed)
        });
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 4, 6);
        let shifted = Tensor::matrix(4, 6, x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut t = Tape::new();
        let a = t.constant(x);
        let b = t.constant(shifted);
        let sa = t.softmax_scaled(a, 128f64.sqrt()).unwrap();
        let sb = t.softmax_scaled(b, 128f64.sqrt()).unwrap();
        for r in 0..4 {
            let row = t.value(sa).row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-9);
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 5, 4);
        let b = rand_tensor(&mut rng, 4, 3);
        let run = || {
            let mut t = Tape::new();
            let va = t.param(a.clone());
            let vb = t.param(b.clone());
            let y = t.matmul(va, vb).unwrap();
            let y = t.tanh(y);
            let y = t.softmax_scaled(y, 1.3).unwrap();
            let l = probe(&mut t, y, seed).unwrap();
            t.backward(l).unwrap();
            (t.grad(va), t.grad(vb))
        };
        let (g1, g2) = (run(), run());
        prop_assert_eq!(g1.0.data(), g2.0.data());
        prop_assert_eq!(g1.1.data(), g2.1.data());
    }
}

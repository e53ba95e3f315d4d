use reciperec_core::config::{PredictorKind, Similarity};
use reciperec_core::gradcheck::{check, worst, DEFAULT_EPS};
use reciperec_core::graph::augment::augment;
use reciperec_core::graph::split::leave_one_out_split;
use reciperec_core::objectives::{contrastive_loss, joint_loss, rec_loss, score_vectors};
use reciperec_core::selfcheck::{joint_loss_gradients, toy_config, toy_graph};
use reciperec_core::synth::{generate, SyntheticSpec};
use reciperec_core::train::Trainer;
use reciperec_core::{RecipeRec, Tape, Tensor, TrainConfig};

/// Per-node InfoNCE computed entry by entry from its definition.
fn infonce_brute_force(h1: &[Vec<f64>], h2: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..h1.len() {
        let num = (cos(&h1[i], &h2[i]) / tau).exp();
        let mut den = 0.0;
        for j in 0..h2.len() {
            den += (cos(&h1[i], &h2[j]) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total
}

fn library_infonce(h1: &Tensor, h2: &Tensor, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(h1.clone());
    let b = tape.constant(h2.clone());
    let l = contrastive_loss(&mut tape, a, b, tau, Similarity::Cosine).unwrap();
    tape.value(l).item()
}

#[test]
fn orthogonal_unit_embeddings_follow_the_closed_form() {
    let tau = 0.07;
    for b in 1..=6 {
        let eye = Tensor::identity(b);
        let rows: Vec<Vec<f64>> = (0..b).map(|r| eye.row(r).to_vec()).collect();
        let closed = -((1.0 / tau as f64).exp() / ((1.0 / tau as f64).exp() + (b - 1) as f64)).ln();
        let brute = infonce_brute_force(&rows, &rows, tau) / b as f64;
        assert!((closed - brute).abs() < 1e-9);
        let lib = library_infonce(&eye, &eye, tau) / b as f64;
        assert!((lib - brute).abs() < 1e-9, "B={b}: {lib} vs {brute}");
    }
    // Frozen value for B = 4.
    let eye = Tensor::identity(4);
    assert!((library_infonce(&eye, &eye, tau) / 4.0 - 1.874623095709276e-6).abs() < 1e-15);
}

#[test]
fn general_embeddings_match_brute_force() {
    let h1 = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.4], vec![-0.7, 0.9, 0.1]]).unwrap();
    let h2 = Tensor::from_rows(&[vec![0.1, -0.8, 1.7], vec![1.0, 0.5, -0.2], vec![0.4, 0.6, 0.3]]).unwrap();
    let r = |t: &Tensor| (0..3).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    for tau in [0.07, 0.5, 2.0] {
        let lib = library_infonce(&h1, &h2, tau);
        assert!((lib - infonce_brute_force(&r(&h1), &r(&h2), tau)).abs() < 1e-9);
        assert!(lib >= 0.0);
    }
}

#[test]
fn single_node_batch_has_zero_contrastive_loss() {
    let h = Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
    assert_eq!(library_infonce(&h, &h, 0.07), 0.0);
}

#[test]
fn undropped_views_make_every_positive_the_row_maximum() {
    let g = toy_graph();
    let model = RecipeRec::new(&g, &toy_config()).unwrap();
    let a = model.embeddings(&augment(&g, 0.0, 0.0, 1).unwrap()).unwrap();
    let b = model.embeddings(&augment(&g, 0.0, 0.0, 2).unwrap()).unwrap();
    assert_eq!(a, b);
    for (x, y) in [(&a.user, &b.user), (&a.recipe, &b.recipe)] {
        for i in 0..x.rows() {
            let pos = score_vectors(PredictorKind::Cosine, x.row(i), y.row(i)).unwrap();
            assert!((pos - 1.0).abs() < 1e-12);
            for j in 0..y.rows() {
                assert!(score_vectors(PredictorKind::Cosine, x.row(i), y.row(j)).unwrap() <= pos + 1e-12);
            }
        }
        // Equal views: loss from the library equals the single-encode brute force.
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        let lib = library_infonce(x, y, 0.07);
        assert!((lib - infonce_brute_force(&rows(x), &rows(x), 0.07)).abs() < 1e-9);
        assert!(lib <= x.rows() as f64 * (x.rows() as f64).ln() + 1e-9);
    }
}

fn hinge_value_and_grads(pos: f64, neg: f64) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::column(vec![pos]));
    let n = tape.param(Tensor::column(vec![neg]));
    let l = rec_loss(&mut tape, p, n).unwrap();
    tape.backward(l).unwrap();
    (tape.value(l).item(), tape.grad(p).item(), tape.grad(n).item())
}

#[test]
fn hinge_examples_and_gradients() {
    assert_eq!(hinge_value_and_grads(2.0, 0.5), (0.0, 0.0, 0.0));
    let (v, gp, gn) = hinge_value_and_grads(0.2, 0.5);
    assert!((v - 1.3).abs() < 1e-15);
    assert_eq!((gp, gn), (-1.0, 1.0));
    let inputs = vec![
        ("pos".to_string(), Tensor::column(vec![0.2, 2.0, -0.3])),
        ("neg".to_string(), Tensor::column(vec![0.5, 0.1, 0.4])),
    ];
    let reports = check(&inputs, DEFAULT_EPS, |t, v| rec_loss(t, v[0], v[1])).unwrap();
    assert!(worst(&reports).unwrap().passes(1e-4));
}

#[test]
fn lambda_zero_returns_the_ranking_loss_exactly() {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::scalar(3.25));
    let c = tape.constant(Tensor::scalar(7.0));
    let j = joint_loss(&mut tape, r, Some(c), 0.0).unwrap();
    assert_eq!(tape.value(j).item(), 3.25);
    let j = joint_loss(&mut tape, r, Some(c), 0.1).unwrap();
    assert!((tape.value(j).item() - 3.95).abs() < 1e-15);
    assert!(joint_loss(&mut tape, r, Some(c), -0.1).is_err());
}

#[test]
fn scores_follow_their_definitions() {
    assert_eq!(
        score_vectors(PredictorKind::InnerProduct, &[1.0, 2.0], &[3.0, 4.0]).unwrap(),
        11.0
    );
    let v = [0.3, -2.0, 1.1];
    assert!((score_vectors(PredictorKind::Cosine, &v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(
        score_vectors(PredictorKind::Cosine, &[0.0, 0.0], &[1.0, 2.0]).unwrap(),
        0.0
    );
    assert!(score_vectors(PredictorKind::InnerProduct, &[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn orthogonal_user_shift_keeps_inner_product_scores() {
    let g = toy_graph();
    let cfg = TrainConfig {
        hidden: 8,
        heads: 2,
        settf_heads: 2,
        ..toy_config()
    };
    let model = RecipeRec::new(&g, &cfg).unwrap();
    let emb = model.embeddings(&g.full_view()).unwrap();
    // Gram-Schmidt: remove from a probe vector its components along the recipe rows.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..emb.recipe.rows() {
        let mut v = emb.recipe.row(r).to_vec();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    let mut shift: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    for b in &basis {
        let p: f64 = shift.iter().zip(b).map(|(x, y)| x * y).sum();
        shift.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    assert!(shift.iter().map(|x| x.abs()).sum::<f64>() > 0.1);
    for u in 0..emb.user.rows() {
        let moved: Vec<f64> = emb.user.row(u).iter().zip(&shift).map(|(a, b)| a + 5.0 * b).collect();
        for r in 0..emb.recipe.rows() {
            let a = score_vectors(PredictorKind::InnerProduct, emb.user.row(u), emb.recipe.row(r)).unwrap();
            let b = score_vectors(PredictorKind::InnerProduct, &moved, emb.recipe.row(r)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_loss_gradients_hold_for_every_predictor_and_view_mode() {
    for cfg in [
        TrainConfig {
            predictor: PredictorKind::Mlp,
            ..toy_config()
        },
        TrainConfig {
            predictor: PredictorKind::Cosine,
            ..toy_config()
        },
        TrainConfig {
            rec_on_views: true,
            contrastive_sim: Similarity::InnerProduct,
            tau: 1.0,
            ..toy_config()
        },
        TrainConfig {
            use_set_transformer: false,
            ..toy_config()
        },
    ] {
        let reports = joint_loss_gradients(&cfg).unwrap();
        let w = worst(&reports).unwrap();
        assert!(w.passes(1e-4), "{w:?} for {cfg:?}");
    }
}

fn synthetic() -> reciperec_core::HeteroGraph {
    generate(&SyntheticSpec::default()).unwrap()
}

#[test]
fn zero_lambda_and_zero_learning_rate_leave_parameters_bitwise_unchanged() {
    let g = synthetic();
    let split = leave_one_out_split(&g, 5).unwrap();
    let tg = split.train_graph(&g).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        lr: 0.0,
        hidden: 16,
        heads: 2,
        settf_heads: 2,
        user_dim: 8,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&tg, &split, &cfg).unwrap();
    let before = tr.model().store().to_named();
    tr.train_epoch().unwrap();
    let after = tr.model().store().to_named();
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{n} changed");
    }
}

#[test]
fn epoch_loss_trends_down_early_on_the_synthetic_graph() {
    let g = synthetic();
    let split = leave_one_out_split(&g, 5).unwrap();
    let tg = split.train_graph(&g).unwrap();
    // At the default rate the first full-batch Adam steps overshoot; see the README.
    let cfg = TrainConfig {
        lr: 0.001,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&tg, &split, &cfg).unwrap();
    let losses: Vec<f64> = (0..10).map(|_| tr.train_epoch().unwrap().mean_loss).collect();
    // Fresh negatives and views each epoch add a few percent of noise.
    assert!(losses.windows(2).all(|w| w[1] <= 1.05 * w[0]), "{losses:?}");
    assert!(losses[9] < 0.5 * losses[0], "{losses:?}");
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

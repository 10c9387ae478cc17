//! Property tests for losses, temperatures, models and retrieval metrics.

mod common;

use proptest::collection::vec;
use proptest::prelude::*;
use sskd_core::autodiff::{entropy, softmax_t};
use sskd_core::distill::{cross_entropy, kd_loss, kd_loss_unlabeled, kd_loss_value, sskd_total};
use sskd_core::eval::{evaluate, EmbeddingSet};
use sskd_core::model::normalize;
use sskd_core::{build_model, ExtractorConfig, Model, Tape, Tensor};

fn logits(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
    vec(-20.0f64..20.0, rows * k).prop_map(move |d| Tensor::matrix(rows, k, d).unwrap())
}

fn pair(rows: usize, k: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (logits(rows, k), logits(rows, k))
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap()
}

fn micro(seed: u64, d: usize, k: usize, aux: bool) -> Model {
    let cfg = ExtractorConfig {
        input_dim: d,
        hidden_dims: vec![5],
        embed_dim: 3,
        seed,
    };
    build_model(&cfg, k, aux.then_some(k)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(d in (1usize..5, 2usize..8).prop_flat_map(|(r, k)| logits(r, k)), tau in 0.1f64..32.0) {
        let p = softmax_t(&d, tau).unwrap();
        let (rows, _) = p.as_rows();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_folds_into_logits(d in (1usize..4, 2usize..8).prop_flat_map(|(r, k)| logits(r, k)), tau in 0.25f64..16.0) {
        let a = softmax_t(&d, tau).unwrap();
        let b = softmax_t(&scaled(&d, 1.0 / tau), 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_temperature_identity((t, s) in (1usize..4, 2usize..8).prop_flat_map(|(r, k)| pair(r, k)), tau in 0.25f64..16.0) {
        let a = kd_loss_value(&t, &s, tau).unwrap();
        let b = kd_loss_value(&scaled(&t, 1.0 / tau), &scaled(&s, 1.0 / tau), 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn kl_is_non_negative((t, s) in (1usize..4, 2usize..10).prop_flat_map(|(r, k)| pair(r, k)), tau in 0.1f64..32.0) {
        prop_assert!(kd_loss_value(&t, &s, tau).unwrap() >= -1e-9);
    }

    #[test]
    fn kl_of_identical_logits_is_zero(t in (1usize..4, 2usize..10).prop_flat_map(|(r, k)| logits(r, k)), tau in 0.5f64..16.0) {
        prop_assert!(kd_loss_value(&t, &t, tau).unwrap().abs() < 1e-12);
    }

    #[test]
    fn entropy_grows_with_temperature(d in vec(-10.0f64..10.0, 2..12)) {
        let t = Tensor::matrix(1, d.len(), d).unwrap();
        let h: Vec<f64> = (1..=16).map(|tau| entropy(softmax_t(&t, tau as f64).unwrap().data())).collect();
        for w in h.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{h:?}");
        }
    }

    #[test]
    fn unlabeled_term_matches_labeled_formula((t, s) in (1usize..4, 2usize..6).prop_flat_map(|(r, k)| pair(r, k)), tau in 0.5f64..16.0) {
        let mut tape = Tape::new();
        let (tv, sv) = (tape.constant(t.clone()), tape.constant(s.clone()));
        let a = kd_loss(&mut tape, tv, sv, tau).unwrap();
        let b = kd_loss_unlabeled(&mut tape, tv, sv, tau).unwrap();
        prop_assert_eq!(tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
    }

    #[test]
    fn normalization_is_idempotent(v in vec(-5.0f64..5.0, 2..16)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let n = normalize(&v).unwrap();
        let nn = normalize(&n).unwrap();
        prop_assert!((n.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        for (a, b) in n.iter().zip(&nn) {
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The objective splits into its three terms, the teacher never gets
    /// gradients, and each head only sees gradients from its own term.
    #[test]
    fn objective_structure(seed in any::<u64>(), b in 1usize..5, u in 1usize..5, taus in (0.5f64..16.0, 0.5f64..16.0, 0.5f64..16.0)) {
        let (d, k) = (4, 3);
        let student = micro(seed, d, k, true);
        let teacher = micro(seed ^ 1, d, k, false).freeze();
        let mut r = common::rng(seed);
        let x = common::uniform(&mut r, &[b, d], -2.0, 2.0);
        let ux = common::uniform(&mut r, &[u, d], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % k).collect();

        let mut tape = Tape::new();
        let tb = teacher.bind(&mut tape, true);
        let sb = student.bind(&mut tape, true);
        let loss = sskd_total(&mut tape, &student, &sb, &teacher, &x, &labels, Some(&ux), taus.0, taus.1, taus.2, (1.0, 1.0)).unwrap();
        let parts = tape.value(loss.ce).item().unwrap() + tape.value(loss.kd).item().unwrap() + tape.value(loss.kd_u.unwrap()).item().unwrap();
        prop_assert!((tape.value(loss.total).item().unwrap() - parts).abs() < 1e-12);
        prop_assert!(tape.value(loss.total).item().unwrap() >= tape.value(loss.ce).item().unwrap() - 1e-9);

        // separately evaluated terms
        let mut t2 = Tape::new();
        let s2 = student.bind(&mut t2, false);
        let xv = t2.constant(x.clone());
        let main = student.forward_on(&mut t2, &s2, xv).unwrap().logits_main;
        let ce = cross_entropy(&mut t2, main, &labels, taus.0).unwrap();
        prop_assert!((t2.value(ce).item().unwrap() - tape.value(loss.ce).item().unwrap()).abs() < 1e-12);

        tape.backward(loss.total).unwrap();
        for v in tb.vars() {
            prop_assert!(tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }

        // unlabeled term alone: aux head gets gradient, main head none.
        // Biases are checked for presence since a dead embedding zeroes weight grads.
        let mut t3 = Tape::new();
        let s3 = student.bind(&mut t3, true);
        let uxv = t3.constant(ux.clone());
        let out = student.forward_on(&mut t3, &s3, uxv).unwrap();
        let tl = t3.constant(teacher.forward(&ux).unwrap().logits_main);
        let term = kd_loss_unlabeled(&mut t3, tl, out.logits_aux.unwrap(), taus.2).unwrap();
        t3.backward(term).unwrap();
        let aux = s3.aux.unwrap();
        prop_assert!(t3.grad(s3.main.weight).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        prop_assert!(t3.grad(aux.bias).is_some_and(|g| g.iter().any(|&x| x != 0.0)));

        // labeled terms alone: main head gets gradient, aux head none
        let mut t4 = Tape::new();
        let s4 = student.bind(&mut t4, true);
        let xv = t4.constant(x.clone());
        let out = student.forward_on(&mut t4, &s4, xv).unwrap();
        let ce = cross_entropy(&mut t4, out.logits_main, &labels, taus.0).unwrap();
        t4.backward(ce).unwrap();
        let aux = s4.aux.unwrap();
        prop_assert!(t4.grad(aux.weight).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        prop_assert!(t4.grad(s4.main.bias).is_some_and(|g| g.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let m = micro(seed, 4, 3, true);
        let x = common::uniform(&mut common::rng(seed), &[6, 4], -2.0, 2.0);
        let grads = || {
            let mut t = Tape::new();
            let b = m.bind(&mut t, true);
            let xv = t.constant(x.clone());
            let out = m.forward_on(&mut t, &b, xv).unwrap();
            let ce = cross_entropy(&mut t, out.logits_main, &[0, 1, 2, 0, 1, 2], 2.0).unwrap();
            t.backward(ce).unwrap();
            b.grads(&t)
        };
        let (a, b) = (grads(), grads());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

fn random_set(r: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize, ids: u64, cams: u32) -> EmbeddingSet {
    use rand::Rng;
    let rows = (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let id = (0..n).map(|_| r.random_range(0..ids)).collect();
    let cam = (0..n).map(|_| r.random_range(0..cams)).collect();
    EmbeddingSet::new(rows, id, cam).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_embedding_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = common::rng(seed);
        let p = random_set(&mut r, 6, 5, 4, 2);
        let g = random_set(&mut r, 12, 5, 4, 3);
        prop_assume!(p.identities().iter().any(|i| g.identities().contains(i)));
        let scale = |s: &EmbeddingSet| EmbeddingSet::new(
            s.embeddings().iter().map(|e| e.iter().map(|x| x * c).collect()).collect(),
            s.identities().to_vec(),
            s.cameras().to_vec(),
        ).unwrap();
        let a = evaluate(&p, &g, true);
        let b = evaluate(&scale(&p), &scale(&g), true);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.rank_k, b.rank_k);
                prop_assert!((a.map - b.map).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "scaling changed evaluability"),
        }
    }

    #[test]
    fn metrics_ignore_probe_and_gallery_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut r = common::rng(seed);
        let p = random_set(&mut r, 6, 5, 4, 2);
        let g = random_set(&mut r, 12, 5, 4, 3);
        let permute = |s: &EmbeddingSet, r: &mut rand_chacha::ChaCha8Rng| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(r);
            EmbeddingSet::new(
                idx.iter().map(|&i| s.embeddings()[i].clone()).collect(),
                idx.iter().map(|&i| s.identities()[i]).collect(),
                idx.iter().map(|&i| s.cameras()[i]).collect(),
            ).unwrap()
        };
        let (pp, gp) = (permute(&p, &mut r), permute(&g, &mut r));
        // continuous random embeddings: no distance ties, so order is irrelevant
        match (evaluate(&p, &g, true), evaluate(&pp, &gp, true)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.rank_k, b.rank_k);
                prop_assert!((a.map - b.map).abs() < 1e-12);
                prop_assert_eq!(a.skipped, b.skipped);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "permutation changed evaluability"),
        }
    }
}

/// With random embeddings and exactly one true match per probe among `G`
/// admissible items, rank-1 is Binomial(n, 1/G) / n.
#[test]
fn random_embeddings_score_at_chance() {
    use rand::Rng;
    let g = 20u64;
    let trials = 4000;
    let mut r = common::rng(7);
    let gallery = EmbeddingSet::new(
        (0..g).map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
        (0..g).collect(),
        vec![1; g as usize],
    )
    .unwrap();
    let probe = EmbeddingSet::new(
        (0..trials).map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
        (0..trials).map(|i| i as u64 % g).collect(),
        vec![0; trials],
    )
    .unwrap();
    let res = evaluate(&probe, &gallery, true).unwrap();
    let p = 1.0 / g as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    // 4.5 standard errors: a false alarm is far below one in 10^5
    assert!((res.rank1() - p).abs() < 4.5 * se, "rank-1 {} vs chance {p}", res.rank1());
    assert_eq!(res.skipped, 0);
}

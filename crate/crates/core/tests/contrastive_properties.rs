use cograca_core::contrastive::{individualized_loss, multimodal_loss, BatchIndex, ContrastiveConfig};
use cograca_core::numerics::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Batch {
    subjects: Vec<String>,
    visits: Vec<u32>,
    embeddings: Matrix,
    cognition: Matrix,
}

fn batch(seed: u64, subjects: usize, dim: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut visits = Vec::new();
    for s in 0..subjects {
        for v in 1..=rng.gen_range(1..=3u32) {
            ids.push(format!("s{s}"));
            visits.push(v);
        }
    }
    let n = ids.len();
    Batch {
        subjects: ids,
        visits,
        embeddings: Matrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng)),
        cognition: Matrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng)),
    }
}

fn mean_positive_cosine(h: &Matrix, idx: &BatchIndex) -> f64 {
    let cos = |i: usize, j: usize| {
        let (a, b) = (h.row(i), h.row(j));
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..h.rows() {
        for j in 0..h.rows() {
            if i != j && idx.same_subject(i, j) {
                total += cos(i, j);
                count += 1;
            }
        }
    }
    total / count as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_ignore_positive_rescaling(seed in any::<u64>(), include_positive in any::<bool>()) {
        let b = batch(seed, 6, 5);
        let idx = BatchIndex::new(&b.subjects, &b.visits).unwrap();
        let cfg = ContrastiveConfig { include_positive, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut scaled = b.embeddings.clone();
        for i in 0..scaled.rows() {
            let s = rng.gen_range(0.01..100.0);
            for x in scaled.row_mut(i) {
                *x *= s;
            }
        }
        let ind = individualized_loss(&b.embeddings, &idx, &cfg).unwrap().loss;
        let ind_s = individualized_loss(&scaled, &idx, &cfg).unwrap().loss;
        prop_assert!((ind - ind_s).abs() < 1e-10);
        let mul = multimodal_loss(&b.embeddings, &b.cognition, &idx, &cfg).unwrap().loss;
        let mul_s = multimodal_loss(&scaled, &b.cognition, &idx, &cfg).unwrap().loss;
        prop_assert!((mul - mul_s).abs() < 1e-10);
    }

    #[test]
    fn losses_ignore_visit_order(seed in any::<u64>()) {
        let b = batch(seed, 6, 4);
        let n = b.subjects.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 3));
        let subjects: Vec<String> = perm.iter().map(|&i| b.subjects[i].clone()).collect();
        let visits: Vec<u32> = perm.iter().map(|&i| b.visits[i]).collect();
        let idx = BatchIndex::new(&b.subjects, &b.visits).unwrap();
        let idx_p = BatchIndex::new(&subjects, &visits).unwrap();
        let h_p = b.embeddings.select_rows(&perm);
        let c_p = b.cognition.select_rows(&perm);
        let cfg = ContrastiveConfig::default();
        let ind = individualized_loss(&b.embeddings, &idx, &cfg).unwrap();
        let ind_p = individualized_loss(&h_p, &idx_p, &cfg).unwrap();
        prop_assert!((ind.loss - ind_p.loss).abs() < 1e-10);
        prop_assert!(ind.grad.select_rows(&perm).sub(&ind_p.grad).max_abs() < 1e-10);
        let mul = multimodal_loss(&b.embeddings, &b.cognition, &idx, &cfg).unwrap();
        let mul_p = multimodal_loss(&h_p, &c_p, &idx_p, &cfg).unwrap();
        prop_assert!((mul.loss - mul_p.loss).abs() < 1e-10);
        prop_assert!(mul.grad.select_rows(&perm).sub(&mul_p.grad).max_abs() < 1e-10);
    }

    #[test]
    fn gradient_step_pulls_visits_of_a_subject_together(seed in any::<u64>()) {
        let b = batch(seed, 5, 6);
        let idx = BatchIndex::new(&b.subjects, &b.visits).unwrap();
        prop_assume!(idx.groups().iter().any(|g| g.len() > 1));
        let cfg = ContrastiveConfig::default();
        let loss = individualized_loss(&b.embeddings, &idx, &cfg).unwrap();
        let before = mean_positive_cosine(&b.embeddings, &idx);
        let mut step = b.embeddings.clone();
        step.axpy(-1e-4, &loss.grad);
        let after = mean_positive_cosine(&step, &idx);
        prop_assert!(after > before, "{before} -> {after}");
    }
}

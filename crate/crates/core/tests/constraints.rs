use cograca_core::gcca::{preprocess_views, solve_gcca, PreprocessStats, RidgePolicy};
use cograca_core::graph::{build_graph, encode_graph, EncoderParams};
use cograca_core::numerics::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_corr(v: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let f = gaussian(v, v + 2, rng);
    let mut c = f.matmul_t(&f);
    let d: Vec<f64> = (0..v).map(|i| c[(i, i)].sqrt()).collect();
    for i in 0..v {
        for j in 0..v {
            c[(i, j)] /= d[i] * d[j];
        }
        c[(i, i)] = 1.0;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shared_rows_are_orthonormal(seed in any::<u64>(), n in 20usize..60, db in 2usize..12, dc in 2usize..12, k in 1usize..8, scaled in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = gaussian(db, n, &mut rng);
        let c = gaussian(dc, n, &mut rng);
        let stats = PreprocessStats::fit(&b, &c).unwrap();
        let (vb, vc) = preprocess_views(&b, &c, &stats).unwrap();
        let ridge = if scaled { RidgePolicy::Scaled(1e-4) } else { RidgePolicy::Fixed(1e-6) };
        let sol = solve_gcca(&vb, &vc, k.min(n - 1), ridge).unwrap();
        prop_assert!(sol.orthonormality_error() < 1e-8, "{}", sol.orthonormality_error());
        for w in sol.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(sol.eigenvalues[0] <= 2.0 + 1e-8);
        prop_assert!(*sol.eigenvalues.last().unwrap() >= -1e-8);
    }

    #[test]
    fn attention_is_row_stochastic_on_neighborhoods(seed in any::<u64>(), v in 2usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_graph(&random_corr(v, &mut rng)).unwrap();
        let params = EncoderParams::glorot(&[v, 8, 4], seed);
        let emb = encode_graph(&params, &g).unwrap();
        for a in &emb.attention {
            for p in 0..v {
                let sum: f64 = a.row(p).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-10, "row {p} sums to {sum}");
                for q in 0..v {
                    if p != q && g.adjacency()[(p, q)] == 0.0 {
                        prop_assert_eq!(a[(p, q)], 0.0);
                    }
                    prop_assert!(a[(p, q)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn relabeling_nodes_permutes_embeddings(seed in any::<u64>(), v in 2usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_graph(&random_corr(v, &mut rng)).unwrap();
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rng);
        let gp = g.permute_nodes(&perm).unwrap();
        let params = EncoderParams::glorot(&[v, 8, 4], seed ^ 1);
        let a = encode_graph(&params, &g).unwrap();
        let b = encode_graph(&params, &gp).unwrap();
        for (x, y) in a.pooled.iter().zip(&b.pooled) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..4 {
                prop_assert!((b.nodes[(i, k)] - a.nodes[(p, k)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn solutions_of_reordered_visits_reorder_shared_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let b = gaussian(6, n, &mut rng);
    let c = gaussian(5, n, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let bp = Matrix::from_fn(6, n, |i, j| b[(i, perm[j])]);
    let cp = Matrix::from_fn(5, n, |i, j| c[(i, perm[j])]);
    let solve = |b: &Matrix, c: &Matrix| {
        let stats = PreprocessStats::fit(b, c).unwrap();
        let (vb, vc) = preprocess_views(b, c, &stats).unwrap();
        solve_gcca(&vb, &vc, 3, RidgePolicy::default()).unwrap()
    };
    let s = solve(&b, &c);
    let sp = solve(&bp, &cp);
    for k in 0..3 {
        let sign = if (0..n).map(|j| s.shared[(k, perm[j])] * sp.shared[(k, j)]).sum::<f64>() < 0.0 {
            -1.0
        } else {
            1.0
        };
        for j in 0..n {
            assert!((sign * sp.shared[(k, j)] - s.shared[(k, perm[j])]).abs() < 1e-8);
        }
    }
}

#[test]
fn top_eigenvalue_sum_shrinks_with_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = gaussian(8, 30, &mut rng);
    let c = gaussian(6, 30, &mut rng);
    let stats = PreprocessStats::fit(&b, &c).unwrap();
    let (vb, vc) = preprocess_views(&b, &c, &stats).unwrap();
    let mut last = f64::INFINITY;
    for eps in [1e-8, 1e-4, 1e-2, 1.0, 10.0] {
        let sol = solve_gcca(&vb, &vc, 4, RidgePolicy::Fixed(eps)).unwrap();
        let top: f64 = sol.eigenvalues[..4].iter().sum();
        assert!(top <= last + 1e-10, "eps {eps}: {top} > {last}");
        last = top;
    }
}

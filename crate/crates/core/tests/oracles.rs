use cograca_core::baselines::{amari_index, classical_cca, ica_fit, pca_fit, IcaConfig, PcaComponents};
use cograca_core::gcca::{canonical_correlations, preprocess_views, solve_gcca, PreprocessStats, RidgePolicy};
use cograca_core::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Two row-sample views sharing two latent directions.
fn coupled_views(n: usize, d1: usize, d2: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let z = gaussian(n, 2, rng);
    let a = gaussian(2, d1, rng);
    let b = gaussian(2, d2, rng);
    let x = z.matmul(&a).add(&gaussian(n, d1, rng));
    let y = z.matmul(&b).add(&gaussian(n, d2, rng).scale(1.5));
    (x, y)
}

fn covariance(x: &Matrix, y: &Matrix) -> Matrix {
    let n = x.rows();
    let mx = x.column_means();
    let my = y.column_means();
    Matrix::from_fn(x.cols(), y.cols(), |i, j| {
        (0..n).map(|r| (x[(r, i)] - mx[i]) * (y[(r, j)] - my[j])).sum::<f64>() / (n - 1) as f64
    })
}

/// Gaussian elimination with partial pivoting.
fn solve(a: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs())).unwrap();
        for k in 0..n {
            let t = m[(c, k)];
            m[(c, k)] = m[(p, k)];
            m[(p, k)] = t;
        }
        x.swap(c, p);
        for r in (c + 1)..n {
            let f = m[(r, c)] / m[(c, c)];
            for k in c..n {
                m[(r, k)] -= f * m[(c, k)];
            }
            x[r] -= f * x[c];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|k| m[(r, k)] * x[k]).sum();
        x[r] = (x[r] - s) / m[(r, r)];
    }
    x
}

/// First canonical correlation by alternating power iteration.
fn first_canonical_correlation(x: &Matrix, y: &Matrix) -> f64 {
    let cxx = covariance(x, x);
    let cyy = covariance(y, y);
    let cxy = covariance(x, y);
    let quad = |c: &Matrix, u: &[f64], v: &[f64]| -> f64 { u.iter().zip(c.matvec(v)).map(|(a, b)| a * b).sum() };
    let mut b = vec![1.0; y.cols()];
    let mut rho = 0.0;
    for _ in 0..5000 {
        let mut a = solve(&cxx, &cxy.matvec(&b));
        let na = quad(&cxx, &a, &a).sqrt();
        a.iter_mut().for_each(|v| *v /= na);
        b = solve(&cyy, &cxy.t_matvec(&a));
        let nb = quad(&cyy, &b, &b).sqrt();
        b.iter_mut().for_each(|v| *v /= nb);
        let next = quad(&cxy, &a, &b);
        if (next - rho).abs() < 1e-15 {
            return next;
        }
        rho = next;
    }
    rho
}

#[test]
fn classical_cca_matches_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (x, y) = coupled_views(80, 5, 4, &mut rng);
        let cca = classical_cca(&x, &y, 4).unwrap();
        let oracle = first_canonical_correlation(&x, &y);
        assert!((cca.correlations[0] - oracle).abs() < 1e-7, "{} vs {oracle}", cca.correlations[0]);
    }
}

#[test]
fn two_view_gcca_matches_classical_cca() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (x, y) = coupled_views(50, 5, 4, &mut rng);
        let cca = classical_cca(&x, &y, 1).unwrap();
        let (b, c) = (x.transpose(), y.transpose());
        let stats = PreprocessStats::fit(&b, &c).unwrap();
        let (vb, vc) = preprocess_views(&b, &c, &stats).unwrap();
        let sol = solve_gcca(&vb, &vc, 1, RidgePolicy::Fixed(1e-10)).unwrap();
        let rho = canonical_correlations(&sol, &vb, &vc).unwrap()[0];
        assert!((rho - cca.correlations[0]).abs() < 1e-6, "{rho} vs {}", cca.correlations[0]);
    }
}

#[test]
fn independent_views_have_small_gcca_correlations() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = gaussian(5, 500, &mut rng);
    let c = gaussian(4, 500, &mut rng);
    let stats = PreprocessStats::fit(&b, &c).unwrap();
    let (vb, vc) = preprocess_views(&b, &c, &stats).unwrap();
    let sol = solve_gcca(&vb, &vc, 4, RidgePolicy::Fixed(1e-10)).unwrap();
    let rhos = canonical_correlations(&sol, &vb, &vc).unwrap();
    let edge = (5f64.sqrt() + 2.0) / 500f64.sqrt();
    for rho in &rhos {
        assert!(rho.abs() < 1.3 * edge, "{rho}");
    }
    let cca = classical_cca(&b.transpose(), &c.transpose(), 4).unwrap();
    for (g, k) in rhos.iter().zip(&cca.correlations) {
        assert!((g - k).abs() < 1e-6);
    }
}

#[test]
fn identical_and_rotated_views_correlate_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = gaussian(60, 3, &mut rng);
    let t = std::f64::consts::FRAC_PI_6;
    let rot = Matrix::from_rows(&[
        vec![t.cos(), -t.sin(), 0.0],
        vec![t.sin(), t.cos(), 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    for y in [x.clone(), x.matmul(&rot)] {
        let cca = classical_cca(&x, &y, 3).unwrap();
        for rho in cca.correlations {
            assert!((rho - 1.0).abs() < 1e-6, "{rho}");
        }
    }
}

#[test]
fn independent_views_have_small_cca_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = gaussian(500, 4, &mut rng);
    let y = gaussian(500, 3, &mut rng);
    assert!(classical_cca(&x, &y, 1).unwrap().correlations[0] < 0.2);
}

#[test]
fn cca_correlations_survive_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (x, y) = coupled_views(100, 4, 3, &mut rng);
    let base = classical_cca(&x, &y, 3).unwrap().correlations;
    let a = gaussian(4, 4, &mut rng).add(&Matrix::identity(4).scale(3.0));
    let shift: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut xa = x.matmul(&a);
    for i in 0..xa.rows() {
        for (v, s) in xa.row_mut(i).iter_mut().zip(&shift) {
            *v += s;
        }
    }
    let moved = classical_cca(&xa, &y.scale(-7.0), 3).unwrap().correlations;
    for (p, q) in base.iter().zip(&moved) {
        assert!((p - q).abs() < 1e-6, "{p} vs {q}");
    }
}

#[test]
fn pca_of_a_line_keeps_one_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dir = [1.0, -2.0, 0.5];
    let t: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Matrix::from_fn(40, 3, |i, j| 1.0 + t[i] * dir[j]);
    let pca = pca_fit(&x, PcaComponents::Variance(0.95)).unwrap();
    assert_eq!(pca.output_dim(), 1);
    assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
}

#[test]
fn pca_ratios_and_projection_idempotence() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for (n, f) in [(50, 8), (12, 30)] {
        let x = gaussian(n, f, &mut rng);
        let pca = pca_fit(&x, PcaComponents::Count(5)).unwrap();
        let r = &pca.explained_variance_ratio;
        assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert!(r.windows(2).all(|w| w[0] >= w[1]));
        let y = pca.transform(&x).unwrap();
        let back = Matrix::from_fn(n, f, |i, j| {
            pca.mean[j] + (0..y.cols()).map(|k| y[(i, k)] * pca.components[(k, j)]).sum::<f64>()
        });
        let again = pca.transform(&back).unwrap();
        assert!(again.sub(&y).max_abs() < 1e-8);
    }
}

fn mixed_uniform_sources(seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = 3f64.sqrt();
    let s = Matrix::from_fn(1000, 2, |_, _| rng.gen_range(-limit..limit));
    let a = gaussian(2, 2, &mut rng);
    (s.matmul_t(&a), a)
}

#[test]
fn fastica_recovers_known_mixing() {
    let mut good = 0;
    for seed in 0..20 {
        let (x, a) = mixed_uniform_sources(seed);
        let cfg = IcaConfig {
            components: 2,
            seed,
            ..Default::default()
        };
        let ica = ica_fit(&x, &cfg).unwrap();
        if amari_index(&ica.components.matmul(&a)).unwrap() < 0.05 {
            good += 1;
        }
    }
    assert!(good >= 18, "{good}/20");
}

#[test]
fn fastica_is_deterministic_and_flags_gaussian_data() {
    let (x, _) = mixed_uniform_sources(3);
    let cfg = IcaConfig {
        components: 2,
        ..Default::default()
    };
    assert_eq!(ica_fit(&x, &cfg).unwrap(), ica_fit(&x, &cfg).unwrap());
    assert!(!ica_fit(&x, &cfg).unwrap().gaussian_like);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = gaussian(2000, 3, &mut rng);
    let ica = ica_fit(&g, &IcaConfig { components: 3, ..Default::default() }).unwrap();
    assert!(ica.gaussian_like);
    let y = ica.transform(&g).unwrap();
    let cov = covariance(&y, &y);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-8);
            }
        }
    }
}

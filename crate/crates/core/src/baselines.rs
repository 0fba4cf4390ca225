//! Reference methods: PCA, FastICA, classical two-view CCA and the composed
//! PCA-CCA / ICA-CCA pipelines over vectorized connectivity.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::VisitRecord;
use crate::error::{Error, Result};
use crate::gcca::{ViewKind, ViewStats};
use crate::numerics::{normalize_sign, sym_eig, sym_inv_sqrt, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    Pca,
    Ica,
}

/// How many principal components to keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PcaComponents {
    /// Smallest count whose cumulative explained-variance ratio reaches this.
    Variance(f64),
    Count(usize),
}

/// A fitted linear map `x ↦ components · (x − mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearReducer {
    pub kind: ReducerKind,
    pub mean: Vec<f64>,
    /// `k × features`; orthonormal rows for PCA, unmixing rows for ICA.
    pub components: Matrix,
    /// Explained-variance ratio of each kept component (PCA only).
    pub explained_variance_ratio: Vec<f64>,
    /// ICA: iteration limit reached before the tolerance was met.
    pub not_converged: bool,
    /// ICA: recovered sources look Gaussian, so the rotation is unidentifiable.
    pub gaussian_like: bool,
    pub iterations: usize,
}

impl LinearReducer {
    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Maps rows of `data` (`samples × features`) to `samples × k`.
    pub fn transform(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.mean.len() {
            return Err(Error::shape("reducer input features", self.mean.len(), data.cols()));
        }
        Ok(center(data, &self.mean).matmul_t(&self.components))
    }
}

fn center(data: &Matrix, mean: &[f64]) -> Matrix {
    let mut out = data.clone();
    for i in 0..out.rows() {
        for (x, m) in out.row_mut(i).iter_mut().zip(mean) {
            *x -= m;
        }
    }
    out
}

/// Principal axes of centered `x` with their variances, largest first.
fn principal_axes(x: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, f) = x.shape();
    let denom = (n - 1) as f64;
    let mut axes = Vec::new();
    let mut variances = Vec::new();
    if f <= n {
        let eig = sym_eig(&x.t_matmul(x).scale(1.0 / denom))?;
        for (j, &lam) in eig.values.iter().enumerate() {
            axes.push(eig.vector(j));
            variances.push(lam.max(0.0));
        }
    } else {
        // Gram form: axes are Xᵀ u / √(λ (n − 1)).
        let eig = sym_eig(&x.matmul_t(x))?;
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        for (j, &lam) in eig.values.iter().enumerate() {
            if lam <= top * 1e-12 || lam <= 0.0 {
                break;
            }
            let mut v = x.t_matvec(&eig.vector(j));
            let s = lam.sqrt();
            v.iter_mut().for_each(|a| *a /= s);
            normalize_sign(&mut v);
            axes.push(v);
            variances.push(lam / denom);
        }
    }
    Ok((axes, variances))
}

/// PCA on `samples × features` data.
pub fn pca_fit(data: &Matrix, keep: PcaComponents) -> Result<LinearReducer> {
    let (n, f) = data.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 samples, got {n}")));
    }
    if let PcaComponents::Variance(t) = keep {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidInput(format!("variance threshold must lie in (0, 1], got {t}")));
        }
    }
    let mean = data.column_means();
    let x = center(data, &mean);
    let (axes, variances) = principal_axes(&x)?;
    let total: f64 = variances.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("PCA input has zero variance".into()));
    }
    let ratios: Vec<f64> = variances.iter().map(|v| v / total).collect();
    let k = match keep {
        PcaComponents::Count(k) => {
            if k == 0 || k > axes.len() {
                return Err(Error::InvalidInput(format!(
                    "requested {k} principal components but the data has rank {}",
                    axes.len()
                )));
            }
            k
        }
        PcaComponents::Variance(t) => {
            let mut acc = 0.0;
            let mut k = ratios.len();
            for (i, r) in ratios.iter().enumerate() {
                acc += r;
                if acc >= t - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };
    let components = Matrix::from_fn(k, f, |i, j| axes[i][j]);
    Ok(LinearReducer {
        kind: ReducerKind::Pca,
        mean,
        components,
        explained_variance_ratio: ratios[..k].to_vec(),
        not_converged: false,
        gaussian_like: false,
        iterations: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub components: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            components: 20,
            tolerance: 1e-6,
            max_iterations: 500,
            seed: 0,
        }
    }
}

/// `W ← (W Wᵀ)^{-1/2} W`.
fn symmetric_decorrelation(w: &Matrix) -> Result<Matrix> {
    Ok(sym_inv_sqrt(&w.matmul_t(w))?.matmul(w))
}

fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// FastICA with PCA whitening, tanh contrast and symmetric decorrelation.
pub fn ica_fit(data: &Matrix, cfg: &IcaConfig) -> Result<LinearReducer> {
    let (n, f) = data.shape();
    let k = cfg.components;
    if k == 0 || n <= k {
        return Err(Error::InvalidInput(format!(
            "ICA needs more samples than components ({n} samples, {k} components)"
        )));
    }
    let mean = data.column_means();
    let x = center(data, &mean);
    let (axes, variances) = principal_axes(&x)?;
    let rank = variances.iter().take_while(|&&v| v > variances[0] * 1e-12).count();
    if rank < k {
        return Err(Error::InvalidInput(format!(
            "ICA asked for {k} components but the data has rank {rank}"
        )));
    }
    // Whitening rows: axis_i / √var_i.
    let whitening = Matrix::from_fn(k, f, |i, j| axes[i][j] / variances[i].sqrt());
    let z = whitening.matmul(&x.transpose()); // k × n

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Matrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let inv_n = 1.0 / n as f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut best = (f64::INFINITY, w.clone());
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let y = w.matmul(&z); // k × n
        let mut next = Matrix::zeros(k, k);
        for i in 0..k {
            let yi = y.row(i);
            let g: Vec<f64> = yi.iter().map(|v| v.tanh()).collect();
            let g_prime_mean = g.iter().map(|t| 1.0 - t * t).sum::<f64>() * inv_n;
            let row = next.row_mut(i);
            for (d, r) in row.iter_mut().enumerate() {
                let zd = z.row(d);
                *r = zd.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() * inv_n - g_prime_mean * w[(i, d)];
            }
        }
        let next = symmetric_decorrelation(&next)?;
        let overlap = next.matmul_t(&w);
        let change = (0..k)
            .map(|i| (overlap[(i, i)].abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < best.0 {
            best = (change, w.clone());
        }
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "FastICA did not reach tolerance {} in {} iterations; returning the best iterate",
            cfg.tolerance,
            cfg.max_iterations
        );
        w = best.1;
    }
    let sources = w.matmul(&z);
    let threshold = 3.0 * (24.0 / n as f64).sqrt();
    let gaussian_like = (0..k).all(|i| excess_kurtosis(sources.row(i)).abs() < threshold);
    if gaussian_like {
        log::warn!("ICA sources are indistinguishable from Gaussian; the unmixing is not identifiable");
    }
    Ok(LinearReducer {
        kind: ReducerKind::Ica,
        mean,
        components: w.matmul(&whitening),
        explained_variance_ratio: Vec::new(),
        not_converged: !converged,
        gaussian_like,
        iterations,
    })
}

/// Amari index of `P = W A`: 0 for a scaled permutation, at most 1.
pub fn amari_index(p: &Matrix) -> Result<f64> {
    let n = p.rows();
    if !p.is_square() || n < 2 {
        return Err(Error::InvalidInput("Amari index needs a square matrix of size at least 2".into()));
    }
    let a = p.map(f64::abs);
    let mut total = 0.0;
    for i in 0..n {
        let row = a.row(i);
        let max = row.iter().copied().fold(0.0, f64::max);
        total += row.iter().sum::<f64>() / max - 1.0;
    }
    for j in 0..n {
        let col = a.column(j);
        let max = col.iter().copied().fold(0.0, f64::max);
        total += col.iter().sum::<f64>() / max - 1.0;
    }
    Ok(total / (2.0 * n as f64 * (n as f64 - 1.0)))
}

pub const CCA_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CcaModel {
    pub means: [Vec<f64>; 2],
    /// Per-view `d × pairs` projections.
    pub projections: [Matrix; 2],
    /// Descending, in `[0, 1]`.
    pub correlations: Vec<f64>,
}

impl CcaModel {
    pub fn pairs(&self) -> usize {
        self.correlations.len()
    }

    /// Canonical variates of `view` (0 or 1) for rows of `data`.
    pub fn transform(&self, view: usize, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.means[view].len() {
            return Err(Error::shape("CCA view features", self.means[view].len(), data.cols()));
        }
        Ok(center(data, &self.means[view]).matmul(&self.projections[view]))
    }

    /// Mean of the two views' canonical variates.
    pub fn transform_fused(&self, view1: &Matrix, view2: &Matrix) -> Result<Matrix> {
        let a = self.transform(0, view1)?;
        let b = self.transform(1, view2)?;
        Ok(a.add(&b).scale(0.5))
    }
}

/// Classical CCA on row-sample views `n × d1` and `n × d2`.
pub fn classical_cca(view1: &Matrix, view2: &Matrix, pairs: usize) -> Result<CcaModel> {
    let n = view1.rows();
    if view2.rows() != n {
        return Err(Error::shape("classical_cca samples", n, view2.rows()));
    }
    let (d1, d2) = (view1.cols(), view2.cols());
    if n <= d1.max(d2) {
        return Err(Error::InvalidInput(format!(
            "CCA needs more samples than features ({n} samples, dims {d1} and {d2})"
        )));
    }
    if pairs == 0 || pairs > d1.min(d2) {
        return Err(Error::InvalidInput(format!(
            "CCA pairs must lie in 1..={}, got {pairs}",
            d1.min(d2)
        )));
    }
    let means = [view1.column_means(), view2.column_means()];
    let x1 = center(view1, &means[0]);
    let x2 = center(view2, &means[1]);
    let denom = (n - 1) as f64;
    let cov = |a: &Matrix, b: &Matrix| a.t_matmul(b).scale(1.0 / denom);
    let mut c11 = cov(&x1, &x1);
    let mut c22 = cov(&x2, &x2);
    for i in 0..d1 {
        c11[(i, i)] += CCA_RIDGE;
    }
    for i in 0..d2 {
        c22[(i, i)] += CCA_RIDGE;
    }
    let c12 = cov(&x1, &x2);
    let w1 = sym_inv_sqrt(&c11)
        .map_err(|e| Error::Numerical(format!("view 1 covariance is rank deficient beyond the ridge: {e}")))?;
    let w2 = sym_inv_sqrt(&c22)
        .map_err(|e| Error::Numerical(format!("view 2 covariance is rank deficient beyond the ridge: {e}")))?;
    let t = w1.matmul(&c12).matmul(&w2); // d1 × d2
    let eig_a = sym_eig(&t.matmul_t(&t))?;
    let eig_b = sym_eig(&t.t_matmul(&t))?;
    let top = eig_a.values[0].max(0.0).sqrt();

    let mut a_vecs = Vec::with_capacity(pairs);
    let mut b_vecs: Vec<Vec<f64>> = Vec::with_capacity(pairs);
    let mut correlations = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let a = eig_a.vector(k);
        let rho = eig_a.values[k].max(0.0).sqrt();
        let b = if rho > 1e-10 * top.max(1e-300) && rho > 0.0 {
            let mut b = t.t_matvec(&a);
            b.iter_mut().for_each(|x| *x /= rho);
            b
        } else {
            // Null directions: take the matching eigenvector of TᵀT and
            // orthogonalize against the pairs already chosen.
            let mut b = eig_b.vector(k);
            for prev in &b_vecs {
                let d: f64 = b.iter().zip(prev).map(|(x, y)| x * y).sum();
                b.iter_mut().zip(prev).for_each(|(x, y)| *x -= d * y);
            }
            let nb = crate::numerics::norm(&b);
            b.iter_mut().for_each(|x| *x /= nb);
            b
        };
        correlations.push(rho.min(1.0));
        a_vecs.push(a);
        b_vecs.push(b);
    }
    let a_mat = Matrix::from_columns(&a_vecs)?;
    let b_mat = Matrix::from_columns(&b_vecs)?;
    Ok(CcaModel {
        means,
        projections: [w1.matmul(&a_mat), w2.matmul(&b_mat)],
        correlations,
    })
}

/// Strict upper triangle of a square matrix, row-major.
pub fn upper_triangle(m: &Matrix) -> Vec<f64> {
    let v = m.rows();
    let mut out = Vec::with_capacity(v * (v.saturating_sub(1)) / 2);
    for p in 0..v {
        out.extend_from_slice(&m.row(p)[p + 1..]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    PcaCca,
    IcaCca,
    FmriOnlyIca,
    CognitionOnly,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::PcaCca,
        BaselineKind::IcaCca,
        BaselineKind::FmriOnlyIca,
        BaselineKind::CognitionOnly,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::PcaCca => "pca-cca",
            BaselineKind::IcaCca => "ica-cca",
            BaselineKind::FmriOnlyIca => "fmri-only-ica",
            BaselineKind::CognitionOnly => "cognition-only",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca-cca" => Ok(BaselineKind::PcaCca),
            "ica-cca" => Ok(BaselineKind::IcaCca),
            "fmri-only-ica" | "fmri-ica" => Ok(BaselineKind::FmriOnlyIca),
            "cognition-only" | "cognition" => Ok(BaselineKind::CognitionOnly),
            other => Err(Error::InvalidInput(format!(
                "unknown baseline {other:?} (expected pca-cca, ica-cca, fmri-only-ica or cognition-only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub variance_threshold: f64,
    pub ica: IcaConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            variance_threshold: 0.95,
            ica: IcaConfig::default(),
        }
    }
}

/// Representations of one fold's training and test visits.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineFold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Rows align with `train` / `test`.
    pub train_repr: Matrix,
    pub test_repr: Matrix,
    /// Per-fold notes such as ICA convergence flags.
    pub notes: Vec<String>,
}

fn connectivity_rows(visits: &[VisitRecord], idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| upper_triangle(&visits[i].connectivity)).collect();
    Matrix::from_rows(&rows)
}

fn cognition_rows(visits: &[VisitRecord], idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| visits[i].cognition.clone()).collect();
    Matrix::from_rows(&rows)
}

/// Z-scores `rows` (`n × d`) with statistics fit on `fit_rows`.
fn zscore_rows(fit_rows: &Matrix, rows: &Matrix) -> Result<Matrix> {
    let stats = ViewStats::fit(&fit_rows.transpose(), ViewKind::Cognition)?;
    Ok(stats.apply(&rows.transpose())?.transpose())
}

fn reduce_then_cca(
    reducer: &LinearReducer,
    fmri_train: &Matrix,
    fmri_test: &Matrix,
    cog_train: &Matrix,
    cog_test: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let r_train = reducer.transform(fmri_train)?;
    let r_test = reducer.transform(fmri_test)?;
    let pairs = r_train.cols().min(cog_train.cols());
    let cca = classical_cca(&r_train, cog_train, pairs)?;
    Ok((
        cca.transform_fused(&r_train, cog_train)?,
        cca.transform_fused(&r_test, cog_test)?,
    ))
}

/// Fits `kind` on each training fold and represents train and test visits.
pub fn baseline_pipeline(
    kind: BaselineKind,
    visits: &[VisitRecord],
    folds: &[Vec<usize>],
    cfg: &BaselineConfig,
) -> Result<Vec<BaselineFold>> {
    let mut out = Vec::with_capacity(folds.len());
    for (f, test) in folds.iter().enumerate() {
        let mut train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train.sort_unstable();
        let cog_train = cognition_rows(visits, &train)?;
        let cog_test = cognition_rows(visits, test)?;
        let cog_test_z = zscore_rows(&cog_train, &cog_test)?;
        let cog_train_z = zscore_rows(&cog_train, &cog_train)?;
        let mut notes = Vec::new();
        let (train_repr, test_repr) = match kind {
            BaselineKind::CognitionOnly => (cog_train_z, cog_test_z),
            _ => {
                let fmri_train = connectivity_rows(visits, &train)?;
                let fmri_test = connectivity_rows(visits, test)?;
                match kind {
                    BaselineKind::PcaCca => {
                        let pca = pca_fit(&fmri_train, PcaComponents::Variance(cfg.variance_threshold))?;
                        notes.push(format!("fold {f}: {} principal components", pca.output_dim()));
                        reduce_then_cca(&pca, &fmri_train, &fmri_test, &cog_train_z, &cog_test_z)?
                    }
                    _ => {
                        let ica = ica_fit(&fmri_train, &cfg.ica)?;
                        if ica.not_converged {
                            notes.push(format!("fold {f}: FastICA stopped at the iteration limit"));
                        }
                        if ica.gaussian_like {
                            notes.push(format!("fold {f}: ICA sources look Gaussian"));
                        }
                        if kind == BaselineKind::IcaCca {
                            reduce_then_cca(&ica, &fmri_train, &fmri_test, &cog_train_z, &cog_test_z)?
                        } else {
                            (ica.transform(&fmri_train)?, ica.transform(&fmri_test)?)
                        }
                    }
                }
            }
        };
        out.push(BaselineFold {
            train,
            test: test.clone(),
            train_repr,
            test_repr,
            notes,
        });
    }
    Ok(out)
}

//! Two-view generalized CCA over graph embeddings and cognitive scores.
//!
//! For each view `X` (`d × N`, columns are visits) the ridge-regularized
//! projector `P = Xᵀ (X Xᵀ + εI)⁻¹ X` is formed; the shared representation
//! `R` holds the top eigenvectors of `M = P_brain + P_cog` as rows, and the
//! loadings are `U = (X Xᵀ + εI)⁻¹ X Rᵀ`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pearson, sym_eig, sym_inverse, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Brain,
    Cognition,
}

/// Preprocessed features of one view, `d × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMatrix {
    pub features: Matrix,
    pub kind: ViewKind,
}

impl ViewMatrix {
    pub fn new(features: Matrix, kind: ViewKind) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{kind:?} view contains non-finite values"
            )));
        }
        Ok(ViewMatrix { features, kind })
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn samples(&self) -> usize {
        self.features.cols()
    }
}

/// Per-row standardization statistics of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, or 1 for constant rows.
    pub scale: Vec<f64>,
    /// Rows that were constant when fitted.
    pub constant: Vec<bool>,
}

impl ViewStats {
    /// Fits row means and scales on `raw` (`d × N`).
    pub fn fit(raw: &Matrix, kind: ViewKind) -> Result<Self> {
        if raw.cols() == 0 {
            return Err(Error::InvalidInput(format!("{kind:?} view has no samples")));
        }
        let n = raw.cols() as f64;
        let mut mean = Vec::with_capacity(raw.rows());
        let mut scale = Vec::with_capacity(raw.rows());
        let mut constant = Vec::with_capacity(raw.rows());
        for i in 0..raw.rows() {
            let row = raw.row(i);
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 * m.abs().max(1.0) {
                scale.push(sd);
                constant.push(false);
            } else {
                match kind {
                    ViewKind::Cognition => log::warn!("cognitive score {i} is constant over the fitting samples; centering only"),
                    ViewKind::Brain => log::debug!("embedding coordinate {i} is constant over the batch"),
                }
                scale.push(1.0);
                constant.push(true);
            }
            mean.push(m);
        }
        Ok(ViewStats {
            mean,
            scale,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.rows() != self.dim() {
            return Err(Error::shape("view standardization", self.dim(), raw.rows()));
        }
        Ok(Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
            (raw[(i, j)] - self.mean[i]) / self.scale[i]
        }))
    }

    pub fn apply_vector(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.dim() {
            return Err(Error::shape("view standardization", self.dim(), raw.len()));
        }
        Ok(raw
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    /// Vector-Jacobian product of `fit`-then-`apply` on the same batch:
    /// given `∂L/∂Y` and the standardized `Y`, returns `∂L/∂X` including the
    /// dependence of the batch mean and scale on `X`.
    pub fn backprop_batch(&self, grad: &Matrix, standardized: &Matrix) -> Matrix {
        let n = grad.cols() as f64;
        let mut out = Matrix::zeros(grad.rows(), grad.cols());
        for i in 0..grad.rows() {
            let g = grad.row(i);
            let y = standardized.row(i);
            let g_mean = g.iter().sum::<f64>() / n;
            let row = out.row_mut(i);
            if self.constant[i] {
                // Constant row: only the centering depends on X.
                for (o, gi) in row.iter_mut().zip(g) {
                    *o = gi - g_mean;
                }
                continue;
            }
            let gy_mean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((o, gi), yi) in row.iter_mut().zip(g).zip(y) {
                *o = (gi - g_mean - yi * gy_mean) / self.scale[i];
            }
        }
        out
    }
}

/// Standardization statistics for both views, fit on a training fold.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessStats {
    pub brain: ViewStats,
    pub cognition: ViewStats,
}

impl PreprocessStats {
    pub fn fit(raw_brain: &Matrix, raw_cognition: &Matrix) -> Result<Self> {
        if raw_brain.cols() != raw_cognition.cols() {
            return Err(Error::shape(
                "preprocess_views visit count",
                raw_brain.cols(),
                raw_cognition.cols(),
            ));
        }
        Ok(PreprocessStats {
            brain: ViewStats::fit(raw_brain, ViewKind::Brain)?,
            cognition: ViewStats::fit(raw_cognition, ViewKind::Cognition)?,
        })
    }
}

/// Z-scores both views with statistics from the training fold.
pub fn preprocess_views(
    raw_brain: &Matrix,
    raw_cognition: &Matrix,
    stats: &PreprocessStats,
) -> Result<(ViewMatrix, ViewMatrix)> {
    if raw_brain.cols() != raw_cognition.cols() {
        return Err(Error::shape(
            "preprocess_views visit count",
            raw_brain.cols(),
            raw_cognition.cols(),
        ));
    }
    Ok((
        ViewMatrix::new(stats.brain.apply(raw_brain)?, ViewKind::Brain)?,
        ViewMatrix::new(stats.cognition.apply(raw_cognition)?, ViewKind::Cognition)?,
    ))
}

/// How the covariance ridge `ε` is chosen for each view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum RidgePolicy {
    /// `ε = factor · trace(X Xᵀ) / d`.
    Scaled(f64),
    Fixed(f64),
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy::Scaled(1e-4)
    }
}

impl RidgePolicy {
    pub fn epsilon(&self, gram: &Matrix) -> f64 {
        match *self {
            RidgePolicy::Scaled(f) => f * gram.trace() / gram.rows().max(1) as f64,
            RidgePolicy::Fixed(e) => e,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GccaSolution {
    /// Shared representation, `d_R × N`, with orthonormal rows.
    pub shared: Matrix,
    /// `d_brain × d_R`.
    pub brain_loadings: Matrix,
    /// `d_cog × d_R`.
    pub cognition_loadings: Matrix,
    /// All eigenvalues of `M`, descending.
    pub eigenvalues: Vec<f64>,
    /// Ridge used for the brain and cognition covariances.
    pub ridge: [f64; 2],
}

impl GccaSolution {
    pub fn components(&self) -> usize {
        self.shared.rows()
    }

    pub fn samples(&self) -> usize {
        self.shared.cols()
    }

    pub fn loadings(&self, kind: ViewKind) -> &Matrix {
        match kind {
            ViewKind::Brain => &self.brain_loadings,
            ViewKind::Cognition => &self.cognition_loadings,
        }
    }

    /// `‖R Rᵀ − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        self.shared
            .matmul_t(&self.shared)
            .sub(&Matrix::identity(self.components()))
            .max_abs()
    }
}

struct ViewProjector {
    cov_inv: Matrix,
    projector: Matrix,
    ridge: f64,
}

fn view_projector(x: &Matrix, ridge: RidgePolicy) -> Result<ViewProjector> {
    let mut cov = x.matmul_t(x);
    let eps = ridge.epsilon(&cov);
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be nonnegative, got {eps}")));
    }
    for i in 0..cov.rows() {
        cov[(i, i)] += eps;
    }
    let cov_inv = sym_inverse(&cov)?;
    let w = cov_inv.matmul(x);
    let mut projector = x.t_matmul(&w);
    let n = projector.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (projector[(i, j)] + projector[(j, i)]);
            projector[(i, j)] = s;
            projector[(j, i)] = s;
        }
    }
    Ok(ViewProjector {
        cov_inv,
        projector,
        ridge: eps,
    })
}

/// Solves the two-view GCCA eigenproblem for `d_r` shared components.
pub fn solve_gcca(
    brain: &ViewMatrix,
    cognition: &ViewMatrix,
    d_r: usize,
    ridge: RidgePolicy,
) -> Result<GccaSolution> {
    let n = brain.samples();
    if cognition.samples() != n {
        return Err(Error::shape("solve_gcca visit count", n, cognition.samples()));
    }
    if d_r == 0 || n <= d_r {
        return Err(Error::InvalidInput(format!(
            "solve_gcca needs more visits than shared components ({n} visits, d_R = {d_r}); \
             use a smaller d_R"
        )));
    }
    let pb = view_projector(&brain.features, ridge)?;
    let pc = view_projector(&cognition.features, ridge)?;
    let m = pb.projector.add(&pc.projector);
    let eig = sym_eig(&m)?;

    let shared = Matrix::from_fn(d_r, n, |k, j| eig.vectors[(j, k)]);
    let brain_loadings = pb.cov_inv.matmul(&brain.features.matmul_t(&shared));
    let cognition_loadings = pc.cov_inv.matmul(&cognition.features.matmul_t(&shared));
    Ok(GccaSolution {
        shared,
        brain_loadings,
        cognition_loadings,
        eigenvalues: eig.values,
        ridge: [pb.ridge, pc.ridge],
    })
}

fn check_view(sol: &GccaSolution, view: &ViewMatrix) -> Result<()> {
    let u = sol.loadings(view.kind);
    if u.rows() != view.dim() || view.samples() != sol.samples() {
        return Err(Error::shape(
            "GCCA view",
            format!("{}x{}", u.rows(), sol.samples()),
            format!("{}x{}", view.dim(), view.samples()),
        ));
    }
    Ok(())
}

/// `‖R − U_brainᵀ X_brain‖²_F + ‖R − U_cogᵀ X_cog‖²_F`.
pub fn corr_loss(sol: &GccaSolution, brain: &ViewMatrix, cognition: &ViewMatrix) -> Result<f64> {
    check_view(sol, brain)?;
    check_view(sol, cognition)?;
    let rb = sol.shared.sub(&sol.brain_loadings.t_matmul(&brain.features));
    let rc = sol.shared.sub(&sol.cognition_loadings.t_matmul(&cognition.features));
    Ok(rb.frobenius_norm().powi(2) + rc.frobenius_norm().powi(2))
}

/// `∂L_corr/∂X_brain = 2 U Uᵀ X − 2 U R` with `R` and `U` held fixed.
pub fn corr_grad_brain(sol: &GccaSolution, brain: &ViewMatrix) -> Result<Matrix> {
    check_view(sol, brain)?;
    let u = &sol.brain_loadings;
    let residual = u.t_matmul(&brain.features).sub(&sol.shared);
    Ok(u.matmul(&residual).scale(2.0))
}

/// Pearson correlation between the brain and cognition projections of each
/// shared component.
pub fn canonical_correlations(
    sol: &GccaSolution,
    brain: &ViewMatrix,
    cognition: &ViewMatrix,
) -> Result<Vec<f64>> {
    check_view(sol, brain)?;
    check_view(sol, cognition)?;
    let pb = sol.brain_loadings.t_matmul(&brain.features);
    let pc = sol.cognition_loadings.t_matmul(&cognition.features);
    (0..sol.components())
        .map(|k| pearson(pb.row(k), pc.row(k)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TrainShared,
    TestBrain,
    TestCognition,
    TestFused,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::TrainShared => "train-shared",
            Provenance::TestBrain => "test-brain",
            Provenance::TestCognition => "test-cognition",
            Provenance::TestFused => "test-fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// Set when a fused projection fell back to the single available view.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Brain,
    Cognition,
    #[default]
    Fused,
}

/// Projects preprocessed view vectors into the shared space.
pub fn project_fingerprint(
    sol: &GccaSolution,
    brain: Option<&[f64]>,
    cognition: Option<&[f64]>,
    mode: ProjectionMode,
) -> Result<Fingerprint> {
    let project = |u: &Matrix, x: &[f64]| -> Result<Vec<f64>> {
        if x.len() != u.rows() {
            return Err(Error::shape("project_fingerprint input", u.rows(), x.len()));
        }
        Ok(u.t_matvec(x))
    };
    let brain_fp = |x| {
        Ok(Fingerprint {
            values: project(&sol.brain_loadings, x)?,
            provenance: Provenance::TestBrain,
            fallback: false,
        })
    };
    let cog_fp = |x| {
        Ok(Fingerprint {
            values: project(&sol.cognition_loadings, x)?,
            provenance: Provenance::TestCognition,
            fallback: false,
        })
    };
    let missing = |what: &str| Error::InvalidInput(format!("projection mode {what} needs the {what} view"));
    match mode {
        ProjectionMode::Brain => brain_fp(brain.ok_or_else(|| missing("brain"))?),
        ProjectionMode::Cognition => cog_fp(cognition.ok_or_else(|| missing("cognition"))?),
        ProjectionMode::Fused => match (brain, cognition) {
            (Some(b), Some(c)) => {
                let pb = project(&sol.brain_loadings, b)?;
                let pc = project(&sol.cognition_loadings, c)?;
                Ok(Fingerprint {
                    values: pb.iter().zip(&pc).map(|(x, y)| 0.5 * (x + y)).collect(),
                    provenance: Provenance::TestFused,
                    fallback: false,
                })
            }
            (Some(b), None) => brain_fp(b).map(|f| Fingerprint { fallback: true, ..f }),
            (None, Some(c)) => cog_fp(c).map(|f| Fingerprint { fallback: true, ..f }),
            (None, None) => Err(Error::InvalidInput(
                "fused projection needs at least one view".into(),
            )),
        },
    }
}

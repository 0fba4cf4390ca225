//! Subject-level folds, the alternating GCCA / Adam training loop, and
//! fingerprint generation.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{individualized_loss, multimodal_loss, total_loss, BatchIndex, ContrastiveConfig};
use crate::data::VisitRecord;
use crate::error::{Error, Result};
use crate::gcca::{
    corr_grad_brain, corr_loss, project_fingerprint, GccaSolution, solve_gcca, Fingerprint, PreprocessStats, ProjectionMode,
    Provenance, RidgePolicy, ViewKind, ViewMatrix, ViewStats,
};
use crate::graph::{backward, forward, EncoderParams, EncoderTape};
use crate::numerics::{AdamState, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    /// Embedding size `r`.
    pub embedding_dim: usize,
    /// Shared components `d_R`.
    pub shared_dim: usize,
    pub temperature: f64,
    pub lambda_ind: f64,
    pub lambda_mul: f64,
    pub include_positive: bool,
    pub ridge: RidgePolicy,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            learning_rate: 1e-3,
            hidden_dim: 32,
            embedding_dim: 16,
            shared_dim: 16,
            temperature: 0.9,
            lambda_ind: 1.5,
            lambda_mul: 0.5,
            include_positive: false,
            ridge: RidgePolicy::default(),
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.epochs == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 || self.shared_dim == 0 {
            return bad("epochs, hidden_dim, embedding_dim and shared_dim must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        match self.ridge {
            RidgePolicy::Scaled(v) | RidgePolicy::Fixed(v) if !(v >= 0.0 && v.is_finite()) => {
                return bad(format!("ridge must be nonnegative, got {v}"));
            }
            _ => {}
        }
        self.contrastive().validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            lambda_ind: self.lambda_ind,
            lambda_mul: self.lambda_mul,
            include_positive: self.include_positive,
        }
    }

    /// "GraCa" for the correlation-only ablation, "CoGraCa" otherwise.
    pub fn model_name(&self) -> &'static str {
        if self.lambda_ind == 0.0 && self.lambda_mul == 0.0 {
            "GraCa"
        } else {
            "CoGraCa"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub corr: f64,
    pub ind: f64,
    pub mul: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub solution: GccaSolution,
    pub stats: PreprocessStats,
    pub config: TrainConfig,
    pub trace: Vec<LossRecord>,
    /// `(subject, visit)` of each training column of `R`, in order.
    pub training_keys: Vec<(String, u32)>,
}

impl TrainedModel {
    pub fn training_column(&self, subject: &str, visit: u32) -> Option<usize> {
        self.training_keys.iter().position(|(s, v)| s == subject && *v == visit)
    }
}

/// Assigns whole subjects to `k` folds, returning sorted visit indices.
pub fn make_subject_folds<S: AsRef<str>>(subject_ids: &[S], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut visits: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in subject_ids.iter().enumerate() {
        let s = s.as_ref();
        visits
            .entry(s)
            .or_insert_with(|| {
                order.push(s);
                Vec::new()
            })
            .push(i);
    }
    if k < 2 || k > order.len() {
        return Err(Error::InvalidInput(format!(
            "cannot split {} subjects into {k} folds",
            order.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, s) in order.iter().enumerate() {
        folds[i % k].extend_from_slice(&visits[s]);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn cognition_matrix(visits: &[&VisitRecord]) -> Result<Matrix> {
    let d = visits.first().map_or(0, |v| v.cognition.len());
    let mut m = Matrix::zeros(d, visits.len());
    for (j, v) in visits.iter().enumerate() {
        if v.cognition.len() != d {
            return Err(Error::shape(
                format!("cognitive scores of {} visit {}", v.subject_id, v.visit),
                d,
                v.cognition.len(),
            ));
        }
        for (i, &x) in v.cognition.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

struct EpochState {
    tapes: Vec<EncoderTape>,
    raw_brain: Matrix,
}

fn encode_all(params: &EncoderParams, visits: &[&VisitRecord]) -> Result<EpochState> {
    let r = params.output_dim();
    let mut raw_brain = Matrix::zeros(r, visits.len());
    let mut tapes = Vec::with_capacity(visits.len());
    for (j, v) in visits.iter().enumerate() {
        let tape = forward(params, &v.graph)?;
        raw_brain.set_column(j, tape.pooled());
        tapes.push(tape);
    }
    Ok(EpochState { tapes, raw_brain })
}

/// Visits whose embedding norm is below this fraction of the batch mean are
/// treated as dead and left out of the contrastive terms for that epoch.
pub const DEAD_EMBEDDING_RTOL: f64 = 1e-8;

fn live_rows(embeddings: &Matrix) -> Vec<usize> {
    let norms: Vec<f64> = (0..embeddings.rows())
        .map(|i| embeddings.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    (0..norms.len())
        .filter(|&i| norms[i].is_finite() && norms[i] > DEAD_EMBEDDING_RTOL * mean && norms[i] > 0.0)
        .collect()
}

struct ContrastiveTerms {
    ind: f64,
    mul: f64,
    /// Weighted gradient `λ1 ∂L_ind + λ2 ∂L_mul`, one row per visit.
    grad: Matrix,
}

#[allow(clippy::too_many_arguments)]
fn contrastive_terms(
    embeddings: &Matrix,
    cog_rows: &Matrix,
    subjects: &[&str],
    labels: &[u32],
    index: &BatchIndex,
    live: &[usize],
    ccfg: &ContrastiveConfig,
    mul_active: bool,
) -> Result<ContrastiveTerms> {
    let n = embeddings.rows();
    let mut grad = Matrix::zeros(n, embeddings.cols());
    let subset;
    let (emb, cog, idx) = if live.len() == n {
        (embeddings.clone(), cog_rows.clone(), index)
    } else {
        let s: Vec<&str> = live.iter().map(|&i| subjects[i]).collect();
        let l: Vec<u32> = live.iter().map(|&i| labels[i]).collect();
        subset = BatchIndex::new(&s, &l)?;
        (embeddings.select_rows(live), cog_rows.select_rows(live), &subset)
    };
    if live.len() < 2 {
        return Ok(ContrastiveTerms { ind: 0.0, mul: 0.0, grad });
    }
    let ind = individualized_loss(&emb, idx, ccfg)?;
    let mul = if mul_active {
        Some(multimodal_loss(&emb, &cog, idx, ccfg)?)
    } else {
        None
    };
    for (a, &i) in live.iter().enumerate() {
        for k in 0..grad.cols() {
            let mut g = ccfg.lambda_ind * ind.grad[(a, k)];
            if let Some(m) = &mul {
                g += ccfg.lambda_mul * m.grad[(a, k)];
            }
            grad[(i, k)] = g;
        }
    }
    Ok(ContrastiveTerms {
        ind: ind.loss,
        mul: mul.map_or(0.0, |m| m.loss),
        grad,
    })
}

/// Trains the encoder on `visits` with full-batch updates.
pub fn train_model(visits: &[VisitRecord], cfg: &TrainConfig) -> Result<TrainedModel> {
    let refs: Vec<&VisitRecord> = visits.iter().collect();
    train_on(&refs, cfg)
}

fn train_on(visits: &[&VisitRecord], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let n = visits.len();
    if n <= cfg.shared_dim {
        return Err(Error::InvalidInput(format!(
            "training needs more than d_R = {} visits, got {n}",
            cfg.shared_dim
        )));
    }
    let node_count = visits[0].graph.node_count();
    if let Some(v) = visits.iter().find(|v| v.graph.node_count() != node_count) {
        return Err(Error::shape(
            format!("node count of {} visit {}", v.subject_id, v.visit),
            node_count,
            v.graph.node_count(),
        ));
    }
    let subjects: Vec<&str> = visits.iter().map(|v| v.subject_id.as_str()).collect();
    let labels: Vec<u32> = visits.iter().map(|v| v.visit).collect();
    let index = BatchIndex::new(&subjects, &labels)?;
    let ccfg = cfg.contrastive();

    let raw_cog = cognition_matrix(visits)?;
    let cog_stats = ViewStats::fit(&raw_cog, ViewKind::Cognition)?;
    let cognition = ViewMatrix::new(cog_stats.apply(&raw_cog)?, ViewKind::Cognition)?;
    let cog_rows = cognition.features.transpose();
    let mul_active = cognition.dim() == cfg.embedding_dim;
    if cfg.lambda_mul > 0.0 && !mul_active {
        return Err(Error::InvalidInput(format!(
            "the multimodal loss needs embedding_dim = number of cognitive scores ({} vs {})",
            cfg.embedding_dim,
            cognition.dim()
        )));
    }

    let mut params = EncoderParams::glorot(&[node_count, cfg.hidden_dim, cfg.embedding_dim], cfg.seed);
    let mut optimizers: Vec<AdamState> = params
        .tensors()
        .into_iter()
        .map(|t| AdamState::for_params(t, cfg.learning_rate))
        .collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut dead_reported = n;

    for epoch in 0..cfg.epochs {
        let state = encode_all(&params, visits)?;
        let brain_stats = ViewStats::fit(&state.raw_brain, ViewKind::Brain)?;
        let brain = ViewMatrix::new(brain_stats.apply(&state.raw_brain)?, ViewKind::Brain)?;
        let sol = solve_gcca(&brain, &cognition, cfg.shared_dim, cfg.ridge)?;
        let corr = corr_loss(&sol, &brain, &cognition)?;
        let grad_brain = brain_stats.backprop_batch(&corr_grad_brain(&sol, &brain)?, &brain.features);

        let embeddings = state.raw_brain.transpose();
        let at_epoch = |e: Error| Error::Numerical(format!("epoch {epoch}: {e}"));
        let live = live_rows(&embeddings);
        if live.len() != dead_reported {
            if live.len() < n {
                log::warn!("epoch {epoch}: {} of {n} visits have a zero embedding", n - live.len());
            }
            dead_reported = live.len();
        }
        let terms = contrastive_terms(&embeddings, &cog_rows, &subjects, &labels, &index, &live, &ccfg, mul_active)
            .map_err(at_epoch)?;
        let total = total_loss(corr, terms.ind, terms.mul, &ccfg);
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch}: L_corr = {corr}, L_ind = {}, L_mul = {}",
                terms.ind, terms.mul
            )));
        }
        trace.push(LossRecord {
            epoch,
            corr,
            ind: terms.ind,
            mul: terms.mul,
            total,
        });

        let mut grads = params.zeros_like();
        let mut upstream = vec![0.0; cfg.embedding_dim];
        for (j, (v, tape)) in visits.iter().zip(&state.tapes).enumerate() {
            for (k, u) in upstream.iter_mut().enumerate() {
                *u = grad_brain[(k, j)] + terms.grad[(j, k)];
            }
            if upstream.iter().all(|&u| u == 0.0) {
                continue;
            }
            grads.add_assign(&backward(&params, &v.graph, tape, &upstream)?);
        }
        for ((p, g), opt) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(optimizers.iter_mut())
        {
            opt.step(p, g)?;
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("encoder parameters became non-finite at epoch {epoch}")));
        }
    }

    let state = encode_all(&params, visits)?;
    let brain_stats = ViewStats::fit(&state.raw_brain, ViewKind::Brain)?;
    let brain = ViewMatrix::new(brain_stats.apply(&state.raw_brain)?, ViewKind::Brain)?;
    let solution = solve_gcca(&brain, &cognition, cfg.shared_dim, cfg.ridge)?;
    Ok(TrainedModel {
        params,
        solution,
        stats: PreprocessStats {
            brain: brain_stats,
            cognition: cog_stats,
        },
        config: cfg.clone(),
        trace,
        training_keys: visits.iter().map(|v| (v.subject_id.clone(), v.visit)).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FingerprintMode {
    /// Columns of the training `R`; only valid for training visits.
    TrainShared,
    Brain,
    Cognition,
    #[default]
    Fused,
}

impl fmt::Display for FingerprintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FingerprintMode::TrainShared => "train-shared",
            FingerprintMode::Brain => "brain",
            FingerprintMode::Cognition => "cognition",
            FingerprintMode::Fused => "fused",
        })
    }
}

impl std::str::FromStr for FingerprintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-shared" => Ok(FingerprintMode::TrainShared),
            "brain" => Ok(FingerprintMode::Brain),
            "cognition" => Ok(FingerprintMode::Cognition),
            "fused" => Ok(FingerprintMode::Fused),
            other => Err(Error::InvalidInput(format!(
                "unknown fingerprint mode {other:?} (expected train-shared, brain, cognition or fused)"
            ))),
        }
    }
}

/// Pooled embedding of every visit under the trained encoder, `r × N`.
pub fn embed_visits(model: &TrainedModel, visits: &[VisitRecord]) -> Result<Matrix> {
    let refs: Vec<&VisitRecord> = visits.iter().collect();
    Ok(encode_all(&model.params, &refs)?.raw_brain)
}

pub fn compute_fingerprints(
    model: &TrainedModel,
    visits: &[VisitRecord],
    mode: FingerprintMode,
) -> Result<Vec<Fingerprint>> {
    let refs: Vec<&VisitRecord> = visits.iter().collect();
    fingerprints_of(model, &refs, mode)
}

fn fingerprints_of(model: &TrainedModel, visits: &[&VisitRecord], mode: FingerprintMode) -> Result<Vec<Fingerprint>> {
    let projection = match mode {
        FingerprintMode::TrainShared => {
            return visits
                .iter()
                .map(|v| {
                    let col = model.training_column(&v.subject_id, v.visit).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "visit {} of subject {} was not used for training; train-shared fingerprints \
                             exist only for training visits",
                            v.visit, v.subject_id
                        ))
                    })?;
                    Ok(Fingerprint {
                        values: model.solution.shared.column(col),
                        provenance: Provenance::TrainShared,
                        fallback: false,
                    })
                })
                .collect();
        }
        FingerprintMode::Brain => ProjectionMode::Brain,
        FingerprintMode::Cognition => ProjectionMode::Cognition,
        FingerprintMode::Fused => ProjectionMode::Fused,
    };
    let raw = encode_all(&model.params, visits)?.raw_brain;
    visits
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let b = model.stats.brain.apply_vector(&raw.column(j))?;
            let c = model.stats.cognition.apply_vector(&v.cognition)?;
            project_fingerprint(&model.solution, Some(&b), Some(&c), projection)
        })
        .collect()
}

/// Result of training on all folds but one and fingerprinting both parts.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub model: TrainedModel,
    pub train_fingerprints: Vec<Fingerprint>,
    pub test_fingerprints: Vec<Fingerprint>,
}

/// Subject-level k-fold training. Folds run on up to `jobs` threads;
/// results are returned in fold order and do not depend on `jobs`.
pub fn cross_validate(
    visits: &[VisitRecord],
    cfg: &TrainConfig,
    mode: FingerprintMode,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let subjects: Vec<&str> = visits.iter().map(|v| v.subject_id.as_str()).collect();
    let folds = make_subject_folds(&subjects, cfg.folds, cfg.seed)?;
    let run = |fold: usize| -> Result<FoldOutcome> {
        let test = folds[fold].clone();
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let train_refs: Vec<&VisitRecord> = train.iter().map(|&i| &visits[i]).collect();
        let test_refs: Vec<&VisitRecord> = test.iter().map(|&i| &visits[i]).collect();
        let model = train_on(&train_refs, cfg)?;
        let test_mode = if mode == FingerprintMode::TrainShared {
            FingerprintMode::Fused
        } else {
            mode
        };
        let train_fingerprints = fingerprints_of(&model, &train_refs, mode)?;
        let test_fingerprints = fingerprints_of(&model, &test_refs, test_mode)?;
        Ok(FoldOutcome {
            fold,
            train,
            test,
            model,
            train_fingerprints,
            test_fingerprints,
        })
    };
    parallel_map(cfg.folds, jobs, run)
}

/// Runs `f(0..n)` on up to `jobs` threads and returns results in index order.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

//! Individualized and multimodal contrastive losses over cosine similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Subject membership of the visits in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchIndex {
    subject_of: Vec<usize>,
    visit_of: Vec<u32>,
    groups: Vec<Vec<usize>>,
    subject_ids: Vec<String>,
}

impl BatchIndex {
    /// Groups visits by subject id, in order of first appearance.
    pub fn new<S: AsRef<str>>(subject_ids: &[S], visits: &[u32]) -> Result<Self> {
        if subject_ids.len() != visits.len() {
            return Err(Error::shape("BatchIndex", subject_ids.len(), visits.len()));
        }
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut ids = Vec::new();
        let mut subject_of = Vec::with_capacity(visits.len());
        for (i, s) in subject_ids.iter().enumerate() {
            let s = s.as_ref();
            let g = *lookup.entry(s).or_insert_with(|| {
                groups.push(Vec::new());
                ids.push(s.to_string());
                groups.len() - 1
            });
            if groups[g].iter().any(|&j| visits[j] == visits[i]) {
                return Err(Error::InvalidInput(format!(
                    "visit {} of subject {s} appears twice in the batch",
                    visits[i]
                )));
            }
            groups[g].push(i);
            subject_of.push(g);
        }
        Ok(BatchIndex {
            subject_of,
            visit_of: visits.to_vec(),
            groups,
            subject_ids: ids,
        })
    }

    pub fn len(&self) -> usize {
        self.subject_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_of.is_empty()
    }

    pub fn subject_count(&self) -> usize {
        self.groups.len()
    }

    /// Subject index (into [`BatchIndex::subject_ids`]) of each visit.
    pub fn subject_of(&self, visit: usize) -> usize {
        self.subject_of[visit]
    }

    pub fn visit_label(&self, visit: usize) -> u32 {
        self.visit_of[visit]
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Batch positions of each subject's visits.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn same_subject(&self, i: usize, j: usize) -> bool {
        self.subject_of[i] == self.subject_of[j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub lambda_ind: f64,
    pub lambda_mul: f64,
    /// Adds the positive pair to the multimodal denominator (standard InfoNCE).
    pub include_positive: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.9,
            lambda_ind: 1.5,
            lambda_mul: 0.5,
            include_positive: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda_ind >= 0.0 && self.lambda_mul >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "contrastive weights must be nonnegative, got {} and {}",
                self.lambda_ind, self.lambda_mul
            )));
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the embeddings (`N × r`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub grad: Matrix,
    /// No term contributed (no positive pairs, or no subject with two visits).
    pub empty: bool,
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let n = norm(m.row(i));
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::InvalidInput(format!(
                    "{what} of visit {i} has zero or non-finite norm; cosine similarity is undefined"
                )))
            }
        })
        .collect()
}

/// Adds `coef · ∂cos(a, b)/∂a` to `out`.
#[inline]
fn add_cosine_grad(out: &mut [f64], a: &[f64], b: &[f64], na: f64, nb: f64, sim: f64, coef: f64) {
    let inv_ab = coef / (na * nb);
    let self_term = coef * sim / (na * na);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += inv_ab * y - self_term * x;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-(1/N) Σ_i Σ_{j≠i, same subject} log softmax_{k≠i}(sim(h_i, h_k)/τ)[j]`.
pub fn individualized_loss(
    embeddings: &Matrix,
    index: &BatchIndex,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveLoss> {
    cfg.validate()?;
    let n = embeddings.rows();
    if index.len() != n {
        return Err(Error::shape("individualized_loss batch", index.len(), n));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "individualized_loss needs at least two visits".into(),
        ));
    }
    let norms = row_norms(embeddings, "embedding")?;
    let d = embeddings.cols();
    let sim = Matrix::from_fn(n, n, |i, k| {
        dot(embeddings.row(i), embeddings.row(k)) / (norms[i] * norms[k])
    });

    let tau = cfg.temperature;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, d);
    let mut any = false;
    let mut coef = vec![0.0; n];
    for i in 0..n {
        let positives = index.groups()[index.subject_of(i)].len() - 1;
        if positives == 0 {
            continue;
        }
        any = true;
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let logits: Vec<f64> = others.iter().map(|&k| sim[(i, k)] / tau).collect();
        let lse = log_sum_exp(&logits);
        coef.iter_mut().for_each(|c| *c = 0.0);
        for (&k, &l) in others.iter().zip(&logits) {
            let p = (l - lse).exp();
            coef[k] = positives as f64 * p;
            if index.same_subject(i, k) {
                loss += scale * (lse - l);
                coef[k] -= 1.0;
            }
        }
        for &k in &others {
            let c = scale * coef[k] / tau;
            if c == 0.0 {
                continue;
            }
            let (hi, hk) = (embeddings.row(i), embeddings.row(k));
            let s = sim[(i, k)];
            add_cosine_grad(grad.row_mut(i), hi, hk, norms[i], norms[k], s, c);
            add_cosine_grad(grad.row_mut(k), hk, hi, norms[k], norms[i], s, c);
        }
    }
    Ok(ContrastiveLoss {
        loss,
        grad,
        empty: !any,
    })
}

/// `-(1/S) Σ_s Σ_{i∈s} log [exp(sim(h_i, c_i)/τ) / Σ_{k∈s, k≠i} exp(sim(h_i, c_k)/τ)]`
/// over subjects with at least two visits. With `include_positive`, the
/// denominator also runs over `k = i`.
pub fn multimodal_loss(
    embeddings: &Matrix,
    cognition: &Matrix,
    index: &BatchIndex,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveLoss> {
    cfg.validate()?;
    let n = embeddings.rows();
    if index.len() != n || cognition.rows() != n {
        return Err(Error::shape(
            "multimodal_loss batch",
            index.len(),
            format!("{} embeddings, {} cognitive vectors", n, cognition.rows()),
        ));
    }
    if embeddings.cols() != cognition.cols() {
        return Err(Error::shape(
            "multimodal_loss dimension",
            embeddings.cols(),
            cognition.cols(),
        ));
    }
    let mut grad = Matrix::zeros(n, embeddings.cols());
    let active: Vec<&Vec<usize>> = index.groups().iter().filter(|g| g.len() > 1).collect();
    if active.is_empty() {
        return Ok(ContrastiveLoss {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    let h_norms = row_norms(embeddings, "embedding")?;
    let c_norms = row_norms(cognition, "cognitive vector")?;
    let tau = cfg.temperature;
    let scale = 1.0 / index.subject_count() as f64;
    let mut loss = 0.0;
    for group in active {
        for &i in group {
            let hi = embeddings.row(i);
            let sims: Vec<f64> = group
                .iter()
                .map(|&k| dot(hi, cognition.row(k)) / (h_norms[i] * c_norms[k]))
                .collect();
            let denom: Vec<usize> = (0..group.len())
                .filter(|&t| cfg.include_positive || group[t] != i)
                .collect();
            let logits: Vec<f64> = denom.iter().map(|&t| sims[t] / tau).collect();
            let lse = log_sum_exp(&logits);
            let pos = group.iter().position(|&k| k == i).expect("visit in own group");
            loss += scale * (lse - sims[pos] / tau);

            let mut coef = vec![0.0; group.len()];
            for (&t, &l) in denom.iter().zip(&logits) {
                coef[t] += (l - lse).exp();
            }
            coef[pos] -= 1.0;
            for (t, &k) in group.iter().enumerate() {
                let c = scale * coef[t] / tau;
                if c != 0.0 {
                    add_cosine_grad(grad.row_mut(i), hi, cognition.row(k), h_norms[i], c_norms[k], sims[t], c);
                }
            }
        }
    }
    Ok(ContrastiveLoss {
        loss,
        grad,
        empty: false,
    })
}

/// `L_corr + λ1 L_ind + λ2 L_mul`.
pub fn total_loss(corr: f64, ind: f64, mul: f64, cfg: &ContrastiveConfig) -> f64 {
    corr + cfg.lambda_ind * ind + cfg.lambda_mul * mul
}

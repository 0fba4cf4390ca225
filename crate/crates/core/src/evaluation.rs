//! Downstream analysis of fingerprints: similarity statistics, MLP
//! classification with balanced accuracy, Shapley attribution and
//! interpretation tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VisitRecord;
use crate::error::{Error, Result};
use crate::graph::forward;
use crate::numerics::{mann_whitney_u, pearson, sample_std_dev, wasserstein_1d, AdamState, MannWhitney, Matrix};
use crate::pipeline::{parallel_map, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub histogram_bins: usize,
    pub repeats: usize,
    pub mlp: MlpConfig,
    /// Permutation samples for Shapley values when exact enumeration is
    /// too large; 0 means exact only.
    pub shapley_samples: usize,
    pub top_components: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            histogram_bins: 20,
            repeats: 10,
            mlp: MlpConfig::default(),
            shapley_samples: 0,
            top_components: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[-1, 1]`.
    pub edges: Vec<f64>,
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
}

fn histogram(intra: &[f64], inter: &[f64], bins: usize) -> Histogram {
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0; bins];
        for &x in xs {
            let b = (((x + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    Histogram {
        edges,
        intra: count(intra),
        inter: count(inter),
    }
}

#[derive(Clone, Debug)]
pub struct SimilarityReport {
    /// Pearson similarity of every pair of fingerprints.
    pub matrix: Matrix,
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub wasserstein: Option<f64>,
    pub mann_whitney: Option<MannWhitney>,
    pub histogram: Histogram,
    /// No same-subject pair was available.
    pub inter_only: bool,
}

/// Pairwise Pearson similarity split into same-subject and cross-subject pairs.
pub fn similarity_analysis<S: AsRef<str>>(fingerprints: &Matrix, subjects: &[S], bins: usize) -> Result<SimilarityReport> {
    similarity_analysis_blocked(fingerprints, subjects, None, bins)
}

/// As [`similarity_analysis`], but pairs whose `blocks` labels differ are
/// left out of both samples.
pub fn similarity_analysis_blocked<S: AsRef<str>>(
    fingerprints: &Matrix,
    subjects: &[S],
    blocks: Option<&[usize]>,
    bins: usize,
) -> Result<SimilarityReport> {
    similarity_of(fingerprints.rows(), |i| fingerprints.row(i), subjects, blocks, bins)
}

/// As [`similarity_analysis_blocked`] for rows whose length may differ
/// between blocks. Matrix entries of pairs with different lengths are NaN.
pub fn similarity_analysis_rows<S: AsRef<str>>(
    rows: &[Vec<f64>],
    subjects: &[S],
    blocks: Option<&[usize]>,
    bins: usize,
) -> Result<SimilarityReport> {
    similarity_of(rows.len(), |i| rows[i].as_slice(), subjects, blocks, bins)
}

fn similarity_of<'a, S: AsRef<str>>(
    n: usize,
    row: impl Fn(usize) -> &'a [f64],
    subjects: &[S],
    blocks: Option<&[usize]>,
    bins: usize,
) -> Result<SimilarityReport> {
    if subjects.len() != n {
        return Err(Error::shape("similarity_analysis subjects", n, subjects.len()));
    }
    if let Some(b) = blocks {
        if b.len() != n {
            return Err(Error::shape("similarity_analysis blocks", n, b.len()));
        }
    }
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    let distinct: std::collections::HashSet<&str> = subjects.iter().map(|s| s.as_ref()).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput("similarity analysis needs at least 2 subjects".into()));
    }
    let mut matrix = Matrix::identity(n);
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let same_block = blocks.is_none_or(|b| b[i] == b[j]);
            if !same_block && row(i).len() != row(j).len() {
                matrix[(i, j)] = f64::NAN;
                matrix[(j, i)] = f64::NAN;
                continue;
            }
            let r = pearson(row(i), row(j)).map_err(|e| {
                Error::InvalidInput(format!("fingerprints {i} and {j}: {e}"))
            })?;
            matrix[(i, j)] = r;
            matrix[(j, i)] = r;
            if !same_block {
                continue;
            }
            if subjects[i].as_ref() == subjects[j].as_ref() {
                intra.push(r);
            } else {
                inter.push(r);
            }
        }
    }
    let inter_only = intra.is_empty();
    let (wasserstein, mann_whitney) = if inter_only || inter.is_empty() {
        (None, None)
    } else {
        (Some(wasserstein_1d(&intra, &inter)?), Some(mann_whitney_u(&intra, &inter)?))
    };
    let histogram = histogram(&intra, &inter, bins);
    Ok(SimilarityReport {
        matrix,
        intra,
        inter,
        wasserstein,
        mann_whitney,
        histogram,
        inter_only,
    })
}

/// Mean of per-class recalls.
pub fn balanced_accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("balanced_accuracy", labels.len(), predictions.len()));
    }
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y > 1 || p > 1 {
            return Err(Error::InvalidInput("balanced_accuracy expects binary 0/1 values".into()));
        }
        totals[y as usize] += 1;
        if p == y {
            hits[y as usize] += 1;
        }
    }
    if totals.contains(&0) {
        return Err(Error::InvalidInput("balanced accuracy needs both classes among the labels".into()));
    }
    Ok(0.5 * (hits[0] as f64 / totals[0] as f64 + hits[1] as f64 / totals[1] as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![64, 32],
            dropout: 0.5,
            epochs: 200,
            learning_rate: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
}

/// ELU network over standardized inputs with a 2-way linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Dense>,
    pub seed: u64,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn affine(a: &Matrix, layer: &Dense) -> Matrix {
    let mut out = a.matmul(&layer.weight);
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(layer.bias.as_slice()) {
            *o += b;
        }
    }
    out
}

impl MlpClassifier {
    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Class logits for one raw input.
    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("MLP input", self.input_dim(), x.len()));
        }
        let mut a = self.standardize(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.bias.as_slice().to_vec();
            for (i, &ai) in a.iter().enumerate() {
                if ai != 0.0 {
                    for (n, w) in next.iter_mut().zip(layer.weight.row(i)) {
                        *n += ai * w;
                    }
                }
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = elu(*v));
            }
            a = next;
        }
        Ok([a[0], a[1]])
    }

    /// `logit_1 − logit_0`, the value function used for attribution.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        let z = self.logits(x)?;
        Ok(z[1] - z[0])
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.margin(x)? > 0.0))
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<u8>> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

/// Full-batch cross-entropy training with Adam and inverted dropout.
pub fn train_mlp(x: &Matrix, labels: &[u8], cfg: &MlpConfig, seed: u64) -> Result<MlpClassifier> {
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(Error::shape("train_mlp labels", n, labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidInput("train_mlp expects binary 0/1 labels".into()));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::InvalidInput(
            "training labels contain a single class; the classifier cannot be fit".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.dropout) || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || d == 0 {
        return Err(Error::InvalidInput("invalid MLP configuration".into()));
    }
    let input_mean = x.column_means();
    let input_scale: Vec<f64> = (0..d)
        .map(|j| {
            let sd = (0..n).map(|i| (x[(i, j)] - input_mean[j]).powi(2)).sum::<f64>() / n as f64;
            let sd = sd.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let xs = Matrix::from_fn(n, d, |i, j| (x[(i, j)] - input_mean[j]) / input_scale[j]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![d];
    dims.extend(&cfg.hidden);
    dims.push(2);
    let mut layers: Vec<Dense> = dims
        .windows(2)
        .map(|w| Dense {
            weight: glorot(w[0], w[1], &mut rng),
            bias: Matrix::zeros(1, w[1]),
        })
        .collect();
    let mut opt: Vec<(AdamState, AdamState)> = layers
        .iter()
        .map(|l| {
            (
                AdamState::for_params(&l.weight, cfg.learning_rate),
                AdamState::for_params(&l.bias, cfg.learning_rate),
            )
        })
        .collect();
    let keep = 1.0 - cfg.dropout;
    let last = layers.len() - 1;

    for _ in 0..cfg.epochs {
        // Forward with dropout after every hidden activation.
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pres = Vec::with_capacity(layers.len());
        let mut masks = Vec::with_capacity(layers.len());
        let mut a = xs.clone();
        for (l, layer) in layers.iter().enumerate() {
            inputs.push(a.clone());
            let pre = affine(&a, layer);
            if l < last {
                let mask = Matrix::from_fn(pre.rows(), pre.cols(), |_, _| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| elu(pre[(i, j)]) * mask[(i, j)]);
                masks.push(mask);
            } else {
                a = pre.clone();
            }
            pres.push(pre);
        }
        // Softmax cross-entropy gradient, averaged over the batch.
        let mut grad = Matrix::zeros(n, 2);
        for i in 0..n {
            let z = a.row(i);
            let m = z[0].max(z[1]);
            let e0 = (z[0] - m).exp();
            let e1 = (z[1] - m).exp();
            let p1 = e1 / (e0 + e1);
            let y = f64::from(labels[i]);
            grad[(i, 1)] = (p1 - y) / n as f64;
            grad[(i, 0)] = (y - p1) / n as f64;
        }
        for l in (0..layers.len()).rev() {
            if l < last {
                let pre = &pres[l];
                let mask = &masks[l];
                grad = Matrix::from_fn(grad.rows(), grad.cols(), |i, j| {
                    grad[(i, j)] * mask[(i, j)] * elu_grad(pre[(i, j)])
                });
            }
            let gw = inputs[l].t_matmul(&grad);
            let gb = Matrix::from_fn(1, grad.cols(), |_, j| (0..grad.rows()).map(|i| grad[(i, j)]).sum());
            let next = if l > 0 { Some(grad.matmul_t(&layers[l].weight)) } else { None };
            opt[l].0.step(&mut layers[l].weight, &gw)?;
            opt[l].1.step(&mut layers[l].bias, &gb)?;
            if let Some(g) = next {
                grad = g;
            }
        }
    }
    if layers.iter().any(|l| !l.weight.is_finite() || !l.bias.is_finite()) {
        return Err(Error::Numerical("MLP weights became non-finite".into()));
    }
    Ok(MlpClassifier {
        input_mean,
        input_scale,
        layers,
        seed,
    })
}

/// Representations of one fold, rows aligned with the visit indices.
#[derive(Clone, Debug)]
pub struct FoldRepresentation {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_x: Matrix,
    pub test_x: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub bacc: Vec<f64>,
    pub bacc_mean: f64,
    pub bacc_sd: f64,
    pub seeds: Vec<u64>,
}

/// Trains one MLP per fold and seed; test predictions are pooled across
/// folds before the balanced accuracy of each seed is computed.
pub fn classify_folds(
    folds: &[FoldRepresentation],
    labels: &[u8],
    cfg: &MlpConfig,
    repeats: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<ClassificationSummary> {
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be positive".into()));
    }
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| base_seed.wrapping_add(r)).collect();
    let bacc = parallel_map(repeats, jobs, |r| {
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for f in folds {
            let y: Vec<u8> = f.train.iter().map(|&i| labels[i]).collect();
            let clf = train_mlp(&f.train_x, &y, cfg, seeds[r])?;
            preds.extend(clf.predict_rows(&f.test_x)?);
            truth.extend(f.test.iter().map(|&i| labels[i]));
        }
        balanced_accuracy(&preds, &truth)
    })?;
    let mean = bacc.iter().sum::<f64>() / bacc.len() as f64;
    let sd = if bacc.len() > 1 { sample_std_dev(&bacc) } else { 0.0 };
    Ok(ClassificationSummary {
        bacc,
        bacc_mean: mean,
        bacc_sd: sd,
        seeds,
    })
}

pub const MAX_EXACT_FEATURES: usize = 20;

/// Exact Shapley values of `f` at `x`, absent features set to `baseline`.
pub fn shapley_exact(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if baseline.len() != d {
        return Err(Error::shape("shapley baseline", d, baseline.len()));
    }
    if d > MAX_EXACT_FEATURES {
        return Err(Error::InvalidInput(format!(
            "exact Shapley enumeration is limited to {MAX_EXACT_FEATURES} features (got {d}); \
             use the Monte Carlo mode instead"
        )));
    }
    let coalitions = 1usize << d;
    let mut values = Vec::with_capacity(coalitions);
    let mut point = baseline.to_vec();
    for mask in 0..coalitions {
        for (i, p) in point.iter_mut().enumerate() {
            *p = if mask >> i & 1 == 1 { x[i] } else { baseline[i] };
        }
        values.push(f(&point)?);
    }
    // weight[s] = s! (d − s − 1)! / d! = 1 / (d · C(d − 1, s)).
    let mut weight = vec![0.0; d.max(1)];
    let mut binom = 1.0;
    for (s, w) in weight.iter_mut().enumerate().take(d) {
        *w = 1.0 / (d as f64 * binom);
        binom = binom * (d - 1 - s) as f64 / (s + 1) as f64;
    }
    let mut phi = vec![0.0; d];
    for mask in 0..coalitions {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (values[mask | 1 << i] - values[mask]);
            }
        }
    }
    Ok(phi)
}

/// Permutation-sampling Shapley estimate with per-feature standard errors.
pub fn shapley_monte_carlo(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    baseline: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.len();
    if baseline.len() != d {
        return Err(Error::shape("shapley baseline", d, baseline.len()));
    }
    if samples < 2 {
        return Err(Error::InvalidInput("Monte Carlo Shapley needs at least 2 permutations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    for _ in 0..samples {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut point = baseline.to_vec();
        let mut prev = f(&point)?;
        for &i in &order {
            point[i] = x[i];
            let cur = f(&point)?;
            let delta = cur - prev;
            sum[i] += delta;
            sum_sq[i] += delta * delta;
            prev = cur;
        }
    }
    let m = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| ((sq / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    Ok((mean, se))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    pub values: Vec<f64>,
    /// Present for Monte Carlo estimates.
    pub std_errors: Option<Vec<f64>>,
    pub baseline: Vec<f64>,
    pub base_value: f64,
    pub full_value: f64,
    /// Feature indices by decreasing `|value|`.
    pub ranking: Vec<usize>,
}

fn rank_by_magnitude(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx
}

/// Exact Shapley attribution of the classifier margin at `x`.
pub fn shapley_attribution(clf: &MlpClassifier, x: &[f64], baseline: &[f64]) -> Result<AttributionReport> {
    let values = shapley_exact(|p| clf.margin(p), x, baseline)?;
    Ok(AttributionReport {
        ranking: rank_by_magnitude(&values),
        values,
        std_errors: None,
        baseline: baseline.to_vec(),
        base_value: clf.margin(baseline)?,
        full_value: clf.margin(x)?,
    })
}

pub fn shapley_attribution_sampled(
    clf: &MlpClassifier,
    x: &[f64],
    baseline: &[f64],
    samples: usize,
    seed: u64,
) -> Result<AttributionReport> {
    let (values, se) = shapley_monte_carlo(|p| clf.margin(p), x, baseline, samples, seed)?;
    Ok(AttributionReport {
        ranking: rank_by_magnitude(&values),
        values,
        std_errors: Some(se),
        baseline: baseline.to_vec(),
        base_value: clf.margin(baseline)?,
        full_value: clf.margin(x)?,
    })
}

/// Component indices by decreasing mean `|φ|` over several reports.
pub fn rank_components(reports: &[AttributionReport]) -> Vec<usize> {
    let d = reports.first().map_or(0, |r| r.values.len());
    let mut mean = vec![0.0; d];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v.abs() / reports.len() as f64;
        }
    }
    rank_by_magnitude(&mean)
}

/// Attention averaged over visits and layers.
pub fn mean_attention(model: &TrainedModel, visits: &[VisitRecord]) -> Result<Matrix> {
    let v = visits
        .first()
        .map(|r| r.graph.node_count())
        .ok_or_else(|| Error::InvalidInput("mean attention needs at least one visit".into()))?;
    let mut acc = Matrix::zeros(v, v);
    let layers = model.params.layers.len() as f64;
    for rec in visits {
        let emb = forward(&model.params, &rec.graph)?.embedding(&rec.graph);
        for a in &emb.attention {
            acc.axpy(1.0 / layers, a);
        }
    }
    Ok(acc.scale(1.0 / visits.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CognitiveLoadingRow {
    pub component: usize,
    pub rank: usize,
    pub variable: usize,
    pub loading: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeImportanceRow {
    pub component: usize,
    pub rank: usize,
    pub node_p: usize,
    pub node_q: usize,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpretationTables {
    pub cognitive: Vec<CognitiveLoadingRow>,
    pub edges: Vec<EdgeImportanceRow>,
    pub mean_attention: Matrix,
}

/// Cognitive loadings and edge importance for the selected components.
///
/// Node `p`'s share of component `j` in one visit is
/// `Σ_d U_brain[d, j] · h_pd / σ_d / V`; edge importance is the symmetrized
/// mean attention between `p` and `q` times the across-visit standard
/// deviations of both shares.
pub fn interpret_components(
    model: &TrainedModel,
    visits: &[VisitRecord],
    components: &[usize],
) -> Result<InterpretationTables> {
    let d_r = model.solution.components();
    if let Some(&bad) = components.iter().find(|&&j| j >= d_r) {
        return Err(Error::InvalidInput(format!("component index {bad} is out of range (d_R = {d_r})")));
    }
    if visits.is_empty() {
        return Err(Error::InvalidInput("interpretation needs at least one visit".into()));
    }
    let u_b = &model.solution.brain_loadings;
    let u_c = &model.solution.cognition_loadings;
    let scale = &model.stats.brain.scale;
    let v = visits[0].graph.node_count();
    let layers = model.params.layers.len() as f64;

    let mut attention = Matrix::zeros(v, v);
    // shares[j][visit][p]
    let mut shares = vec![vec![vec![0.0; v]; visits.len()]; components.len()];
    for (t, rec) in visits.iter().enumerate() {
        let emb = forward(&model.params, &rec.graph)?.embedding(&rec.graph);
        for a in &emb.attention {
            attention.axpy(1.0 / layers, a);
        }
        for (c, &j) in components.iter().enumerate() {
            for p in 0..v {
                shares[c][t][p] = emb
                    .nodes
                    .row(p)
                    .iter()
                    .enumerate()
                    .map(|(d, h)| u_b[(d, j)] * h / scale[d])
                    .sum::<f64>()
                    / v as f64;
            }
        }
    }
    let attention = attention.scale(1.0 / visits.len() as f64);

    let mut cognitive = Vec::new();
    let mut edges = Vec::new();
    for (c, &j) in components.iter().enumerate() {
        let col = u_c.column(j);
        for (rank, &var) in rank_by_magnitude(&col).iter().enumerate() {
            cognitive.push(CognitiveLoadingRow {
                component: j,
                rank: rank + 1,
                variable: var,
                loading: col[var],
                magnitude: col[var].abs(),
            });
        }
        let spread: Vec<f64> = (0..v)
            .map(|p| {
                let xs: Vec<f64> = shares[c].iter().map(|s| s[p]).collect();
                crate::numerics::std_dev(&xs)
            })
            .collect();
        let mut rows = Vec::with_capacity(v * (v - 1) / 2);
        for p in 0..v {
            for q in (p + 1)..v {
                let a = 0.5 * (attention[(p, q)] + attention[(q, p)]);
                rows.push((p, q, a * spread[p] * spread[q]));
            }
        }
        rows.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        edges.extend(rows.into_iter().enumerate().map(|(rank, (p, q, w))| EdgeImportanceRow {
            component: j,
            rank: rank + 1,
            node_p: p,
            node_q: q,
            importance: w,
        }));
    }
    Ok(InterpretationTables {
        cognitive,
        edges,
        mean_attention: attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bacc_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        // Class 1 recall 4/5, class 0 recall 3/5.
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let preds = [1, 1, 1, 1, 0, 0, 0, 0, 1, 1];
        assert!((balanced_accuracy(&preds, &labels).unwrap() - 0.7).abs() < 1e-12);
        assert!(balanced_accuracy(&[0, 1], &[1, 1]).is_err());
    }

    #[test]
    fn linear_shapley_closed_form() {
        let w = [0.5, -2.0, 3.0];
        let f = |x: &[f64]| Ok(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 1.0);
        let x = [1.0, 2.0, -1.0];
        let base = [0.5, 0.0, 1.0];
        let phi = shapley_exact(f, &x, &base).unwrap();
        for i in 0..3 {
            assert!((phi[i] - w[i] * (x[i] - base[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_features_for_exact() {
        let x = vec![0.0; 21];
        let err = shapley_exact(|_| Ok(0.0), &x, &x).unwrap_err().to_string();
        assert!(err.contains("Monte Carlo"), "{err}");
    }

    #[test]
    fn identical_fingerprints() {
        let fp = Matrix::from_fn(4, 3, |_, j| j as f64);
        let rep = similarity_analysis(&fp, &["a", "a", "b", "b"], 20).unwrap();
        assert!(rep.intra.iter().chain(&rep.inter).all(|&r| (r - 1.0).abs() < 1e-12));
        assert!(rep.wasserstein.unwrap().abs() < 1e-12);
    }

    #[test]
    fn inter_only_is_flagged() {
        let fp = Matrix::from_fn(3, 3, |i, j| ((i + 1) * (j + 2)) as f64 + (i * j * j) as f64);
        let rep = similarity_analysis(&fp, &["a", "b", "c"], 20).unwrap();
        assert!(rep.inter_only && rep.wasserstein.is_none());
        assert_eq!(rep.inter.len(), 3);
    }

    #[test]
    fn histogram_covers_endpoints() {
        let h = histogram(&[-1.0, 1.0, 0.0], &[0.99], 20);
        assert_eq!(h.edges.len(), 21);
        assert_eq!(h.intra[0], 1);
        assert_eq!(h.intra[19], 1);
        assert_eq!(h.intra[10], 1);
        assert_eq!(h.inter[19], 1);
    }

    #[test]
    fn single_class_training_rejected() {
        let x = Matrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert!(train_mlp(&x, &[1, 1, 1, 1], &MlpConfig::default(), 0).is_err());
    }
}

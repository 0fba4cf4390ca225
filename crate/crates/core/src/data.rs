//! Dataset records, on-disk layout, synthetic cohorts and model files.
//!
//! Dataset directory layout:
//!
//! ```text
//! manifest.csv      subject_id,visit,connectivity_path,cog_1,...,cog_d
//! labels.csv        subject_id,visit,<task>,...   (optional, 0/1 values)
//! <connectivity>    headerless V×V CSV, path relative to the dataset root
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcca::{GccaSolution, PreprocessStats, ViewStats};
use crate::graph::{build_graph, ConnectivityGraph, EncoderParams, GatLayerParams};
use crate::numerics::Matrix;
use crate::pipeline::{LossRecord, TrainConfig, TrainedModel};

const SYMMETRY_TOL: f64 = 1e-6;
const DIAGONAL_TOL: f64 = 1e-6;

/// One visit: the unit of all training data.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitRecord {
    pub subject_id: String,
    pub visit: u32,
    /// Raw `V × V` correlation matrix, signed.
    pub connectivity: Matrix,
    pub graph: ConnectivityGraph,
    pub cognition: Vec<f64>,
}

impl VisitRecord {
    pub fn new(subject_id: impl Into<String>, visit: u32, connectivity: Matrix, cognition: Vec<f64>) -> Result<Self> {
        let graph = build_graph(&connectivity)?;
        Ok(VisitRecord {
            subject_id: subject_id.into(),
            visit,
            connectivity,
            graph,
            cognition,
        })
    }

    pub fn key(&self) -> (&str, u32) {
        (&self.subject_id, self.visit)
    }
}

/// Visit records plus optional binary attributes aligned with them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<VisitRecord>,
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl Dataset {
    pub fn node_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.graph.node_count())
    }

    pub fn cognitive_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.cognition.len())
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }

    pub fn labels_for(&self, task: &str) -> Result<&[u8]> {
        self.labels.get(task).map(Vec::as_slice).ok_or_else(|| {
            let known: Vec<&str> = self.labels.keys().map(String::as_str).collect();
            Error::InvalidInput(format!("no labels for task {task:?}; available: {known:?}"))
        })
    }
}

fn invalid(path: &Path, message: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Checks the connectivity rules: square, symmetric, unit diagonal, range.
pub fn validate_connectivity(m: &Matrix, path: &Path) -> Result<()> {
    if !m.is_square() {
        return Err(invalid(path, format!("matrix is {}x{}, expected square", m.rows(), m.cols())));
    }
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let x = m[(i, j)];
            if !x.is_finite() {
                return Err(invalid(path, format!("row {}, column {}: non-finite entry", i + 1, j + 1)));
            }
            if !(-1.0..=1.0).contains(&x) {
                return Err(invalid(
                    path,
                    format!("row {}, column {}: entry {x} outside [-1, 1]", i + 1, j + 1),
                ));
            }
            if (x - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(invalid(
                    path,
                    format!("row {}, column {}: matrix not symmetric ({x} vs {})", i + 1, j + 1, m[(j, i)]),
                ));
            }
        }
        if (m[(i, i)] - 1.0).abs() > DIAGONAL_TOL {
            return Err(invalid(
                path,
                format!("row {}, column {}: diagonal entry {} is not 1", i + 1, i + 1, m[(i, i)]),
            ));
        }
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>()
                    .map_err(|_| invalid(path, format!("row {}, column {}: cannot parse {f:?}", r + 1, c + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(invalid(path, "empty matrix file"));
    }
    Matrix::from_rows(&rows).map_err(|_| invalid(path, "rows have different lengths"))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads `manifest.csv` (and `labels.csv` when present) from `root`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| csv_error(&manifest, e))?;
    let header = reader.headers().map_err(|e| csv_error(&manifest, e))?.clone();
    let expected = ["subject_id", "visit", "connectivity_path"];
    if header.len() < 4 || header.iter().take(3).ne(expected.iter().copied()) {
        return Err(invalid(
            &manifest,
            "header must be subject_id,visit,connectivity_path,cog_1,...,cog_d",
        ));
    }
    let d_cog = header.len() - 3;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| csv_error(&manifest, e))?;
        let subject = rec[0].to_string();
        if subject.is_empty() {
            return Err(invalid(&manifest, format!("row {line}: empty subject_id")));
        }
        let visit: u32 = rec[1]
            .parse()
            .map_err(|_| invalid(&manifest, format!("row {line}: visit {:?} is not a nonnegative integer", &rec[1])))?;
        if !seen.insert((subject.clone(), visit)) {
            return Err(invalid(
                &manifest,
                format!("row {line}: duplicate (subject, visit) pair ({subject}, {visit})"),
            ));
        }
        let cognition = (0..d_cog)
            .map(|k| {
                rec[3 + k].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    invalid(&manifest, format!("row {line}: cognitive score {:?} is not a finite number", &rec[3 + k]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((subject, visit, root.join(&rec[2]), cognition));
    }
    if rows.is_empty() {
        return Err(invalid(&manifest, "manifest lists no visits"));
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut node_count = None;
    for (subject, visit, path, cognition) in rows {
        let m = read_matrix_csv(&path)?;
        validate_connectivity(&m, &path)?;
        match node_count {
            None => node_count = Some(m.rows()),
            Some(v) if v != m.rows() => {
                return Err(invalid(&path, format!("matrix is {0}x{0}, other visits have {v} nodes", m.rows())));
            }
            _ => {}
        }
        records.push(VisitRecord::new(subject, visit, m, cognition)?);
    }

    let labels_path = root.join("labels.csv");
    let labels = if labels_path.exists() {
        load_labels(&labels_path, &records)?
    } else {
        BTreeMap::new()
    };
    Ok(Dataset { records, labels })
}

fn load_labels(path: &Path, records: &[VisitRecord]) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 3 || &header[0] != "subject_id" || &header[1] != "visit" {
        return Err(invalid(path, "header must be subject_id,visit,<task>,..."));
    }
    let tasks: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut by_key: HashMap<(String, u32), Vec<u8>> = HashMap::new();
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let visit: u32 = rec[1]
            .parse()
            .map_err(|_| invalid(path, format!("row {line}: visit {:?} is not a nonnegative integer", &rec[1])))?;
        let values = (0..tasks.len())
            .map(|k| match &rec[2 + k] {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(invalid(path, format!("row {line}: label {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if by_key.insert((rec[0].to_string(), visit), values).is_some() {
            return Err(invalid(path, format!("row {line}: duplicate (subject, visit) pair")));
        }
    }
    let mut out: BTreeMap<String, Vec<u8>> = tasks.iter().map(|t| (t.clone(), Vec::new())).collect();
    for rec in records {
        let values = by_key.get(&(rec.subject_id.clone(), rec.visit)).ok_or_else(|| {
            invalid(path, format!("no labels for subject {} visit {}", rec.subject_id, rec.visit))
        })?;
        for (t, v) in tasks.iter().zip(values) {
            out.get_mut(t).expect("task present").push(*v);
        }
    }
    Ok(out)
}

/// Writes the dataset in the layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let dir = root.join("connectivity");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let d_cog = dataset.cognitive_dim();
    let manifest = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    let mut header = vec!["subject_id".to_string(), "visit".into(), "connectivity_path".into()];
    header.extend((1..=d_cog).map(|k| format!("cog_{k}")));
    w.write_record(&header).map_err(|e| csv_error(&manifest, e))?;
    for rec in &dataset.records {
        let rel = format!("connectivity/{}_v{}.csv", rec.subject_id, rec.visit);
        write_matrix_csv(&root.join(&rel), &rec.connectivity)?;
        let mut row = vec![rec.subject_id.clone(), rec.visit.to_string(), rel];
        row.extend(rec.cognition.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(|e| csv_error(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;

    if !dataset.labels.is_empty() {
        let path = root.join("labels.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut header = vec!["subject_id".to_string(), "visit".into()];
        header.extend(dataset.labels.keys().cloned());
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for (i, rec) in dataset.records.iter().enumerate() {
            let mut row = vec![rec.subject_id.clone(), rec.visit.to_string()];
            row.extend(dataset.labels.values().map(|v| v[i].to_string()));
            w.write_record(&row).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub subjects: usize,
    /// Share of subjects with 1, 2, ... visits.
    pub visit_weights: Vec<f64>,
    pub nodes: usize,
    pub cognitive_dim: usize,
    pub latent_dim: usize,
    /// Scale of the latent-driven connectivity patterns.
    pub latent_strength: f64,
    /// Amplitude of the planted edge.
    pub edge_strength: f64,
    /// Latent factor that drives the planted edge.
    pub edge_factor: usize,
    /// Spread of the subject latents around zero.
    pub subject_signal: f64,
    /// Scale of the latent's contribution to cognition.
    pub coupling: f64,
    pub noise: f64,
    /// Latent factor whose sign defines the binary attribute.
    pub label_factor: usize,
    pub label_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subjects: 30,
            visit_weights: vec![0.5, 0.5],
            nodes: 24,
            cognitive_dim: 16,
            latent_dim: 4,
            latent_strength: 0.6,
            edge_strength: 2.0,
            edge_factor: 3,
            subject_signal: 1.0,
            coupling: 1.0,
            noise: 0.3,
            label_factor: 0,
            label_threshold: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.subjects == 0 || self.nodes < 2 || self.cognitive_dim == 0 || self.latent_dim == 0 {
            return bad("subjects, cognitive_dim and latent_dim must be positive and nodes at least 2".into());
        }
        if self.visit_weights.is_empty()
            || self.visit_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.visit_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("visit_weights must be nonnegative with a positive sum".into());
        }
        let strengths = [
            self.latent_strength,
            self.edge_strength,
            self.subject_signal,
            self.coupling,
            self.noise,
        ];
        if strengths.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("strengths and noise must be finite and nonnegative".into());
        }
        if (self.subject_signal == 0.0 || (self.latent_strength == 0.0 && self.edge_strength == 0.0)) && self.noise == 0.0 {
            return bad("degenerate config: connectivity has neither signal nor noise".into());
        }
        if self.coupling == 0.0 && self.noise == 0.0 {
            return bad("degenerate config: cognition has neither coupling nor noise".into());
        }
        if self.label_factor >= self.latent_dim {
            return bad(format!("label_factor {} >= latent_dim {}", self.label_factor, self.latent_dim));
        }
        if self.edge_factor >= self.latent_dim {
            return bad(format!("edge_factor {} >= latent_dim {}", self.edge_factor, self.latent_dim));
        }
        Ok(())
    }

    /// Number of subjects with 1, 2, ... visits (largest-remainder rounding).
    pub fn visit_counts(&self) -> Vec<usize> {
        let total: f64 = self.visit_weights.iter().sum();
        let exact: Vec<f64> = self
            .visit_weights
            .iter()
            .map(|w| w / total * self.subjects as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &i in order.iter().take(self.subjects - assigned) {
            counts[i] += 1;
        }
        counts
    }
}

/// Quantities the generator drew, for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Subject ids in generation order.
    pub subjects: Vec<String>,
    /// Subject latents, `S × latent_dim`.
    pub latents: Matrix,
    /// Cognition mixing `d_cog × latent_dim`.
    pub mixing: Matrix,
    /// Node pair driven by the edge factor.
    pub planted_edge: (usize, usize),
    pub subject_labels: Vec<u8>,
}

/// Name of the binary attribute emitted by the generator.
pub const SYNTHETIC_TASK: &str = "attribute";

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a longitudinal cohort whose subject latent drives both modalities.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.nodes;
    let k = cfg.latent_dim;

    let mut baseline = Matrix::zeros(v, v);
    for p in 0..v {
        for q in (p + 1)..v {
            let x = 0.3 + 0.5 * gaussian(&mut rng);
            baseline[(p, q)] = x;
            baseline[(q, p)] = x;
        }
    }
    let planted_edge = (0, 1);
    // Factor j drives a rank-one pattern; one factor also drives the planted edge.
    let mut patterns = Vec::with_capacity(k);
    for j in 0..k {
        let u: Vec<f64> = (0..v).map(|_| gaussian(&mut rng)).collect();
        let mut e = Matrix::from_fn(v, v, |p, q| {
            if p == q {
                0.0
            } else {
                cfg.latent_strength * u[p] * u[q]
            }
        });
        if j == cfg.edge_factor {
            e[(planted_edge.0, planted_edge.1)] += cfg.edge_strength;
            e[(planted_edge.1, planted_edge.0)] += cfg.edge_strength;
        }
        patterns.push(e);
    }
    let mixing = Matrix::from_fn(cfg.cognitive_dim, k, |_, _| gaussian(&mut rng) / (k as f64).sqrt());

    let mut visits_per_subject = Vec::with_capacity(cfg.subjects);
    for (m, &c) in cfg.visit_counts().iter().enumerate() {
        visits_per_subject.extend(std::iter::repeat_n(m + 1, c));
    }
    visits_per_subject.shuffle(&mut rng);

    let width = cfg.subjects.to_string().len().max(3);
    let subjects: Vec<String> = (1..=cfg.subjects).map(|i| format!("s{i:0width$}")).collect();
    let latents = Matrix::from_fn(cfg.subjects, k, |_, _| cfg.subject_signal * gaussian(&mut rng));
    let subject_labels: Vec<u8> = (0..cfg.subjects)
        .map(|s| u8::from(latents[(s, cfg.label_factor)] > cfg.label_threshold))
        .collect();

    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (s, id) in subjects.iter().enumerate() {
        for visit in 1..=visits_per_subject[s] {
            let z: Vec<f64> = (0..k)
                .map(|j| latents[(s, j)] + 0.5 * cfg.noise * gaussian(&mut rng))
                .collect();
            let mut logits = baseline.clone();
            for (pattern, &zj) in patterns.iter().zip(&z) {
                logits.axpy(zj, pattern);
            }
            let mut conn = Matrix::identity(v);
            for p in 0..v {
                for q in (p + 1)..v {
                    let x = logits[(p, q)] + cfg.noise * gaussian(&mut rng);
                    // 2σ(x) − 1, a correlation-valued squashing.
                    let c = (0.5 * x).tanh();
                    conn[(p, q)] = c;
                    conn[(q, p)] = c;
                }
            }
            let signal = mixing.matvec(&z);
            let cognition: Vec<f64> = signal
                .iter()
                .map(|x| cfg.coupling * x + cfg.noise * gaussian(&mut rng))
                .collect();
            records.push(VisitRecord::new(id.clone(), visit as u32, conn, cognition)?);
            labels.push(subject_labels[s]);
        }
    }
    let dataset = Dataset {
        records,
        labels: BTreeMap::from([(SYNTHETIC_TASK.to_string(), labels)]),
    };
    Ok((
        dataset,
        GroundTruth {
            subjects,
            latents,
            mixing,
            planted_edge,
            subject_labels,
        },
    ))
}

const MODEL_MAGIC: &[u8; 8] = b"CGMODEL\0";
const MODEL_END: &[u8; 8] = b"CGEND\0\0\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

struct ModelWriter {
    buf: Vec<u8>,
}

impl ModelWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, m: &Matrix) {
        self.bytes(name.as_bytes());
        self.buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        self.buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for x in m.as_slice() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn vector(&mut self, name: &str, v: &[f64]) {
        self.tensor(name, &Matrix::from_fn(1, v.len(), |_, j| v[j]));
    }
}

struct ModelReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ModelReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.data.len())
            .ok_or_else(|| Error::Format(format!("implausible length {n} at offset {}", self.pos - 8)))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn tensor(&mut self, name: &str) -> Result<Matrix> {
        let got = self.bytes()?;
        if got != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {name:?}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let rows = self.len()?;
        let cols = self.len()?;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.data.len()))
            .ok_or_else(|| Error::Format(format!("tensor {name} has implausible shape {rows}x{cols}")))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let m = self.tensor(name)?;
        if m.rows() != 1 {
            return Err(Error::Format(format!("tensor {name} should be a row vector")));
        }
        Ok(m.into_vec())
    }
}

fn write_stats(w: &mut ModelWriter, prefix: &str, s: &ViewStats) {
    w.vector(&format!("{prefix}.mean"), &s.mean);
    w.vector(&format!("{prefix}.scale"), &s.scale);
    let flags: Vec<f64> = s.constant.iter().map(|&c| f64::from(u8::from(c))).collect();
    w.vector(&format!("{prefix}.constant"), &flags);
}

fn read_stats(r: &mut ModelReader, prefix: &str) -> Result<ViewStats> {
    let mean = r.vector(&format!("{prefix}.mean"))?;
    let scale = r.vector(&format!("{prefix}.scale"))?;
    let constant: Vec<bool> = r.vector(&format!("{prefix}.constant"))?.iter().map(|&x| x != 0.0).collect();
    if scale.len() != mean.len() || constant.len() != mean.len() {
        return Err(Error::Format(format!("{prefix} statistics have inconsistent lengths")));
    }
    Ok(ViewStats { mean, scale, constant })
}

/// Serializes a trained model to the versioned `.cgmodel` layout.
pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut w = ModelWriter { buf: Vec::new() };
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Format(format!("config: {e}")))?;
    w.bytes(&config);
    w.buf.extend_from_slice(&(model.params.layers.len() as u64).to_le_bytes());
    for (i, layer) in model.params.layers.iter().enumerate() {
        w.tensor(&format!("layer{i}.weight"), &layer.weight);
        w.tensor(&format!("layer{i}.attention"), &layer.attention);
    }
    let sol = &model.solution;
    w.tensor("gcca.shared", &sol.shared);
    w.tensor("gcca.brain_loadings", &sol.brain_loadings);
    w.tensor("gcca.cognition_loadings", &sol.cognition_loadings);
    w.vector("gcca.eigenvalues", &sol.eigenvalues);
    w.vector("gcca.ridge", &sol.ridge);
    write_stats(&mut w, "stats.brain", &model.stats.brain);
    write_stats(&mut w, "stats.cognition", &model.stats.cognition);
    let trace = Matrix::from_fn(model.trace.len(), 4, |i, j| {
        let t = &model.trace[i];
        [t.corr, t.ind, t.mul, t.total][j]
    });
    w.tensor("trace", &trace);
    w.buf.extend_from_slice(&(model.training_keys.len() as u64).to_le_bytes());
    for (s, v) in &model.training_keys {
        w.bytes(s.as_bytes());
        w.buf.extend_from_slice(&v.to_le_bytes());
    }
    w.buf.extend_from_slice(MODEL_END);
    Ok(w.buf)
}

pub fn decode_model(data: &[u8]) -> Result<TrainedModel> {
    let mut r = ModelReader { data, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a .cgmodel file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (this build reads {MODEL_FORMAT_VERSION})"
        )));
    }
    let config: TrainConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let n_layers = r.len()?;
    let mut layers = Vec::with_capacity(n_layers.min(16));
    for i in 0..n_layers {
        layers.push(GatLayerParams {
            weight: r.tensor(&format!("layer{i}.weight"))?,
            attention: r.tensor(&format!("layer{i}.attention"))?,
        });
    }
    let solution = GccaSolution {
        shared: r.tensor("gcca.shared")?,
        brain_loadings: r.tensor("gcca.brain_loadings")?,
        cognition_loadings: r.tensor("gcca.cognition_loadings")?,
        eigenvalues: r.vector("gcca.eigenvalues")?,
        ridge: r
            .vector("gcca.ridge")?
            .try_into()
            .map_err(|_| Error::Format("gcca.ridge must hold two values".into()))?,
    };
    let stats = PreprocessStats {
        brain: read_stats(&mut r, "stats.brain")?,
        cognition: read_stats(&mut r, "stats.cognition")?,
    };
    let trace_m = r.tensor("trace")?;
    if trace_m.cols() != 4 {
        return Err(Error::Format("trace must have 4 columns".into()));
    }
    let trace = (0..trace_m.rows())
        .map(|i| LossRecord {
            epoch: i,
            corr: trace_m[(i, 0)],
            ind: trace_m[(i, 1)],
            mul: trace_m[(i, 2)],
            total: trace_m[(i, 3)],
        })
        .collect();
    let n_keys = r.len()?;
    let mut training_keys = Vec::with_capacity(n_keys.min(data.len()));
    for _ in 0..n_keys {
        let s = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("subject id is not UTF-8".into()))?;
        training_keys.push((s, r.u32()?));
    }
    if r.take(8)? != MODEL_END {
        return Err(Error::Format("missing end marker".into()));
    }
    if r.pos != data.len() {
        return Err(Error::Format(format!("{} trailing bytes after end marker", data.len() - r.pos)));
    }
    let params = EncoderParams { layers };
    let model = TrainedModel {
        params,
        solution,
        stats,
        config,
        trace,
        training_keys,
    };
    check_model(&model)?;
    Ok(model)
}

fn check_model(m: &TrainedModel) -> Result<()> {
    let fail = |msg: String| Err(Error::Format(msg));
    let layers = &m.params.layers;
    if layers.is_empty() {
        return fail("model has no encoder layers".into());
    }
    for (i, l) in layers.iter().enumerate() {
        if l.attention.rows() != 1 || l.attention.cols() != 2 * l.weight.cols() {
            return fail(format!("layer {i} attention shape does not match its weight"));
        }
        if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
            return fail(format!("layer {i} input size does not match layer {}", i - 1));
        }
    }
    let r = m.params.output_dim();
    let sol = &m.solution;
    let d_r = sol.shared.rows();
    if sol.brain_loadings.shape() != (r, d_r)
        || sol.cognition_loadings.rows() != m.stats.cognition.dim()
        || sol.cognition_loadings.cols() != d_r
        || m.stats.brain.dim() != r
        || sol.shared.cols() != m.training_keys.len()
    {
        return fail("GCCA solution shapes are inconsistent with the encoder".into());
    }
    Ok(())
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&data).map_err(|e| match e {
        Error::Format(msg) => Error::Validation {
            path: path.to_path_buf(),
            message: format!("model format: {msg}"),
        },
        other => other,
    })
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Structured run configuration, stored as TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub baseline: crate::baselines::BaselineConfig,
    pub evaluation: crate::evaluation::EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(path, format!("run config: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, path)
    }
}

/// One row of the fingerprint CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintRow {
    pub subject_id: String,
    pub visit: u32,
    pub fold: Option<usize>,
    pub split: String,
    pub provenance: String,
    pub values: Vec<f64>,
}

/// `subject_id,visit,fold,split,provenance,f1..fd`.
/// Rows may differ in length (baseline dimensionality can vary by fold);
/// the header covers the longest.
pub fn write_fingerprints_csv(path: &Path, rows: &[FingerprintRow]) -> Result<()> {
    let d = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut header = vec![
        "subject_id".to_string(),
        "visit".into(),
        "fold".into(),
        "split".into(),
        "provenance".into(),
    ];
    header.extend((1..=d).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.subject_id.clone(),
            r.visit.to_string(),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            r.split.clone(),
            r.provenance.clone(),
        ];
        rec.extend(r.values.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_fingerprints_csv(path: &Path) -> Result<Vec<FingerprintRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() < 6 {
            return Err(invalid(path, format!("row {line}: expected at least 6 columns")));
        }
        let parse_err = |what: &str| invalid(path, format!("row {line}: bad {what}"));
        rows.push(FingerprintRow {
            subject_id: rec[0].to_string(),
            visit: rec[1].parse().map_err(|_| parse_err("visit"))?,
            fold: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse().map_err(|_| parse_err("fold"))?)
            },
            split: rec[3].to_string(),
            provenance: rec[4].to_string(),
            values: rec
                .iter()
                .skip(5)
                .map(|f| f.parse::<f64>().map_err(|_| parse_err("fingerprint value")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// `epoch,L_corr,L_ind,L_mul,L_total`.
pub fn write_loss_trace_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,L_corr,L_ind,L_mul,L_total\n");
    for t in trace {
        out.push_str(&format!("{},{},{},{},{}\n", t.epoch, t.corr, t.ind, t.mul, t.total));
    }
    write_atomic(path, out.as_bytes())
}

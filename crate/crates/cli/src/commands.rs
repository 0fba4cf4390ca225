use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use cograca_core::baselines::{baseline_pipeline, BaselineConfig, BaselineKind};
use cograca_core::data::{
    generate_synthetic, load_dataset, load_model, read_fingerprints_csv, save_dataset, save_model, write_atomic,
    write_fingerprints_csv, write_loss_trace_csv, write_matrix_csv, Dataset, FingerprintRow, RunConfig,
};
use cograca_core::evaluation::{
    classify_folds, interpret_components, rank_components, shapley_attribution, shapley_attribution_sampled,
    similarity_analysis_rows, train_mlp, AttributionReport, FoldRepresentation,
};
use cograca_core::gcca::Fingerprint;
use cograca_core::numerics::Matrix;
use cograca_core::pipeline::{compute_fingerprints, cross_validate, make_subject_folds, train_model, FingerprintMode};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{BaselineArg, Command, Common, Evaluate, ModeArg, TrainFlags};
use crate::failure::{Failure, Kind};

pub type Outcome<T> = std::result::Result<T, Failure>;

pub const SEED_ENV: &str = "COGRACA_SEED";

/// What a finished subcommand reports back for its run record.
pub struct Run {
    pub command: String,
    pub out: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub model: Option<String>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Copy)]
enum SeedTarget {
    Synthetic,
    Train,
    Evaluation,
}

fn seed_slot(cfg: &mut RunConfig, target: SeedTarget) -> &mut u64 {
    match target {
        SeedTarget::Synthetic => &mut cfg.synthetic.seed,
        SeedTarget::Train => &mut cfg.train.seed,
        SeedTarget::Evaluation => &mut cfg.evaluation.seed,
    }
}

fn resolve_config(common: &Common, target: SeedTarget) -> Outcome<RunConfig> {
    if common.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(text) = std::env::var(SEED_ENV) {
        let seed = text
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?;
        *seed_slot(&mut cfg, target) = seed;
    }
    if let Some(seed) = common.seed {
        *seed_slot(&mut cfg, target) = seed;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags) {
    if let Some(l) = flags.lambda1 {
        cfg.train.lambda_ind = l;
    }
    if let Some(l) = flags.lambda2 {
        cfg.train.lambda_mul = l;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(Kind::Invariant, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Outcome<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::new(Kind::Io, format!("{}: {e}", path.display())))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::new(Kind::Io, e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn fingerprint_rows(
    dataset: &Dataset,
    idx: &[usize],
    fps: &[Fingerprint],
    fold: Option<usize>,
    split: &str,
) -> Vec<FingerprintRow> {
    idx.iter()
        .zip(fps)
        .map(|(&i, fp)| FingerprintRow {
            subject_id: dataset.records[i].subject_id.clone(),
            visit: dataset.records[i].visit,
            fold,
            split: split.to_string(),
            provenance: fp.provenance.to_string(),
            values: fp.values.clone(),
        })
        .collect()
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn run(command: &Command) -> Outcome<Run> {
    match command {
        Command::Synth { common } => synth(common),
        Command::Train { common, data, train } => train_cmd(common, data, train),
        Command::Fingerprint {
            common,
            data,
            model,
            mode,
            train,
        } => fingerprint(common, data, model.as_deref(), *mode, train),
        Command::Baseline { common, data, kind } => baseline(common, data, *kind),
        Command::Evaluate(e) => match e {
            Evaluate::Similarity {
                common,
                fingerprints,
                bins,
            } => similarity(common, fingerprints, *bins),
            Evaluate::Classify {
                common,
                fingerprints,
                data,
                task,
                repeats,
            } => classify(common, fingerprints, data, task, *repeats),
            Evaluate::Attribute {
                common,
                fingerprints,
                data,
                task,
                samples,
            } => attribute(common, fingerprints, data, task, *samples),
            Evaluate::Interpret {
                common,
                model,
                data,
                components,
            } => interpret(common, model, data, components),
        },
        Command::Report { out, runs } => report(out, runs),
    }
}

fn synth(common: &Common) -> Outcome<Run> {
    let config = resolve_config(common, SeedTarget::Synthetic)?;
    let (dataset, truth) = generate_synthetic(&config.synthetic)?;
    let out = &common.out;
    save_dataset(&dataset, out)?;
    let truth_path = out.join("ground_truth.json");
    write_json(
        &truth_path,
        &json!({
            "subjects": truth.subjects,
            "latents": matrix_rows(&truth.latents),
            "mixing": matrix_rows(&truth.mixing),
            "planted_edge": [truth.planted_edge.0, truth.planted_edge.1],
            "subject_labels": truth.subject_labels,
        }),
    )?;
    let mut outputs = vec![out.join("manifest.csv"), out.join("connectivity"), truth_path];
    if !dataset.labels.is_empty() {
        outputs.push(out.join("labels.csv"));
    }
    Ok(Run {
        command: "synth".into(),
        out: out.clone(),
        seed: config.synthetic.seed,
        config,
        model: None,
        outputs,
    })
}

fn train_cmd(common: &Common, data: &Path, flags: &TrainFlags) -> Outcome<Run> {
    let mut config = resolve_config(common, SeedTarget::Train)?;
    apply_train_flags(&mut config, flags);
    let dataset = load_dataset(data)?;
    let model = train_model(&dataset.records, &config.train)?;
    let out = &common.out;
    let model_path = out.join("model.cgmodel");
    let trace_path = out.join("loss_trace.csv");
    save_model(&model, &model_path)?;
    write_loss_trace_csv(&trace_path, &model.trace)?;
    Ok(Run {
        command: "train".into(),
        out: out.clone(),
        seed: config.train.seed,
        model: Some(config.train.model_name().to_string()),
        config,
        outputs: vec![model_path, trace_path],
    })
}

fn fingerprint(common: &Common, data: &Path, model: Option<&Path>, mode: ModeArg, flags: &TrainFlags) -> Outcome<Run> {
    let mut config = resolve_config(common, SeedTarget::Train)?;
    apply_train_flags(&mut config, flags);
    let dataset = load_dataset(data)?;
    let mode = FingerprintMode::from(mode);
    let out = &common.out;
    let fp_path = out.join("fingerprints.csv");
    let mut outputs = vec![fp_path.clone()];
    let mut rows = Vec::new();
    let name = match model {
        Some(path) => {
            let model = load_model(path)?;
            let fps = compute_fingerprints(&model, &dataset.records, mode)?;
            let all: Vec<usize> = (0..dataset.records.len()).collect();
            rows.extend(fingerprint_rows(&dataset, &all, &fps, None, "all"));
            model.config.model_name()
        }
        None => {
            let folds = cross_validate(&dataset.records, &config.train, mode, common.jobs)?;
            for f in &folds {
                rows.extend(fingerprint_rows(&dataset, &f.train, &f.train_fingerprints, Some(f.fold), "train"));
                rows.extend(fingerprint_rows(&dataset, &f.test, &f.test_fingerprints, Some(f.fold), "test"));
                let model_path = out.join(format!("fold_{}.cgmodel", f.fold));
                let trace_path = out.join(format!("loss_trace_fold_{}.csv", f.fold));
                save_model(&f.model, &model_path)?;
                write_loss_trace_csv(&trace_path, &f.model.trace)?;
                outputs.push(model_path);
                outputs.push(trace_path);
            }
            config.train.model_name()
        }
    };
    write_fingerprints_csv(&fp_path, &rows)?;
    Ok(Run {
        command: "fingerprint".into(),
        out: out.clone(),
        seed: config.train.seed,
        config,
        model: Some(name.to_string()),
        outputs,
    })
}

fn baseline(common: &Common, data: &Path, kind: BaselineArg) -> Outcome<Run> {
    let config = resolve_config(common, SeedTarget::Train)?;
    config.train.validate()?;
    let dataset = load_dataset(data)?;
    let kind = BaselineKind::from(kind);
    let folds = make_subject_folds(&dataset.subject_ids(), config.train.folds, config.train.seed)?;
    let cfg: BaselineConfig = config.baseline;
    let result = baseline_pipeline(kind, &dataset.records, &folds, &cfg)?;
    let provenance = kind.to_string();
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (f, fold) in result.iter().enumerate() {
        for (split, idx, repr) in [("train", &fold.train, &fold.train_repr), ("test", &fold.test, &fold.test_repr)] {
            for (k, &i) in idx.iter().enumerate() {
                rows.push(FingerprintRow {
                    subject_id: dataset.records[i].subject_id.clone(),
                    visit: dataset.records[i].visit,
                    fold: Some(f),
                    split: split.into(),
                    provenance: provenance.clone(),
                    values: repr.row(k).to_vec(),
                });
            }
        }
        notes.extend(fold.notes.iter().cloned());
    }
    let out = &common.out;
    let fp_path = out.join("fingerprints.csv");
    let notes_path = out.join("baseline_notes.json");
    write_fingerprints_csv(&fp_path, &rows)?;
    write_json(&notes_path, &json!({ "baseline": provenance, "notes": notes }))?;
    Ok(Run {
        command: "baseline".into(),
        out: out.clone(),
        seed: config.train.seed,
        config,
        model: Some(provenance),
        outputs: vec![fp_path, notes_path],
    })
}

/// Fingerprint rows used for comparisons: test rows when the file holds
/// out-of-fold fingerprints, every row otherwise.
fn comparison_rows(rows: &[FingerprintRow]) -> Vec<&FingerprintRow> {
    if rows.iter().any(|r| r.split == "test") {
        rows.iter().filter(|r| r.split == "test").collect()
    } else {
        rows.iter().collect()
    }
}

fn values_matrix(rows: &[&FingerprintRow], path: &Path) -> Outcome<Matrix> {
    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    Matrix::from_rows(&values)
        .map_err(|_| Failure::invalid(format!("{}: fingerprint rows have different lengths", path.display())))
}

fn similarity(common: &Common, fingerprints: &Path, bins: Option<usize>) -> Outcome<Run> {
    let mut config = resolve_config(common, SeedTarget::Evaluation)?;
    if let Some(b) = bins {
        config.evaluation.histogram_bins = b;
    }
    let all = read_fingerprints_csv(fingerprints)?;
    let rows = comparison_rows(&all);
    if rows.is_empty() {
        return Err(Failure::invalid(format!("{}: no fingerprint rows", fingerprints.display())));
    }
    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let subjects: Vec<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    let blocks: Option<Vec<usize>> = rows.iter().map(|r| r.fold).collect();
    let rep = similarity_analysis_rows(&values, &subjects, blocks.as_deref(), config.evaluation.histogram_bins)?;

    let out = &common.out;
    let metrics_path = out.join("similarity.json");
    let hist_path = out.join("similarity_histogram.csv");
    let matrix_path = out.join("similarity_matrix.csv");
    let mean = |xs: &[f64]| if xs.is_empty() { None } else { Some(xs.iter().sum::<f64>() / xs.len() as f64) };
    write_json(
        &metrics_path,
        &json!({
            "fingerprints": fingerprints.display().to_string(),
            "visits": rows.len(),
            "blocked_by_fold": blocks.is_some(),
            "intra_pairs": rep.intra.len(),
            "inter_pairs": rep.inter.len(),
            "intra_mean": mean(&rep.intra),
            "inter_mean": mean(&rep.inter),
            "wasserstein": rep.wasserstein,
            "mann_whitney_u": rep.mann_whitney.map(|m| m.u),
            "mann_whitney_p": rep.mann_whitney.map(|m| m.p_value),
            "inter_only": rep.inter_only,
        }),
    )?;
    let mut hist = String::from("bin_low,bin_high,intra,inter\n");
    for b in 0..rep.histogram.intra.len() {
        hist.push_str(&format!(
            "{},{},{},{}\n",
            rep.histogram.edges[b],
            rep.histogram.edges[b + 1],
            rep.histogram.intra[b],
            rep.histogram.inter[b]
        ));
    }
    write_atomic(&hist_path, hist.as_bytes())?;
    write_matrix_csv(&matrix_path, &rep.matrix)?;
    Ok(Run {
        command: "evaluate similarity".into(),
        out: out.clone(),
        seed: config.evaluation.seed,
        config,
        model: None,
        outputs: vec![metrics_path, hist_path, matrix_path],
    })
}

/// Out-of-fold fingerprints regrouped by fold, rows mapped to dataset indices.
fn fold_representations(rows: &[FingerprintRow], dataset: &Dataset, path: &Path) -> Outcome<Vec<FoldRepresentation>> {
    let index: HashMap<(&str, u32), usize> =
        dataset.records.iter().enumerate().map(|(i, r)| (r.key(), i)).collect();
    let mut grouped: BTreeMap<usize, (Vec<&FingerprintRow>, Vec<&FingerprintRow>)> = BTreeMap::new();
    for r in rows {
        let fold = r.fold.ok_or_else(|| {
            Failure::invalid(format!(
                "{}: rows without a fold; classification needs out-of-fold fingerprints \
                 (run `fingerprint` without --model, or `baseline`)",
                path.display()
            ))
        })?;
        let entry = grouped.entry(fold).or_default();
        match r.split.as_str() {
            "train" => entry.0.push(r),
            "test" => entry.1.push(r),
            other => return Err(Failure::invalid(format!("{}: unknown split {other:?}", path.display()))),
        }
    }
    grouped
        .into_values()
        .map(|(train, test)| {
            let lookup = |rs: &[&FingerprintRow]| -> Outcome<Vec<usize>> {
                rs.iter()
                    .map(|r| {
                        index.get(&(r.subject_id.as_str(), r.visit)).copied().ok_or_else(|| {
                            Failure::invalid(format!(
                                "{}: visit {} of subject {} is not in the dataset",
                                path.display(),
                                r.visit,
                                r.subject_id
                            ))
                        })
                    })
                    .collect()
            };
            Ok(FoldRepresentation {
                train: lookup(&train)?,
                test: lookup(&test)?,
                train_x: values_matrix(&train, path)?,
                test_x: values_matrix(&test, path)?,
            })
        })
        .collect()
}

fn classify(common: &Common, fingerprints: &Path, data: &Path, task: &str, repeats: Option<usize>) -> Outcome<Run> {
    let mut config = resolve_config(common, SeedTarget::Evaluation)?;
    if let Some(r) = repeats {
        config.evaluation.repeats = r;
    }
    let dataset = load_dataset(data)?;
    let labels = dataset.labels_for(task)?;
    let rows = read_fingerprints_csv(fingerprints)?;
    let folds = fold_representations(&rows, &dataset, fingerprints)?;
    let ev = &config.evaluation;
    let summary = classify_folds(&folds, labels, &ev.mlp, ev.repeats, ev.seed, common.jobs)?;
    let out = &common.out;
    let metrics_path = out.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({
            "fingerprints": fingerprints.display().to_string(),
            "task": task,
            "repeats": ev.repeats,
            "bacc_mean": summary.bacc_mean,
            "bacc_sd": summary.bacc_sd,
            "bacc": summary.bacc,
            "seeds": summary.seeds,
        }),
    )?;
    Ok(Run {
        command: "evaluate classify".into(),
        out: out.clone(),
        seed: config.evaluation.seed,
        config,
        model: None,
        outputs: vec![metrics_path],
    })
}

fn attribute(common: &Common, fingerprints: &Path, data: &Path, task: &str, samples: Option<usize>) -> Outcome<Run> {
    let mut config = resolve_config(common, SeedTarget::Evaluation)?;
    if let Some(s) = samples {
        config.evaluation.shapley_samples = s;
    }
    let dataset = load_dataset(data)?;
    let labels = dataset.labels_for(task)?;
    let rows = read_fingerprints_csv(fingerprints)?;
    let folds = fold_representations(&rows, &dataset, fingerprints)?;
    let ev = &config.evaluation;
    let per_fold = cograca_core::pipeline::parallel_map(folds.len(), common.jobs, |f| {
        let fold = &folds[f];
        let y: Vec<u8> = fold.train.iter().map(|&i| labels[i]).collect();
        let clf = train_mlp(&fold.train_x, &y, &ev.mlp, ev.seed)?;
        let baseline = fold.train_x.column_means();
        (0..fold.test.len())
            .map(|k| {
                let x = fold.test_x.row(k);
                if ev.shapley_samples == 0 {
                    shapley_attribution(&clf, x, &baseline)
                } else {
                    shapley_attribution_sampled(&clf, x, &baseline, ev.shapley_samples, ev.seed)
                }
            })
            .collect::<cograca_core::error::Result<Vec<AttributionReport>>>()
    })?;

    let d = folds.first().map_or(0, |f| f.test_x.cols());
    let mut text = String::from("subject_id,visit,fold,base_value,full_value");
    for k in 1..=d {
        text.push_str(&format!(",phi_{k}"));
    }
    text.push('\n');
    let mut reports = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        for (k, &i) in fold.test.iter().enumerate() {
            let r = &per_fold[f][k];
            let rec = &dataset.records[i];
            text.push_str(&format!("{},{},{f},{},{}", rec.subject_id, rec.visit, r.base_value, r.full_value));
            for v in &r.values {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        reports.extend(per_fold[f].iter().cloned());
    }
    let ranking = rank_components(&reports);
    let mean_abs: Vec<f64> = (0..d)
        .map(|j| reports.iter().map(|r| r.values[j].abs()).sum::<f64>() / reports.len().max(1) as f64)
        .collect();
    let out = &common.out;
    let table_path = out.join("attribution.csv");
    let summary_path = out.join("attribution_summary.json");
    write_atomic(&table_path, text.as_bytes())?;
    write_json(
        &summary_path,
        &json!({
            "fingerprints": fingerprints.display().to_string(),
            "task": task,
            "method": if ev.shapley_samples == 0 { "exact" } else { "monte-carlo" },
            "visits": reports.len(),
            "mean_abs_shapley": mean_abs,
            "component_ranking": ranking,
        }),
    )?;
    Ok(Run {
        command: "evaluate attribute".into(),
        out: out.clone(),
        seed: config.evaluation.seed,
        config,
        model: None,
        outputs: vec![table_path, summary_path],
    })
}

fn interpret(common: &Common, model_path: &Path, data: &Path, components: &[usize]) -> Outcome<Run> {
    let config = resolve_config(common, SeedTarget::Evaluation)?;
    let model = load_model(model_path)?;
    let dataset = load_dataset(data)?;
    let components: Vec<usize> = if components.is_empty() {
        (0..config.evaluation.top_components.min(model.solution.components())).collect()
    } else {
        components.to_vec()
    };
    let tables = interpret_components(&model, &dataset.records, &components)?;
    let out = &common.out;
    let cog_path = out.join("cognitive_loadings.csv");
    let edge_path = out.join("edge_importance.csv");
    let att_path = out.join("mean_attention.csv");
    write_rows_csv(&cog_path, &tables.cognitive)?;
    write_rows_csv(&edge_path, &tables.edges)?;
    write_matrix_csv(&att_path, &tables.mean_attention)?;
    Ok(Run {
        command: "evaluate interpret".into(),
        out: out.clone(),
        seed: config.evaluation.seed,
        config,
        model: Some(model.config.model_name().to_string()),
        outputs: vec![cog_path, edge_path, att_path],
    })
}

fn read_json(path: &Path) -> Outcome<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| cograca_core::error::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn report(out: &Path, runs: &[PathBuf]) -> Outcome<Run> {
    let mut entries = Vec::new();
    let mut csv_text = String::from("run,source,metric,value\n");
    for dir in runs {
        let record = read_json(&dir.join("run_record.json"))?;
        let mut metrics = serde_json::Map::new();
        let listing = std::fs::read_dir(dir).map_err(|e| cograca_core::error::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let mut names: Vec<String> = listing
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json") && n != "run_record.json")
            .collect();
        names.sort();
        for name in names {
            let value = read_json(&dir.join(&name))?;
            let stem = name.trim_end_matches(".json").to_string();
            if let Value::Object(map) = &value {
                for (k, v) in map {
                    if let Some(x) = v.as_f64() {
                        csv_text.push_str(&format!("{},{stem},{k},{x}\n", dir.display()));
                    }
                }
            }
            metrics.insert(stem, value);
        }
        entries.push(json!({
            "run": dir.display().to_string(),
            "command": record.get("command").cloned().unwrap_or(Value::Null),
            "model": record.get("model").cloned().unwrap_or(Value::Null),
            "seed": record.get("seed").cloned().unwrap_or(Value::Null),
            "metrics": metrics,
        }));
    }
    let json_path = out.join("report.json");
    let csv_path = out.join("report.csv");
    write_json(&json_path, &json!({ "runs": entries }))?;
    write_atomic(&csv_path, csv_text.as_bytes())?;
    let config = RunConfig::default();
    Ok(Run {
        command: "report".into(),
        out: out.to_path_buf(),
        seed: config.evaluation.seed,
        config,
        model: None,
        outputs: vec![json_path, csv_path],
    })
}

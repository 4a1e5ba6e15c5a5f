//! End-to-end runs that read a configuration, train or explain, and write
//! every output file. The command-line tool is a thin wrapper over these.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, LagFilterMode};
use crate::error::{Error, Result};
use crate::explain::{self, LogisticConfig};
use crate::metrics::{self, MeanStd};
use crate::model::{InputMode, Model};
use crate::signal::{self, TimeSeriesMatrix};
use crate::tensor::ParameterStore;
use crate::train::{self, CvRun, ResultRow};

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads the manifest's subjects and checks they share one node count.
pub fn load_subjects(cfg: &ExperimentConfig) -> Result<Vec<TimeSeriesMatrix>> {
    let subjects = signal::load_dataset(&cfg.manifest)?;
    let Some(first) = subjects.first() else {
        return Err(Error::Data {
            path: cfg.manifest.clone(),
            message: "manifest lists no subjects".into(),
        });
    };
    if let Some(s) = subjects.iter().find(|s| s.nodes() != first.nodes()) {
        return Err(Error::Data {
            path: cfg.manifest.clone(),
            message: format!(
                "subject {} has {} nodes but {} has {}",
                s.subject_id,
                s.nodes(),
                first.subject_id,
                first.nodes()
            ),
        });
    }
    Ok(subjects)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub accuracy: MeanStd,
    pub roc_auc: MeanStd,
    pub fold_accuracy: Vec<f64>,
    pub fold_roc_auc: Vec<f64>,
    /// Windows per subject seen by a graphcorr variant.
    pub windows: Option<usize>,
    pub mean_edges: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedTest {
    pub variant: String,
    pub reference: String,
    pub metric: String,
    pub p_two_sided: Option<f64>,
    pub p_greater: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub variants: Vec<VariantSummary>,
    pub tests: Vec<PairedTest>,
}

impl RunSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "model: {}", self.model).unwrap();
        for v in &self.variants {
            write!(s, "{}: accuracy {}, roc auc {}", v.variant, v.accuracy, v.roc_auc).unwrap();
            if let Some(w) = v.windows {
                write!(s, ", windows {w}").unwrap();
            }
            writeln!(s, ", mean directed edges {:.1}", v.mean_edges).unwrap();
        }
        for t in &self.tests {
            match (t.p_two_sided, t.p_greater) {
                (Some(p), Some(q)) => writeln!(
                    s,
                    "wilcoxon {} vs {} ({}): two-sided p = {p:.5}, one-sided p = {q:.5}",
                    t.variant, t.reference, t.metric
                ),
                _ => writeln!(
                    s,
                    "wilcoxon {} vs {} ({}): {}",
                    t.variant,
                    t.reference,
                    t.metric,
                    t.note.as_deref().unwrap_or("not computed")
                ),
            }
            .unwrap();
        }
        s
    }
}

/// Trained variant with its per-fold results.
pub struct VariantRun {
    pub config: ExperimentConfig,
    pub run: CvRun,
    pub summary: VariantSummary,
}

/// Cross-validates one configuration on already loaded subjects.
pub fn run_variant(cfg: &ExperimentConfig, subjects: &[TimeSeriesMatrix]) -> Result<VariantRun> {
    let nodes = subjects
        .first()
        .map(TimeSeriesMatrix::nodes)
        .ok_or_else(|| Error::Contract("no subjects".into()))?;
    let model = Model::new(cfg.model_config(nodes))?;
    let feats = train::prepare_all(&model, subjects)?;
    let name = cfg.variant_name();
    log::info!("cross-validating {name} on {} subjects", feats.len());
    let run = train::run_cv(&model, &feats, &cfg.train_config(), &cfg.cv_plan())?;
    let summary = VariantSummary {
        variant: name,
        accuracy: run.accuracy,
        roc_auc: run.roc_auc,
        fold_accuracy: run.accuracies(),
        fold_roc_auc: run.roc_aucs(),
        windows: feats[0].windowed.as_ref().map(|w| w.window_count()),
        mean_edges: feats.iter().map(|f| f.topology.edge_count() as f64).sum::<f64>() / feats.len() as f64,
    };
    Ok(VariantRun {
        config: cfg.clone(),
        run,
        summary,
    })
}

/// Signed-rank comparison of `a` against `b` on one metric; an all-zero
/// difference is recorded rather than raised.
pub fn paired_test(a: &VariantSummary, b: &VariantSummary, metric: &str) -> Result<PairedTest> {
    let (x, y) = match metric {
        "accuracy" => (&a.fold_accuracy, &b.fold_accuracy),
        _ => (&a.fold_roc_auc, &b.fold_roc_auc),
    };
    let base = PairedTest {
        variant: a.variant.clone(),
        reference: b.variant.clone(),
        metric: metric.into(),
        p_two_sided: None,
        p_greater: None,
        note: None,
    };
    match metrics::wilcoxon_signed_rank(x, y) {
        Ok(t) => Ok(PairedTest {
            p_two_sided: Some(t.p_two_sided),
            p_greater: Some(t.p_greater),
            ..base
        }),
        Err(e @ (Error::DegenerateTest(_) | Error::Contract(_))) => Ok(PairedTest {
            note: Some(e.to_string()),
            ..base
        }),
        Err(e) => Err(e),
    }
}

fn write_variant_outputs(out: &Path, v: &VariantRun) -> Result<()> {
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    for f in &v.run.folds {
        f.params
            .save(&ckpt_dir.join(format!("{}_fold{}.ckpt", v.summary.variant, f.fold)))?;
    }
    let mut preds: Vec<_> = v.run.folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    preds.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    train::write_predictions_csv(&out.join(format!("predictions_{}.csv", v.summary.variant)), &preds)
}

fn write_summary(out: &Path, summary: &RunSummary) -> Result<()> {
    write_file(&out.join("summary.txt"), &summary.to_text())?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    write_file(&out.join("summary.json"), &json)
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory given (set output_dir or pass --out)".into()))
}

/// Cross-validates the configured model, plus the static-FC baseline on
/// the same folds when `baseline` is set, and writes `results.csv`,
/// per-variant predictions and checkpoints, `summary.{txt,json}` and
/// `resolved_config.json`.
pub fn train_eval(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let out = output_dir(cfg, out)?;
    create_dir(&out)?;
    write_file(&out.join("resolved_config.json"), &cfg.resolved().to_json_pretty())?;
    let subjects = load_subjects(cfg)?;
    let mut configs = Vec::new();
    if cfg.input_mode == InputMode::Graphcorr && cfg.baseline {
        configs.push(cfg.vanilla());
    }
    configs.push(cfg.clone());
    run_and_report(&configs, &subjects, &out)
}

fn run_and_report(configs: &[ExperimentConfig], subjects: &[TimeSeriesMatrix], out: &Path) -> Result<RunSummary> {
    let model_name = format!("{:?}", configs[0].model).to_lowercase();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut variants = Vec::new();
    for c in configs {
        let v = run_variant(c, subjects)?;
        write_variant_outputs(out, &v)?;
        rows.extend(train::result_rows(&model_name, &v.summary.variant, &v.run));
        variants.push(v.summary);
    }
    train::write_results_csv(&out.join("results.csv"), &rows)?;
    let mut tests = Vec::new();
    if let Some(reference) = variants.iter().find(|v| v.variant == "vanilla").cloned() {
        for v in variants.iter().filter(|v| v.variant != "vanilla") {
            tests.push(paired_test(v, &reference, "accuracy")?);
            tests.push(paired_test(v, &reference, "roc_auc")?);
        }
    }
    let summary = RunSummary {
        model: model_name,
        variants,
        tests,
    };
    write_summary(out, &summary)?;
    Ok(summary)
}

/// The full model and its three single-component ablations.
pub fn ablation_configs(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let full = ExperimentConfig {
        input_mode: InputMode::Graphcorr,
        node_embedder: true,
        lag_filter: LagFilterMode::Full,
        windowing: true,
        ..cfg.clone()
    };
    vec![
        full.clone(),
        ExperimentConfig {
            lag_filter: LagFilterMode::ZeroLagOnly,
            ..full.clone()
        },
        ExperimentConfig {
            node_embedder: false,
            ..full.clone()
        },
        ExperimentConfig {
            windowing: false,
            ..full
        },
    ]
}

/// Runs the ablation sweep (plus the baseline when enabled) and writes
/// `ablation.csv` alongside the usual outputs.
pub fn ablate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let out = output_dir(cfg, out)?;
    create_dir(&out)?;
    write_file(&out.join("resolved_config.json"), &cfg.resolved().to_json_pretty())?;
    let subjects = load_subjects(cfg)?;
    let mut configs = ablation_configs(cfg);
    if cfg.baseline {
        configs.insert(0, cfg.vanilla());
    }
    let mut summary = run_and_report(&configs, &subjects, &out)?;
    let full = summary.variant("graphcorr").cloned().expect("full variant ran");
    for v in summary.variants.iter().filter(|v| v.variant.starts_with("graphcorr-")) {
        summary.tests.push(paired_test(&full, v, "accuracy")?);
    }
    write_summary(&out, &summary)?;
    let mut csv = String::from("variant,accuracy_mean,accuracy_std,roc_auc_mean,roc_auc_std,windows\n");
    for v in &summary.variants {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            v.variant,
            v.accuracy.mean,
            v.accuracy.std,
            v.roc_auc.mean,
            v.roc_auc.std,
            v.windows.map_or(String::new(), |w| w.to_string())
        )
        .unwrap();
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainSubject {
    pub subject_id: String,
    pub label: usize,
    pub predicted_class: usize,
    pub w_star: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainSummary {
    pub subjects: Vec<ExplainSubject>,
    pub logistic: Option<explain::LogisticFit>,
}

/// Loads a checkpoint and checks it matches the parameters `model` would
/// create.
pub fn load_checkpoint(model: &Model, path: &Path) -> Result<ParameterStore> {
    let loaded = ParameterStore::load(path)?;
    let diff = model.init_params(0)?.compatibility_diff(&loaded);
    if !diff.is_empty() {
        return Err(Error::Compatibility(diff));
    }
    Ok(loaded)
}

/// Saliency reports for the chosen subjects (all when `ids` is empty),
/// group scores when a group map is configured, and for graphcorr models a
/// logistic fit on the top frames of each subject's most salient window.
pub fn explain(cfg: &ExperimentConfig, checkpoint: &Path, ids: &[String], out: Option<&Path>) -> Result<ExplainSummary> {
    cfg.validate()?;
    let out = output_dir(cfg, out)?;
    create_dir(&out)?;
    write_file(&out.join("resolved_config.json"), &cfg.resolved().to_json_pretty())?;
    let subjects = load_subjects(cfg)?;
    let chosen: Vec<&TimeSeriesMatrix> = if ids.is_empty() {
        subjects.iter().collect()
    } else {
        ids.iter()
            .map(|id| {
                subjects.iter().find(|s| &s.subject_id == id).ok_or_else(|| Error::Data {
                    path: cfg.manifest.clone(),
                    message: format!("subject `{id}` is not in the manifest"),
                })
            })
            .collect::<Result<_>>()?
    };
    let model = Model::new(cfg.model_config(subjects[0].nodes()))?;
    let params = load_checkpoint(&model, checkpoint)?;
    let groups = cfg.group_map.as_deref().map(explain::read_group_map).transpose()?;
    let augmented = cfg.input_mode == InputMode::Graphcorr;

    let mut rows = Vec::new();
    let mut group_csv = String::from("subject_id,group_name,hemisphere,nodes,mean_score\n");
    let mut windows = Vec::new();
    for ts in &chosen {
        let feat = model.prepare(ts)?;
        let report = explain::saliency(&model, &params, &feat)?;
        let names: Vec<String> = match &ts.roi_names {
            Some(n) => n.clone(),
            None => (0..ts.nodes()).map(|i| format!("node{i}")).collect(),
        };
        explain::write_report(&out, &ts.subject_id, &report, &names)?;
        if let Some(g) = &groups {
            for s in explain::group_saliency(&report.roi_scores, g)? {
                writeln!(group_csv, "{},{},{},{},{}", ts.subject_id, s.group, s.hemisphere, s.nodes, s.mean_score).unwrap();
            }
        }
        let w_star = if augmented { Some(report.w_star()?) } else { None };
        if let Some(w) = w_star {
            windows.push(if cfg.windowing {
                (w * cfg.stride, cfg.window_size)
            } else {
                (0, ts.frames())
            });
        }
        rows.push(ExplainSubject {
            subject_id: ts.subject_id.clone(),
            label: ts.label,
            predicted_class: report.predicted_class,
            w_star,
        });
    }
    let mut csv = String::from("subject_id,label,predicted,w_star\n");
    for r in &rows {
        let w = r.w_star.map_or(String::new(), |w| w.to_string());
        writeln!(csv, "{},{},{},{w}", r.subject_id, r.label, r.predicted_class).unwrap();
    }
    write_file(&out.join("saliency_subjects.csv"), &csv)?;
    if groups.is_some() {
        write_file(&out.join("group_scores.csv"), &group_csv)?;
    }
    let logistic = if augmented {
        let owned: Vec<TimeSeriesMatrix> = chosen.iter().map(|s| (*s).clone()).collect();
        let fit = explain::fit_logistic(
            &owned,
            &windows,
            cfg.logistic_frames.unwrap_or(5),
            &LogisticConfig::default(),
        )?;
        let mut csv = String::from("node_index,weight\n");
        for (i, w) in fit.weights.iter().enumerate() {
            writeln!(csv, "{i},{w}").unwrap();
        }
        writeln!(csv, "bias,{}", fit.bias).unwrap();
        write_file(&out.join("logistic_weights.csv"), &csv)?;
        Some(fit)
    } else {
        None
    };
    let summary = ExplainSummary { subjects: rows, logistic };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_file(&out.join("explain_summary.json"), &json)?;
    Ok(summary)
}

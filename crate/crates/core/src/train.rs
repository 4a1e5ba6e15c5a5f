//! Cross-validation splits, the training loop and result files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MeanStd};
use crate::model::{self, ClassifierKind, Model, SubjectFeatures};
use crate::rng;
use crate::signal::TimeSeriesMatrix;
use crate::tensor::{AdamConfig, ParameterStore, Tape};

/// Outer folds provide the test sets; inside each outer-training set one
/// fixed, stratified validation split is held out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub outer_folds: usize,
    pub inner_folds: usize,
    /// Validation share of the whole dataset; the test share is
    /// `1 / outer_folds` and training takes the rest.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            outer_folds: 5,
            inner_folds: 1,
            val_fraction: 0.10,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.outer_folds < 2 {
            return Err(Error::Config("at least two outer folds are required".into()));
        }
        if self.inner_folds != 1 {
            return Err(Error::Config(format!(
                "only a single inner validation split is supported, got inner_folds = {}",
                self.inner_folds
            )));
        }
        let test = 1.0 / self.outer_folds as f64;
        if !(self.val_fraction > 0.0 && self.val_fraction + test < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} leaves no training data",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified fold assignment over subject indices.
///
/// Each class is shuffled on its own stream and dealt round-robin into
/// folds, continuing the deal across classes so fold sizes stay within one
/// subject of each other. Every split must contain both classes.
pub fn make_splits(labels: &[usize], plan: &CvPlan) -> Result<Vec<FoldSplit>> {
    plan.validate()?;
    let k = plan.outer_folds;
    if labels.len() < 5 * k {
        return Err(Error::Stratification(format!(
            "{} subjects are too few for {k} folds (need at least {})",
            labels.len(),
            5 * k
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut fold_of = vec![0usize; labels.len()];
    let mut dealt = 0usize;
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng::stream(plan.seed, "splits", class as u64));
        for i in members {
            fold_of[i] = dealt % k;
            dealt += 1;
        }
    }
    let val_share = plan.val_fraction / (1.0 - 1.0 / k as f64);
    let class_sizes: Vec<usize> = (0..classes).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let mut splits = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == fold).collect();
        let rest: Vec<Vec<usize>> = (0..classes)
            .map(|class| {
                let mut members: Vec<usize> = (0..labels.len())
                    .filter(|&i| fold_of[i] != fold && labels[i] == class)
                    .collect();
                members.shuffle(&mut rng::stream(plan.seed, "validation", (fold * classes + class) as u64));
                members
            })
            .collect();
        let rest_sizes: Vec<usize> = rest.iter().map(Vec::len).collect();
        let quotas = validation_quotas(&class_sizes, &rest_sizes, val_share);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (members, n_val) in rest.iter().zip(quotas) {
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        for (name, set) in [("train", &train), ("validation", &val), ("test", &test)] {
            let present = |c: usize| set.iter().any(|&i| labels[i] == c);
            if !(present(0) && present(1)) {
                return Err(Error::Stratification(format!(
                    "fold {fold} {name} split lacks one of the classes"
                )));
            }
        }
        splits.push(FoldSplit { fold, train, val, test });
    }
    Ok(splits)
}

/// Per-class validation counts for one fold.
///
/// The test fold leaves the remaining subjects slightly off the global
/// class ratio; each class's quota takes half of that offset so training
/// and validation both stay within one subject of the global ratio.
/// Quotas are apportioned by largest remainder, ties to the lower class.
fn validation_quotas(class_sizes: &[usize], rest_sizes: &[usize], val_share: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let n_rest: usize = rest_sizes.iter().sum();
    let n_val = (n_rest as f64 * val_share).round() as usize;
    let quota: Vec<f64> = class_sizes
        .iter()
        .zip(rest_sizes)
        .map(|(&size, &rest)| {
            let p = size as f64 / total as f64;
            let offset = rest as f64 - n_rest as f64 * p;
            (n_val as f64 * p + offset / 2.0).clamp(0.0, rest as f64)
        })
        .collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())).then(a.cmp(&b)));
    let mut missing = n_val.saturating_sub(counts.iter().sum());
    for c in order.into_iter().cycle().take(2 * quota.len()) {
        if missing == 0 {
            break;
        }
        if counts[c] < rest_sizes[c] {
            counts[c] += 1;
            missing -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    /// Published schedule for each downstream model.
    pub fn defaults_for(kind: ClassifierKind) -> Self {
        let adam = AdamConfig::default();
        let (lr, epochs) = match kind {
            ClassifierKind::Sage => (3e-3, 20),
            ClassifierKind::Gcn => (5e-3, 30),
        };
        Self {
            epochs,
            batch_size: 12,
            lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ParameterStore,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub label: usize,
    pub pred: usize,
    pub logits: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<SubjectPrediction>,
    pub accuracy: f64,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn roc_auc(&self) -> Result<f64> {
        let scores: Vec<f64> = self.predictions.iter().map(|p| p.score).collect();
        let labels: Vec<usize> = self.predictions.iter().map(|p| p.label).collect();
        metrics::roc_auc(&scores, &labels)
    }
}

/// Evaluation-mode predictions for the given subjects.
pub fn evaluate(model: &Model, params: &ParameterStore, feats: &[SubjectFeatures], subjects: &[usize]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(subjects.len());
    let mut loss = 0.0;
    for &s in subjects {
        let f = &feats[s];
        let p = model.predict(params, f)?;
        let max = p.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - p.logits[f.label];
        predictions.push(SubjectPrediction {
            subject_id: f.subject_id.clone(),
            label: f.label,
            pred: p.class,
            score: p.positive_score(),
            logits: p.logits,
        });
    }
    let preds: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    Ok(Evaluation {
        accuracy: metrics::accuracy(&preds, &labels)?,
        mean_loss: loss / subjects.len() as f64,
        predictions,
    })
}

/// Trains fresh parameters on `train` and keeps the epoch with the best
/// validation accuracy (lower validation loss breaks ties).
///
/// `run` keys the random streams, so different folds draw independent
/// initializations, shuffles and dropout masks.
pub fn train(
    model: &Model,
    feats: &[SubjectFeatures],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    run: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let adam = cfg.adam();
    let mut params = model.init_params(rng::derive_seed(seed, "run", run))?;
    let mut order = train.to_vec();
    let mut shuffle_rng = rng::stream(seed, "shuffle", run);
    let mut dropout_draws = 0u64;
    let mut best: Option<(f64, f64, usize, ParameterStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &s in batch {
                let dropout = rng::stream(rng::derive_seed(seed, "dropout", run), "subject", dropout_draws);
                dropout_draws += 1;
                let mut tape = Tape::training(dropout);
                let bound = params.bind(&mut tape);
                let out = model.forward(&mut tape, &bound, &feats[s], false)?;
                let loss = model::loss(&mut tape, out.logits, feats[s].label)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss of subject {} at epoch {epoch}",
                        feats[s].subject_id
                    )));
                }
                epoch_loss += value;
                let grads = tape.backward(loss)?;
                params.accumulate(&bound, &grads, scale);
            }
            params.adam_step(&adam)?;
        }
        let record = if val.is_empty() {
            EpochRecord {
                epoch,
                train_loss: epoch_loss / order.len() as f64,
                val_accuracy: f64::NAN,
                val_loss: f64::NAN,
            }
        } else {
            let e = evaluate(model, &params, feats, val)?;
            EpochRecord {
                epoch,
                train_loss: epoch_loss / order.len() as f64,
                val_accuracy: e.accuracy,
                val_loss: e.mean_loss,
            }
        };
        log::debug!(
            "run {run} epoch {epoch}: train loss {:.4}, val acc {:.1}, val loss {:.4}",
            record.train_loss,
            record.val_accuracy,
            record.val_loss
        );
        let better = match &best {
            _ if val.is_empty() => true,
            None => true,
            Some((acc, loss, _, _)) => {
                record.val_accuracy > *acc || (record.val_accuracy == *acc && record.val_loss < *loss)
            }
        };
        if better {
            best = Some((record.val_accuracy, record.val_loss, epoch, params.clone()));
        }
        history.push(record);
    }
    let (_, _, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainedModel {
        params,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub roc_auc: f64,
    pub best_epoch: usize,
    pub predictions: Vec<SubjectPrediction>,
    pub params: ParameterStore,
}

#[derive(Clone, Debug)]
pub struct CvRun {
    pub folds: Vec<FoldResult>,
    pub accuracy: MeanStd,
    pub roc_auc: MeanStd,
}

impl CvRun {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn roc_aucs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.roc_auc).collect()
    }
}

/// Prepares every subject once.
pub fn prepare_all(model: &Model, subjects: &[TimeSeriesMatrix]) -> Result<Vec<SubjectFeatures>> {
    subjects.iter().map(|s| model.prepare(s)).collect()
}

/// Full cross-validation of one model over precomputed features.
///
/// Splits depend only on labels and the plan's seed, so every model run
/// with the same plan sees identical folds.
pub fn run_cv(model: &Model, feats: &[SubjectFeatures], cfg: &TrainConfig, plan: &CvPlan) -> Result<CvRun> {
    let labels: Vec<usize> = feats.iter().map(|f| f.label).collect();
    let splits = make_splits(&labels, plan)?;
    let mut folds = Vec::with_capacity(splits.len());
    for split in &splits {
        let trained = train(model, feats, &split.train, &split.val, cfg, plan.seed, split.fold as u64)?;
        let eval = evaluate(model, &trained.params, feats, &split.test)?;
        let roc_auc = eval.roc_auc()?;
        log::info!(
            "fold {}: accuracy {:.2}, roc auc {:.2} (best epoch {})",
            split.fold,
            eval.accuracy,
            roc_auc,
            trained.best_epoch
        );
        folds.push(FoldResult {
            fold: split.fold,
            accuracy: eval.accuracy,
            roc_auc,
            best_epoch: trained.best_epoch,
            predictions: eval.predictions,
            params: trained.params,
        });
    }
    let accuracy = metrics::mean_std(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>())?;
    let roc_auc = metrics::mean_std(&folds.iter().map(|f| f.roc_auc).collect::<Vec<_>>())?;
    Ok(CvRun { folds, accuracy, roc_auc })
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: String,
    pub variant: String,
    pub fold: usize,
    pub accuracy: f64,
    pub roc_auc: f64,
}

pub fn result_rows(model: &str, variant: &str, run: &CvRun) -> Vec<ResultRow> {
    run.folds
        .iter()
        .map(|f| ResultRow {
            model: model.to_string(),
            variant: variant.to_string(),
            fold: f.fold,
            accuracy: f.accuracy,
            roc_auc: f.roc_auc,
        })
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("model,variant,fold,accuracy,roc_auc\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.model, r.variant, r.fold, r.accuracy, r.roc_auc).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_predictions_csv(path: &Path, predictions: &[SubjectPrediction]) -> Result<()> {
    let mut out = String::from("subject_id,label,pred,logit0,logit1\n");
    for p in predictions {
        let l1 = p.logits.get(1).copied().unwrap_or(f64::NAN);
        writeln!(out, "{},{},{},{},{}", p.subject_id, p.label, p.pred, p.logits[0], l1).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

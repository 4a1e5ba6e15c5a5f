//! Gradient saliency, ROI and window scores, and the post-hoc logistic
//! regression over the most salient window's frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, SubjectFeatures};
use crate::signal::TimeSeriesMatrix;
use crate::tensor::{ParameterStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    pub subject_id: String,
    pub predicted_class: usize,
    /// `|∂y/∂FC|`: one `R×R` matrix for a vanilla model, one per window for
    /// an augmented model.
    pub saliency: Vec<Tensor>,
    /// Per-ROI scores.
    pub roi_scores: Vec<f64>,
    window_scores: Option<Vec<f64>>,
}

impl SaliencyReport {
    pub fn is_augmented(&self) -> bool {
        self.window_scores.is_some()
    }

    /// Per-window scores; only augmented models have them.
    pub fn window_scores(&self) -> Result<&[f64]> {
        self.window_scores
            .as_deref()
            .ok_or_else(|| Error::Contract("window scores are undefined for a vanilla model".into()))
    }

    /// Index of the most salient window (first one on ties).
    pub fn w_star(&self) -> Result<usize> {
        Ok(argmax(self.window_scores()?))
    }
}

fn argmax(values: &[f64]) -> usize {
    crate::model::argmax(values)
}

/// Saliency of the predicted-class logit with respect to the model's
/// connectivity inputs.
pub fn saliency(model: &Model, params: &ParameterStore, feat: &SubjectFeatures) -> Result<SaliencyReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, feat, true)?;
    let logits = tape.value(out.logits).data().to_vec();
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logits of subject {}", feat.subject_id)));
    }
    let predicted_class = argmax(&logits);
    let y = tape.pick(out.logits, predicted_class)?;
    let grads = tape.backward(y)?;
    let saliency: Vec<Tensor> = out
        .inputs
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .map(|g| g.map(f64::abs))
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    let r = feat.sfc.rows();
    let w = saliency.len() as f64;
    let mut roi_scores = vec![0.0; r];
    for s in &saliency {
        for (i, score) in roi_scores.iter_mut().enumerate() {
            *score += s.row(i).iter().sum::<f64>() / w;
        }
    }
    let window_scores = feat
        .windowed
        .is_some()
        .then(|| saliency.iter().map(|s| s.data().iter().sum()).collect());
    Ok(SaliencyReport {
        subject_id: feat.subject_id.clone(),
        predicted_class,
        saliency,
        roi_scores,
        window_scores,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMembership {
    pub node: usize,
    pub group: String,
    pub hemisphere: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupScore {
    pub group: String,
    pub hemisphere: String,
    pub nodes: usize,
    pub mean_score: f64,
}

/// Reads a `node_index,group_name,hemisphere` file (header required).
pub fn read_group_map(path: &Path) -> Result<Vec<GroupMembership>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "node_index,group_name,hemisphere" => {}
        _ => return Err(data_err(1, "expected header `node_index,group_name,hemisphere`".into())),
    }
    lines
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(data_err(n + 1, format!("expected 3 fields, found {}", fields.len())));
            }
            let node = fields[0]
                .parse()
                .map_err(|_| data_err(n + 1, format!("invalid node index `{}`", fields[0])))?;
            Ok(GroupMembership {
                node,
                group: fields[1].to_string(),
                hemisphere: fields[2].to_string(),
            })
        })
        .collect()
}

/// Mean ROI score per `(group, hemisphere)`, in order of first appearance.
///
/// Every node must appear at most once and index a valid ROI. Nodes the
/// map leaves out are ignored with a warning.
pub fn group_saliency(roi_scores: &[f64], groups: &[GroupMembership]) -> Result<Vec<GroupScore>> {
    let mut seen = vec![false; roi_scores.len()];
    let mut order: Vec<(String, String)> = Vec::new();
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for m in groups {
        if m.node >= roi_scores.len() {
            return Err(Error::Contract(format!(
                "group map names node {} but only {} ROIs exist",
                m.node,
                roi_scores.len()
            )));
        }
        if std::mem::replace(&mut seen[m.node], true) {
            return Err(Error::Contract(format!("node {} appears twice in the group map", m.node)));
        }
        let key = (m.group.clone(), m.hemisphere.clone());
        let entry = sums.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        entry.0 += roi_scores[m.node];
        entry.1 += 1;
    }
    let missing = seen.iter().filter(|s| !**s).count();
    if missing > 0 {
        log::warn!("{missing} ROIs are not assigned to any group");
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let (sum, n) = sums[&key];
            GroupScore {
                group: key.0,
                hemisphere: key.1,
                nodes: n,
                mean_score: sum / n as f64,
            }
        })
        .collect())
}

/// Frames of `[start, start + len)` ranked by mean absolute signal across
/// ROIs, strongest first (earlier frame on ties); at most `count` of them.
pub fn select_frames(ts: &TimeSeriesMatrix, start: usize, len: usize, count: usize) -> Result<Vec<usize>> {
    if len == 0 || start + len > ts.frames() {
        return Err(Error::Contract(format!(
            "frame range [{start}, {}) outside a {}-frame scan",
            start + len,
            ts.frames()
        )));
    }
    let r = ts.nodes();
    let intensity: Vec<f64> = (start..start + len)
        .map(|t| (0..r).map(|i| ts.signals().get(i, t).abs()).sum::<f64>() / r as f64)
        .collect();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| intensity[b].total_cmp(&intensity[a]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order.into_iter().map(|o| start + o).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            steps: 500,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogisticFit {
    /// One weight per ROI; positive means higher signal favors class 1.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Frames used per subject.
    pub frames: Vec<(String, Vec<usize>)>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on mean log-loss plus `l2/2·‖w‖²` (the bias
/// is not penalized), starting from zero.
pub fn fit_logistic_samples(x: &[Vec<f64>], y: &[usize], cfg: &LogisticConfig) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Contract(format!("{} samples for {} labels", x.len(), y.len())));
    }
    let p = x[0].len();
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::Contract("logistic samples have unequal widths".into()));
    }
    let n = x.len() as f64;
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    for _ in 0..cfg.steps {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = (sigmoid(z) - label as f64) / n;
            gb += err;
            gw.iter_mut().zip(row).for_each(|(g, a)| *g += err * a);
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.lr * g);
        b -= cfg.lr * gb;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite("logistic regression weights".into()));
    }
    Ok((w, b))
}

/// Fits the logistic model on the top frames of each subject's selected
/// window. `windows[s]` is the `(start, len)` frame range of subject `s`'s
/// most salient window.
pub fn fit_logistic(
    subjects: &[TimeSeriesMatrix],
    windows: &[(usize, usize)],
    frames_per_subject: usize,
    cfg: &LogisticConfig,
) -> Result<LogisticFit> {
    if subjects.len() != windows.len() {
        return Err(Error::Contract(format!("{} subjects but {} windows", subjects.len(), windows.len())));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut frames = Vec::with_capacity(subjects.len());
    for (ts, &(start, len)) in subjects.iter().zip(windows) {
        let picked = select_frames(ts, start, len, frames_per_subject)?;
        for &t in &picked {
            x.push((0..ts.nodes()).map(|i| ts.signals().get(i, t)).collect());
            y.push(ts.label);
        }
        frames.push((ts.subject_id.clone(), picked));
    }
    let (weights, bias) = fit_logistic_samples(&x, &y, cfg)?;
    Ok(LogisticFit { weights, bias, frames })
}

/// A horizontal bar chart, one bar per value.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let bar_h = 14.0;
    let label_w = 120.0;
    let plot_w = 400.0;
    let height = 40.0 + bar_h * values.len() as f64 + 10.0;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        label_w + plot_w + 80.0
    )
    .unwrap();
    writeln!(svg, r#"<text x="8" y="20" font-size="14">{}</text>"#, escape(title)).unwrap();
    for (n, (label, &v)) in labels.iter().zip(values).enumerate() {
        let y = 32.0 + bar_h * n as f64;
        let w = plot_w * v.abs() / max;
        let fill = if v < 0.0 { "#c0504d" } else { "#4f81bd" };
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><rect x="{label_w}" y="{}" width="{w:.2}" height="{}" fill="{fill}"/><text x="{}" y="{}">{v:.4e}</text>"#,
            label_w - 4.0,
            y + bar_h - 4.0,
            escape(label),
            y + 1.0,
            bar_h - 2.0,
            label_w + w + 4.0,
            y + bar_h - 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>_roi.csv`, `<stem>_roi.svg` and, for augmented reports,
/// `<stem>_window.csv` and `<stem>_window.svg` into `dir`.
pub fn write_report(dir: &Path, stem: &str, report: &SaliencyReport, roi_names: &[String]) -> Result<()> {
    let write = |name: String, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let mut csv = String::from("node_index,roi_name,score\n");
    for (i, s) in report.roi_scores.iter().enumerate() {
        writeln!(csv, "{i},{},{s}", roi_names[i]).unwrap();
    }
    write(format!("{stem}_roi.csv"), csv)?;
    let title = format!("ROI saliency, subject {}", report.subject_id);
    write(format!("{stem}_roi.svg"), bar_chart_svg(&title, roi_names, &report.roi_scores))?;
    if let Ok(ws) = report.window_scores() {
        let mut csv = String::from("window,score\n");
        for (w, s) in ws.iter().enumerate() {
            writeln!(csv, "{w},{s}").unwrap();
        }
        write(format!("{stem}_window.csv"), csv)?;
        let labels: Vec<String> = (0..ws.len()).map(|w| format!("window {w}")).collect();
        let title = format!("Window saliency, subject {}", report.subject_id);
        write(format!("{stem}_window.svg"), bar_chart_svg(&title, &labels, ws))?;
    }
    Ok(())
}

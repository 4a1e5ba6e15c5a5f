//! Signal ingestion, Pearson connectivity (static and windowed) and
//! thresholded graph formation.

mod graph;
mod io;

pub use graph::{form_graph, EdgeRank, GraphTopology};
pub use io::{load_dataset, read_manifest, read_subject_csv, write_manifest, write_subject_csv, ManifestEntry};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Per-subject multichannel signal, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesMatrix {
    pub subject_id: String,
    pub label: usize,
    pub roi_names: Option<Vec<String>>,
    signals: Tensor,
}

impl TimeSeriesMatrix {
    pub fn new(subject_id: impl Into<String>, label: usize, signals: Tensor) -> Result<Self> {
        if signals.rank() != 2 {
            return Err(Error::shape("time_series", signals.shape(), &[0, 0]));
        }
        if signals.cols() < 2 {
            return Err(Error::Contract(format!(
                "time series needs at least 2 frames, got {}",
                signals.cols()
            )));
        }
        if !signals.all_finite() {
            return Err(Error::NonFinite("time series".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            label,
            roi_names: None,
            signals,
        })
    }

    pub fn nodes(&self) -> usize {
        self.signals.rows()
    }

    pub fn frames(&self) -> usize {
        self.signals.cols()
    }

    pub fn signals(&self) -> &Tensor {
        &self.signals
    }
}

/// Rows centered and scaled to unit norm, the building block of Pearson.
///
/// Fails on a row whose centered energy vanishes relative to its raw energy.
fn standardize_rows(src: &[f64], rows: usize, cols: usize, window: Option<usize>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let raw: f64 = row.iter().map(|v| v * v).sum();
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut ss = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = v - mean;
            ss += *d * *d;
        }
        if ss == 0.0 || ss <= 1e-24 * raw {
            return Err(Error::DegenerateSignal { row: r, window });
        }
        let inv = 1.0 / ss.sqrt();
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

/// Pearson correlation between all row pairs of an `R×n` matrix.
///
/// The result is symmetric with an exact unit diagonal and entries clamped
/// to `[-1, 1]`.
pub fn pearson_matrix(rows: &Tensor, window: Option<usize>) -> Result<Tensor> {
    let (r, n) = (rows.rows(), rows.cols());
    let z = standardize_rows(rows.data(), r, n, window)?;
    let mut c = vec![0.0; r * r];
    gemm(r, n, r, &z, false, &z, true, &mut c, false);
    for i in 0..r {
        c[i * r + i] = 1.0;
        for j in (i + 1)..r {
            let v = c[i * r + j].clamp(-1.0, 1.0);
            c[i * r + j] = v;
            c[j * r + i] = v;
        }
    }
    Tensor::new(vec![r, r], c)
}

/// Static connectivity: Pearson correlation of full-length signals.
pub fn static_fc(ts: &TimeSeriesMatrix) -> Result<Tensor> {
    pearson_matrix(ts.signals(), None)
}

/// Sliding-window signals and (once computed) their connectivity.
#[derive(Clone, Debug)]
pub struct WindowedFeatureSet {
    pub window_size: usize,
    pub stride: usize,
    /// `W` tensors of shape `R×T_w`.
    pub signals: Vec<Tensor>,
    /// `W` tensors of shape `R×R`; empty until [`windowed_fc`] runs.
    pub fc: Vec<Tensor>,
}

impl WindowedFeatureSet {
    pub fn window_count(&self) -> usize {
        self.signals.len()
    }

    pub fn nodes(&self) -> usize {
        self.signals[0].rows()
    }

    /// One window spanning the whole scan (time windowing disabled).
    pub fn full_scan(ts: &TimeSeriesMatrix) -> Self {
        Self {
            window_size: ts.frames(),
            stride: ts.frames(),
            signals: vec![ts.signals().clone()],
            fc: Vec::new(),
        }
    }
}

/// Number of windows, `floor((T - T_w) / s)`.
pub fn window_count(frames: usize, window_size: usize, stride: usize) -> usize {
    if stride == 0 || window_size > frames {
        return 0;
    }
    (frames - window_size) / stride
}

/// Splits a scan into `W = floor((T - T_w)/s)` windows; window `w` covers
/// frames `[w·s, w·s + T_w)`. Trailing frames are dropped.
pub fn window_signals(ts: &TimeSeriesMatrix, window_size: usize, stride: usize) -> Result<WindowedFeatureSet> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if window_size < 2 {
        return Err(Error::Config(format!("window size {window_size} below 2")));
    }
    let frames = ts.frames();
    let count = window_count(frames, window_size, stride);
    if count == 0 {
        return Err(Error::InsufficientFrames {
            frames,
            window_size,
            stride,
        });
    }
    let src = ts.signals();
    let signals = (0..count)
        .map(|w| {
            let start = w * stride;
            Tensor::matrix_from_fn(ts.nodes(), window_size, |i, t| src.get(i, start + t))
        })
        .collect();
    Ok(WindowedFeatureSet {
        window_size,
        stride,
        signals,
        fc: Vec::new(),
    })
}

/// Populates the per-window Pearson tensors.
pub fn windowed_fc(mut fs: WindowedFeatureSet) -> Result<WindowedFeatureSet> {
    fs.fc = fs
        .signals
        .iter()
        .enumerate()
        .map(|(w, s)| pearson_matrix(s, Some(w)))
        .collect::<Result<_>>()?;
    Ok(fs)
}

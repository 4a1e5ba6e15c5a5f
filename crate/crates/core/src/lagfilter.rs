//! Lagged cross-correlation on connected node pairs and learnable lag filters.
//!
//! For a directed edge `(i, j)` and window `w`, the lag profile is
//!
//! ```text
//! ρ(τ) = Σ_t x̃_i[t] · x̃_j[t + τ] / (‖x̃_i‖ ‖x̃_j‖),   τ ∈ {-m, …, m}
//! ```
//!
//! where `x̃` is the zero-padded window with its unpadded span centered on
//! the span mean. Positive `τ` means node `j` trails node `i`. At `τ = 0`
//! this is exactly the window's Pearson correlation; `ρ_ij(τ) = ρ_ji(-τ)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{GraphTopology, WindowedFeatureSet};
use crate::tensor::{BoundParams, ParameterStore, Tape, Tensor, Var};

pub const FILTERS: &str = "lagfilter.p";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagFilterConfig {
    /// Maximum lag `m`, in frames.
    pub max_lag: usize,
    /// Filter count `k`.
    pub filters: usize,
    /// Replace the learnable bank with one frozen zero-lag filter.
    pub zero_lag_only: bool,
}

impl LagFilterConfig {
    pub fn lag_count(&self) -> usize {
        2 * self.max_lag + 1
    }

    /// Effective filter count (1 in zero-lag mode).
    pub fn effective_filters(&self) -> usize {
        if self.zero_lag_only {
            1
        } else {
            self.filters
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::Config("lag filter count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adds `P_LF` (`(2m+1)×k`) to `store`. Zero-lag mode stores a frozen
/// one-hot column at `τ = 0`.
pub fn init_params(cfg: &LagFilterConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let lags = cfg.lag_count();
    if cfg.zero_lag_only {
        let p = Tensor::matrix_from_fn(lags, 1, |t, _| if t == cfg.max_lag { 1.0 } else { 0.0 });
        store.insert_frozen(FILTERS, p);
    } else {
        store.insert_glorot(FILTERS, &[lags, cfg.filters], lags, cfg.filters, rng);
    }
    Ok(())
}

/// Windows padded with `m` zeros on both sides of the time axis.
#[derive(Clone, Debug)]
pub struct PaddedSignals {
    pub max_lag: usize,
    pub window_size: usize,
    /// `W` tensors of shape `R×(T_w + 2m)`.
    pub windows: Vec<Tensor>,
}

pub fn pad_signals(fs: &WindowedFeatureSet, max_lag: usize) -> PaddedSignals {
    let tw = fs.window_size;
    let windows = fs
        .signals
        .iter()
        .map(|s| {
            Tensor::matrix_from_fn(s.rows(), tw + 2 * max_lag, |i, t| {
                if t < max_lag || t >= max_lag + tw {
                    0.0
                } else {
                    s.get(i, t - max_lag)
                }
            })
        })
        .collect();
    PaddedSignals {
        max_lag,
        window_size: tw,
        windows,
    }
}

/// Lag profiles `[E, W, 2m+1]` for every directed edge of `topo`, in the
/// topology's edge order; the last axis runs from `τ = -m` to `τ = m`.
pub fn lag_xcorr(x: &PaddedSignals, topo: &GraphTopology) -> Result<Tensor> {
    let (m, tw) = (x.max_lag, x.window_size);
    let lags = 2 * m + 1;
    let w_count = x.windows.len();
    let edges = topo.edges();
    if edges.is_empty() {
        return Err(Error::Contract("lagged correlation needs at least one edge".into()));
    }
    if x.windows.is_empty() {
        return Err(Error::Contract("lagged correlation needs at least one window".into()));
    }
    let r = x.windows[0].rows();
    if r != topo.nodes() {
        return Err(Error::shape("lag_xcorr", &[r], &[topo.nodes()]));
    }
    let mut out = vec![0.0; edges.len() * w_count * lags];
    let mut centered = vec![0.0; r * tw];
    let mut inv_norm = vec![0.0; r];
    for (w, win) in x.windows.iter().enumerate() {
        for i in 0..r {
            let span = &win.row(i)[m..m + tw];
            let mean = span.iter().sum::<f64>() / tw as f64;
            let dst = &mut centered[i * tw..(i + 1) * tw];
            let mut ss = 0.0;
            for (d, v) in dst.iter_mut().zip(span) {
                *d = v - mean;
                ss += *d * *d;
            }
            let raw: f64 = span.iter().map(|v| v * v).sum();
            if ss == 0.0 || ss <= 1e-24 * raw {
                return Err(Error::DegenerateSignal { row: i, window: Some(w) });
            }
            inv_norm[i] = 1.0 / ss.sqrt();
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            let (a, b) = (&centered[i * tw..(i + 1) * tw], &centered[j * tw..(j + 1) * tw]);
            let scale = inv_norm[i] * inv_norm[j];
            let dst = &mut out[(e * w_count + w) * lags..(e * w_count + w + 1) * lags];
            for (slot, tau) in dst.iter_mut().zip(-(m as isize)..=(m as isize)) {
                let s = if tau >= 0 {
                    let t = tau as usize;
                    a[..tw.saturating_sub(t)].iter().zip(&b[t.min(tw)..]).map(|(p, q)| p * q).sum::<f64>()
                } else {
                    let t = (-tau) as usize;
                    a[t.min(tw)..].iter().zip(&b[..tw.saturating_sub(t)]).map(|(p, q)| p * q).sum::<f64>()
                };
                *slot = s * scale;
            }
        }
    }
    Tensor::new(vec![edges.len(), w_count, lags], out)
}

/// `GELU(ρ · P_LF)` as a `[E, W, k]` variable.
#[derive(Clone, Copy, Debug)]
pub struct LagActivations {
    pub var: Var,
    pub edges: usize,
    pub windows: usize,
    pub filters: usize,
}

pub fn lag_activations(tape: &mut Tape, rho: Var, params: &BoundParams) -> Result<LagActivations> {
    let s = tape.shape(rho).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("lag_activations", &s, &[0, 0, 0]));
    }
    let (e, w, lags) = (s[0], s[1], s[2]);
    let flat = tape.reshape(rho, &[e * w, lags])?;
    let mixed = tape.matmul(flat, params.get(FILTERS)?)?;
    let k = tape.shape(mixed)[1];
    let act = tape.gelu(mixed);
    let var = tape.reshape(act, &[e, w, k])?;
    Ok(LagActivations {
        var,
        edges: e,
        windows: w,
        filters: k,
    })
}

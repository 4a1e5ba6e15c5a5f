//! Synthetic two-class datasets with planted lagged couplings.
//!
//! Every subject starts from independent Gaussian noise per node. For each
//! informative pair `(i, j)` node `j` is mixed with a copy of node `i`
//! delayed by the class's lag, so a positive lag means `j` trails `i`.
//! With lags of equal magnitude and opposite sign the zero-lag correlation
//! structure is the same for both classes, and only the direction of the
//! delay separates them.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{self, ManifestEntry, TimeSeriesMatrix};
use crate::tensor::Tensor;

/// Per-window on/off masks restricting when couplings are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSchedule {
    pub window_size: usize,
    pub stride: usize,
    /// One flag per window for class 0.
    pub class_a: Vec<bool>,
    /// One flag per window for class 1.
    pub class_b: Vec<bool>,
}

impl WindowSchedule {
    fn gate(&self, frames: usize, class: usize) -> Vec<bool> {
        let mask = if class == 0 { &self.class_a } else { &self.class_b };
        let mut on = vec![false; frames];
        for (w, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let start = w * self.stride;
            on[start..start + self.window_size].iter_mut().for_each(|f| *f = true);
        }
        on
    }
}

/// An additional coupling group with its own per-class strength and lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingGroup {
    pub pairs: Vec<(usize, usize)>,
    pub lag_a: i64,
    pub lag_b: i64,
    /// Mixing weight in `(-1, 1)`; negative weights anti-correlate the pair.
    pub strength_a: f64,
    pub strength_b: f64,
    #[serde(default)]
    pub schedule: Option<WindowSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub nodes: usize,
    pub frames: usize,
    pub subjects_per_class: usize,
    /// Informative `(source, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Planted delay of class 0, in frames.
    pub lag_a: i64,
    /// Planted delay of class 1, in frames.
    pub lag_b: i64,
    /// Mixing weight of the delayed source, in `[0, 1)`.
    pub coupling: f64,
    #[serde(default)]
    pub schedule: Option<WindowSchedule>,
    /// Scale of the base noise.
    pub noise_std: f64,
    pub seed: u64,
    /// AR(1) coefficient of the base noise; 0 gives white noise.
    #[serde(default)]
    pub smoothing: f64,
    /// Height of transient events on source nodes: positive for class 1,
    /// negative for class 0.
    #[serde(default)]
    pub event_amplitude: f64,
    /// Per-frame probability of an event on each source node.
    #[serde(default)]
    pub event_rate: f64,
    #[serde(default)]
    pub extra_couplings: Vec<CouplingGroup>,
}

// Class-1 strengths of the combined scenario.
const LAG_COUPLING: f64 = 0.42;
const FLIP: f64 = 0.31;

/// Correlation between source and target after one mix of strength `c`.
fn correlation_of(c: f64) -> f64 {
    c / ((1.0 - c).powi(2) + c * c).sqrt()
}

/// Inverse of [`correlation_of`] on `[0, 1)`.
fn strength_for(rho: f64) -> f64 {
    // rho² ((1 - c)² + c²) = c², a quadratic in c.
    let r2 = rho * rho;
    let (a, b) = (2.0 * r2 - 1.0, -2.0 * r2);
    if a.abs() < 1e-12 {
        return -r2 / b;
    }
    let disc = (b * b - 4.0 * a * r2).sqrt();
    [(-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a)]
        .into_iter()
        .find(|c| (0.0..1.0).contains(c))
        .expect("correlation in [0, 1)")
}

impl SynthSpec {
    /// The lag-direction benchmark: 30 nodes, 400 frames, 100 subjects per
    /// class, lags +3 and -3.
    pub fn lag_scenario(seed: u64) -> Self {
        Self {
            nodes: 30,
            frames: 400,
            subjects_per_class: 100,
            pairs: vec![(0, 1), (2, 3)],
            lag_a: 3,
            lag_b: -3,
            coupling: 0.6,
            schedule: None,
            noise_std: 1.0,
            seed,
            smoothing: 0.0,
            event_amplitude: 0.0,
            event_rate: 0.0,
            extra_couplings: Vec::new(),
        }
    }

    /// Two signals that are invisible in full-scan connectivity.
    ///
    /// Pairs (0, 1) and (2, 3) share a strong zero-lag coupling that makes
    /// them the top static edges. In class 1 node `j` also trails node `i` by
    /// 3 frames early in the scan and leads it by 3 frames late in the scan.
    /// Class 0 carries both delays steadily and more weakly, with strengths
    /// chosen so the full-scan cross-correlation profiles of the classes
    /// agree.
    ///
    /// Pairs (8, 9) and (10, 11) are uncoupled in class 0. In class 1 they
    /// are positively coupled early and anti-coupled late, so their static
    /// correlation is near zero and they never become edges; only windowed
    /// connectivity matrices show them.
    pub fn combined_scenario(seed: u64) -> Self {
        let (frames, window_size, stride) = (400, 50, 30);
        let windows = signal::window_count(frames, window_size, stride);
        // The same number of windows on each side, so the flips cancel.
        let early: Vec<bool> = (0..windows).map(|w| w < windows / 2).collect();
        let late: Vec<bool> = (0..windows).map(|w| w >= windows - windows / 2).collect();
        let span = |n: usize| ((n - 1) * stride + window_size) as f64;
        // Gates only reach the frames covered by some window, for class 0 too.
        let covered = span(windows / 2) / span(windows);

        // Class 0 mixes the +3 delay first and the -3 delay second; the
        // second mix dilutes the first, which the first strength makes up for.
        let target = correlation_of(LAG_COUPLING) * covered;
        let second = strength_for(target);
        let second_norm = ((1.0 - second).powi(2) + second * second).sqrt();
        let first = strength_for(target * second_norm / (1.0 - second));

        let schedule = |class_a: Vec<bool>, class_b: Vec<bool>| {
            Some(WindowSchedule {
                window_size,
                stride,
                class_a,
                class_b,
            })
        };
        let group = |pairs: &[(usize, usize)], lag, strength_a, strength_b, schedule| CouplingGroup {
            pairs: pairs.to_vec(),
            lag_a: lag,
            lag_b: lag,
            strength_a,
            strength_b,
            schedule,
        };
        let lagged = [(0, 1), (2, 3)];
        let flipped = [(8, 9), (10, 11)];
        let all = vec![true; windows];
        let none = vec![false; windows];
        Self {
            frames,
            subjects_per_class: 200,
            pairs: lagged.to_vec(),
            lag_a: 3,
            lag_b: 3,
            coupling: 0.0,
            extra_couplings: vec![
                group(&lagged, 3, first, LAG_COUPLING, schedule(all.clone(), early.clone())),
                group(&lagged, -3, second, LAG_COUPLING, schedule(all, late.clone())),
                group(&lagged, 0, 0.5, 0.5, None),
                group(&flipped, 0, 0.0, FLIP, schedule(none.clone(), early)),
                group(&flipped, 0, 0.0, -FLIP, schedule(none, late)),
            ],
            ..Self::lag_scenario(seed)
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::json(path, text, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    fn groups(&self) -> Vec<CouplingGroup> {
        let mut groups = vec![CouplingGroup {
            pairs: self.pairs.clone(),
            lag_a: self.lag_a,
            lag_b: self.lag_b,
            strength_a: self.coupling,
            strength_b: self.coupling,
            schedule: self.schedule.clone(),
        }];
        groups.extend(self.extra_couplings.iter().cloned());
        groups
    }

    fn max_lag(&self) -> usize {
        self.groups()
            .iter()
            .flat_map(|g| [g.lag_a.unsigned_abs(), g.lag_b.unsigned_abs()])
            .max()
            .unwrap_or(0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes < 2 || self.subjects_per_class == 0 {
            return bad("a synthetic dataset needs at least 2 nodes and 1 subject per class".into());
        }
        if self.frames < 2 || self.frames <= 2 * self.max_lag() {
            return bad(format!(
                "{} frames are too few for planted lags up to {}",
                self.frames,
                self.max_lag()
            ));
        }
        if !(self.noise_std > 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return bad("noise_std must be positive and smoothing in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.event_rate) || !self.event_amplitude.is_finite() {
            return bad("event_rate must lie in [0, 1] and event_amplitude be finite".into());
        }
        for g in self.groups() {
            for &s in &[g.strength_a, g.strength_b] {
                if !(s.abs() < 1.0) {
                    return bad(format!("coupling strength {s} outside (-1, 1)"));
                }
            }
            for &(i, j) in &g.pairs {
                if i >= self.nodes || j >= self.nodes || i == j {
                    return bad(format!("invalid informative pair ({i}, {j}) for {} nodes", self.nodes));
                }
            }
            if let Some(s) = &g.schedule {
                let w = signal::window_count(self.frames, s.window_size, s.stride);
                if s.stride == 0 || s.window_size < 2 || w == 0 {
                    return bad(format!(
                        "schedule windows of {} frames with stride {} do not fit {} frames",
                        s.window_size, s.stride, self.frames
                    ));
                }
                if s.class_a.len() != w || s.class_b.len() != w {
                    return bad(format!("schedule masks must have one flag per window ({w})"));
                }
            }
        }
        Ok(())
    }

    /// Source nodes of the informative pairs, ascending and deduplicated.
    pub fn driver_nodes(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Every node touched by an informative pair.
    pub fn informative_nodes(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.pairs.iter().flat_map(|p| [p.0, p.1]).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn subject_count(&self) -> usize {
        2 * self.subjects_per_class
    }

    /// Subject `k` has label `k % 2`.
    pub fn subject_id(k: usize) -> String {
        format!("sub-{k:04}")
    }
}

fn base_noise(spec: &SynthSpec, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let phi = spec.smoothing;
    let innovation = spec.noise_std * (1.0 - phi * phi).sqrt();
    (0..spec.nodes)
        .map(|_| {
            let mut x = Vec::with_capacity(len);
            let mut prev = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..len {
                let e: f64 = rng.sample(StandardNormal);
                prev = phi * prev + innovation * e;
                x.push(prev);
            }
            x
        })
        .collect()
}

/// Generates subject `k` in memory.
pub fn generate_subject(spec: &SynthSpec, k: usize) -> Result<TimeSeriesMatrix> {
    let label = k % 2;
    let t = spec.frames;
    let margin = spec.max_lag();
    let len = t + 2 * margin;
    let mut rng = rng::stream(spec.seed, "synth", k as u64);
    let mut x = base_noise(spec, len, &mut rng);

    if spec.event_amplitude != 0.0 && spec.event_rate > 0.0 {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for d in spec.driver_nodes() {
            for f in 0..len {
                if rng.random::<f64>() < spec.event_rate {
                    x[d][f] += sign * spec.event_amplitude;
                }
            }
        }
    }

    for g in spec.groups() {
        let (lag, c) = if label == 0 { (g.lag_a, g.strength_a) } else { (g.lag_b, g.strength_b) };
        if c == 0.0 {
            continue;
        }
        let gate = g.schedule.as_ref().map(|s| s.gate(t, label));
        let keep = 1.0 - c.abs();
        let norm = (keep * keep + c * c).sqrt();
        for &(i, j) in &g.pairs {
            let source = x[i].clone();
            for f in margin..margin + t {
                if gate.as_ref().is_some_and(|on| !on[f - margin]) {
                    continue;
                }
                let s = source[(f as i64 - lag) as usize];
                x[j][f] = (keep * x[j][f] + c * s) / norm;
            }
        }
    }

    let mut data = Vec::with_capacity(spec.nodes * t);
    for row in &x {
        let span = &row[margin..margin + t];
        let mean = span.iter().sum::<f64>() / t as f64;
        let sd = (span.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
        data.extend(span.iter().map(|v| (v - mean) / sd));
    }
    TimeSeriesMatrix::new(SynthSpec::subject_id(k), label, Tensor::new(vec![spec.nodes, t], data)?)
}

/// Generates every subject in memory.
pub fn generate_subjects(spec: &SynthSpec) -> Result<Vec<TimeSeriesMatrix>> {
    spec.validate()?;
    (0..spec.subject_count()).map(|k| generate_subject(spec, k)).collect()
}

/// Writes `manifest.json`, `spec.json` and one CSV per subject under
/// `out`. Returns the manifest path.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let subject_dir = out.join("subjects");
    std::fs::create_dir_all(&subject_dir).map_err(|e| Error::io(&subject_dir, e))?;
    let mut entries = Vec::with_capacity(spec.subject_count());
    for k in 0..spec.subject_count() {
        let ts = generate_subject(spec, k)?;
        let rel = format!("subjects/{}.csv", ts.subject_id);
        signal::write_subject_csv(&out.join(&rel), &ts)?;
        entries.push(ManifestEntry {
            id: ts.subject_id.clone(),
            path: rel,
            label: ts.label,
        });
    }
    let spec_path = out.join("spec.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&spec_path, text + "\n").map_err(|e| Error::io(&spec_path, e))?;
    let manifest = out.join("manifest.json");
    signal::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

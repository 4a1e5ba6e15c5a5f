#![allow(dead_code)]

use graphcorr::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    graphcorr::rng::stream(seed, "test", 0)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Symmetric matrix with unit diagonal and off-diagonal entries in (-0.9, 0.9).
pub fn random_corr(r: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::identity(r);
    for i in 0..r {
        for j in (i + 1)..r {
            let v = rng.random_range(-0.9..0.9);
            t.set(i, j, v);
            t.set(j, i, v);
        }
    }
    t
}

/// Relative error with a small floor so entries that are zero on both
/// sides do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_grads(inputs: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for idx in 0..inputs[k].numel() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let plus = f(&work);
            work[k].data_mut()[idx] = orig - h;
            let minus = f(&work);
            work[k].data_mut()[idx] = orig;
            g.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Time series with `nodes` rows of smooth, distinct, non-degenerate signals.
pub fn toy_series(nodes: usize, frames: usize, seed: u64) -> graphcorr::signal::TimeSeriesMatrix {
    let mut r = rng(seed);
    let signals = Tensor::matrix_from_fn(nodes, frames, |_, _| r.random_range(-1.0..1.0));
    graphcorr::signal::TimeSeriesMatrix::new(format!("toy-{seed}"), (seed % 2) as usize, signals).unwrap()
}

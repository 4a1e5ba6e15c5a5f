//! Library routines against naive reference implementations.

mod common;

use common::*;
use graphcorr::embedder::NodeEmbeddings;
use graphcorr::lagfilter::{self, LagActivations};
use graphcorr::metrics;
use graphcorr::signal::{self, EdgeRank, GraphTopology, TimeSeriesMatrix};
use graphcorr::{Tape, Tensor};
use rand::Rng;

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn windowed_pearson_matches_double_loop() {
    for seed in 0..5 {
        let ts = toy_series(6, 40, seed);
        let fs = signal::windowed_fc(signal::window_signals(&ts, 12, 9).unwrap()).unwrap();
        assert_eq!(fs.window_count(), 3);
        for (w, fc) in fs.fc.iter().enumerate() {
            for i in 0..6 {
                for j in 0..6 {
                    let span = |r: usize| &ts.signals().row(r)[w * 9..w * 9 + 12];
                    let expect = naive_pearson(span(i), span(j));
                    assert!((fc.get(i, j) - expect).abs() <= 1e-12, "window {w} ({i},{j})");
                }
            }
        }
    }
}

/// The lagged correlation written straight from its definition: zero-padded
/// centered windows, a full sum over the padded support, and norms of the
/// padded vectors.
fn naive_lag_xcorr(fs: &signal::WindowedFeatureSet, topo: &GraphTopology, m: usize) -> Vec<f64> {
    let tw = fs.window_size;
    let len = tw + 2 * m;
    let padded: Vec<Vec<Vec<f64>>> = fs
        .signals
        .iter()
        .map(|win| {
            (0..win.rows())
                .map(|i| {
                    let row = win.row(i);
                    let mean = row.iter().sum::<f64>() / tw as f64;
                    (0..len)
                        .map(|t| if t < m || t >= m + tw { 0.0 } else { row[t - m] - mean })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for &(i, j) in topo.edges().iter() {
        for x in &padded {
            let (a, b) = (&x[i], &x[j]);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = (1.0 / norm(a)) * (1.0 / norm(b));
            for tau in -(m as isize)..=(m as isize) {
                let mut s = 0.0;
                for t in 0..len as isize {
                    let u = t + tau;
                    if u >= 0 && u < len as isize {
                        s += a[t as usize] * b[u as usize];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    out
}

pub fn lag_xcorr_matches_triple_loop_exactly() {
    for seed in 0..5 {
        let ts = toy_series(6, 30, seed);
        let fs = signal::window_signals(&ts, 10, 10).unwrap();
        assert_eq!(fs.window_count(), 2);
        let topo = GraphTopology::complete(6);
        for m in [0, 2, 5] {
            let rho = lagfilter::lag_xcorr(&lagfilter::pad_signals(&fs, m), &topo).unwrap();
            assert_eq!(rho.shape(), &[30, 2, 2 * m + 1]);
            assert_eq!(rho.data(), naive_lag_xcorr(&fs, &topo, m).as_slice(), "seed {seed}, m {m}");
        }
    }
}

pub fn lag_xcorr_recovers_planted_shift() {
    let x: Vec<f64> = (0..60).map(|t| (t as f64 * 0.37).sin() + 0.3 * (t as f64 * 1.3).cos()).collect();
    let y: Vec<f64> = (0..60).map(|t| if t >= 2 { x[t - 2] } else { 0.0 }).collect();
    let ts = TimeSeriesMatrix::new("s", 0, Tensor::from_rows(&[x, y]).unwrap()).unwrap();
    let fs = signal::WindowedFeatureSet::full_scan(&ts);
    let topo = GraphTopology::from_edges(2, vec![(0, 1), (1, 0)]).unwrap();
    let rho = lagfilter::lag_xcorr(&lagfilter::pad_signals(&fs, 5), &topo).unwrap();
    let profile = &rho.data()[..11];
    let best = (0..11).max_by(|&a, &b| profile[a].total_cmp(&profile[b])).unwrap();
    assert_eq!(best as isize - 5, 2);
}

fn sort_oracle(sfc: &Tensor, percent: f64, rank: EdgeRank) -> Vec<(usize, usize)> {
    let r = sfc.rows();
    let mut pairs = Vec::new();
    for i in 0..r {
        for j in (i + 1)..r {
            let v = sfc.get(i, j);
            pairs.push((if rank == EdgeRank::Absolute { v.abs() } else { v }, i, j));
        }
    }
    // Stable sort on value alone keeps the lexicographic order among ties.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let keep = (percent / 100.0 * pairs.len() as f64).ceil() as usize;
    let mut edges: Vec<(usize, usize)> = pairs[..keep].iter().flat_map(|&(_, i, j)| [(i, j), (j, i)]).collect();
    edges.sort();
    edges
}

pub fn thresholding_matches_sort_oracle() {
    let mut r = rng(21);
    for trial in 0..40 {
        let n = 4 + trial % 7;
        let mut sfc = random_corr(n, &mut r);
        if trial % 2 == 0 {
            // Coarse values force ties at the cutoff.
            sfc = sfc.map(|v| if v == 1.0 { 1.0 } else { (v * 3.0).round() / 3.0 });
        }
        for &pct in &[1.0, 2.0, 10.0, 33.0, 34.0, 50.0, 100.0] {
            for rank in [EdgeRank::Signed, EdgeRank::Absolute] {
                let topo = signal::form_graph(&sfc, pct, rank).unwrap();
                let mut got = topo.edges().to_vec();
                got.sort();
                assert_eq!(got, sort_oracle(&sfc, pct, rank), "n {n}, z {pct}, {rank:?}");
            }
        }
    }
}

pub fn four_node_example_retains_ceil_count() {
    let mut sfc = Tensor::identity(4);
    let vals = [((0, 1), 0.9), ((0, 2), 0.1), ((0, 3), 0.5), ((1, 2), 0.7), ((1, 3), -0.2), ((2, 3), 0.3)];
    for ((i, j), v) in vals {
        sfc.set(i, j, v);
        sfc.set(j, i, v);
    }
    let topo = signal::form_graph(&sfc, 34.0, EdgeRank::Signed).unwrap();
    let mut got = topo.edges().to_vec();
    got.sort();
    assert_eq!(got, sort_oracle(&sfc, 34.0, EdgeRank::Signed));
    // ceil(0.34 · 6) = 3 pairs.
    assert_eq!(topo.edge_count(), 6);
}

struct MessageCase {
    topo: GraphTopology,
    emb: Tensor,
    lag: Tensor,
    w: usize,
    d: usize,
    k: usize,
}

fn message_case(seed: u64) -> MessageCase {
    let mut r = rng(seed);
    let n = 4;
    let sfc = random_corr(n, &mut r);
    let topo = signal::form_graph(&sfc, 50.0, EdgeRank::Signed).unwrap();
    let (w, d, k) = (3, 2, 3);
    MessageCase {
        emb: random(&[w, n, d], &mut r),
        lag: random(&[topo.edge_count(), w, k], &mut r),
        topo,
        w,
        d,
        k,
    }
}

fn bind(tape: &mut Tape, c: &MessageCase) -> (NodeEmbeddings, LagActivations) {
    let e = tape.leaf(c.emb.clone(), false);
    let l = tape.leaf(c.lag.clone(), false);
    let emb = NodeEmbeddings::from_stacked(tape, e).unwrap();
    let lag = LagActivations {
        var: l,
        edges: c.topo.edge_count(),
        windows: c.w,
        filters: c.k,
    };
    (emb, lag)
}

pub fn messages_match_double_loop_exactly() {
    for seed in 0..5 {
        let c = message_case(seed);
        let n = c.topo.nodes();
        let mut tape = Tape::new();
        let (emb, lag) = bind(&mut tape, &c);
        let mes = graphcorr::fusion::messages(&mut tape, &emb, &lag, &c.topo).unwrap();
        let got = tape.value(mes);
        for (e, &(_, j)) in c.topo.edges().iter().enumerate() {
            for w in 0..c.w {
                for a in 0..c.d {
                    for b in 0..c.k {
                        let expect = c.emb.data()[(w * n + j) * c.d + a] * c.lag.data()[(e * c.w + w) * c.k + b];
                        assert_eq!(got.data()[((e * c.w + w) * c.d + a) * c.k + b], expect);
                    }
                }
            }
        }
    }
}

fn naive_out(c: &MessageCase) -> Tensor {
    let n = c.topo.nodes();
    let f = c.d * (c.k + 1);
    let inv_w = 1.0 / c.w as f64;
    let mut out = Tensor::zeros(&[n, f]);
    for i in 0..n {
        for a in 0..c.d {
            let mean = (0..c.w).map(|w| c.emb.data()[(w * n + i) * c.d + a]).sum::<f64>() / c.w as f64;
            out.set(i, a, mean);
        }
    }
    for (e, &(i, j)) in c.topo.edges().iter().enumerate() {
        for w in 0..c.w {
            for a in 0..c.d {
                for b in 0..c.k {
                    let m = c.emb.data()[(w * n + j) * c.d + a] * c.lag.data()[(e * c.w + w) * c.k + b];
                    let col = c.d + a * c.k + b;
                    out.set(i, col, out.get(i, col) + m * inv_w);
                }
            }
        }
    }
    out
}

pub fn aggregate_matches_loop_oracle() {
    for seed in 0..5 {
        let c = message_case(seed);
        let oracle = naive_out(&c);

        let mut tape = Tape::new();
        let (emb, lag) = bind(&mut tape, &c);
        let mes = graphcorr::fusion::messages(&mut tape, &emb, &lag, &c.topo).unwrap();
        let out = graphcorr::fusion::aggregate_and_fuse(&mut tape, mes, &emb, &c.topo).unwrap();
        let two_step = tape.value(out).clone();
        // Aggregate block is accumulated in the same order as the oracle.
        for i in 0..c.topo.nodes() {
            assert_eq!(&two_step.row(i)[c.d..], &oracle.row(i)[c.d..]);
        }
        assert!(two_step.max_abs_diff(&oracle) <= 1e-15);

        let mut tape = Tape::new();
        let (emb, lag) = bind(&mut tape, &c);
        let fused = graphcorr::fusion::fuse(&mut tape, &emb, &lag, &c.topo).unwrap();
        assert!(tape.value(fused).max_abs_diff(&oracle) <= 1e-12);
    }
}

pub fn roc_auc_matches_pairwise_oracle() {
    let mut r = rng(31);
    for _ in 0..200 {
        let n = r.random_range(2..40);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        // Few distinct values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 * 0.25).collect();
        let (mut u, mut p, mut q) = (0.0, 0usize, 0usize);
        for a in 0..n {
            if labels[a] != 1 {
                continue;
            }
            p += 1;
            for b in 0..n {
                if labels[b] == 0 {
                    u += if scores[a] > scores[b] {
                        1.0
                    } else if scores[a] == scores[b] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        q += n - p;
        let expect = 100.0 * u / (p * q) as f64;
        assert_eq!(metrics::roc_auc(&scores, &labels).unwrap(), expect);
    }
}

/// Exact null distribution by enumerating every sign assignment.
fn enumerate_wilcoxon(d: &[f64]) -> (f64, f64, f64) {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| ranks[b]).sum();
        if w >= observed - 1e-9 {
            ge += 1;
        }
        if w <= observed + 1e-9 {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let (pg, pl) = (ge as f64 / total, le as f64 / total);
    (pg, pl, (2.0 * pg.min(pl)).min(1.0))
}

pub fn wilcoxon_matches_enumeration() {
    let mut r = rng(41);
    for _ in 0..300 {
        let n = r.random_range(5..=10);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let Ok(t) = metrics::wilcoxon_signed_rank(&a, &b) else {
            assert!(d.iter().all(|&x| x == 0.0));
            continue;
        };
        let (pg, pl, p2) = enumerate_wilcoxon(&d);
        assert_eq!((t.p_greater, t.p_less, t.p_two_sided), (pg, pl, p2), "{a:?} vs {b:?}");
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn windowed_pearson_matches_double_loop() {
        super::windowed_pearson_matches_double_loop()
    }

    #[test]
    fn lag_xcorr_matches_triple_loop_exactly() {
        super::lag_xcorr_matches_triple_loop_exactly()
    }

    #[test]
    fn lag_xcorr_recovers_planted_shift() {
        super::lag_xcorr_recovers_planted_shift()
    }

    #[test]
    fn thresholding_matches_sort_oracle() {
        super::thresholding_matches_sort_oracle()
    }

    #[test]
    fn four_node_example_retains_ceil_count() {
        super::four_node_example_retains_ceil_count()
    }

    #[test]
    fn messages_match_double_loop_exactly() {
        super::messages_match_double_loop_exactly()
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        super::aggregate_matches_loop_oracle()
    }

    #[test]
    fn roc_auc_matches_pairwise_oracle() {
        super::roc_auc_matches_pairwise_oracle()
    }

    #[test]
    fn wilcoxon_matches_enumeration() {
        super::wilcoxon_matches_enumeration()
    }
}

mod common;

use std::collections::HashMap;

use common::*;
use graphcorr::embedder::{self, EmbedderConfig, NodeEmbeddings};
use graphcorr::explain;
use graphcorr::lagfilter::{self, LagActivations};
use graphcorr::metrics;
use graphcorr::model::{self, ClassifierConfig, ClassifierKind, GraphCorrConfig, GraphSettings, InputMode, Model, ModelConfig, Pool};
use graphcorr::signal::{self, EdgeRank, GraphTopology, TimeSeriesMatrix};
use graphcorr::synth::{self, SynthSpec};
use graphcorr::tensor::ParameterStore;
use graphcorr::train::{make_splits, CvPlan};
use graphcorr::{Tape, Tensor};
use proptest::prelude::*;

fn series_strategy(nodes: usize, frames: usize) -> impl Strategy<Value = TimeSeriesMatrix> {
    prop::collection::vec(-10.0f64..10.0, nodes * frames).prop_map(move |data| {
        TimeSeriesMatrix::new("p", 0, Tensor::new(vec![nodes, frames], data).unwrap()).unwrap()
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = t.clone();
    for (i, &p) in perm.iter().enumerate() {
        let n = t.cols();
        out.data_mut()[p * n..(p + 1) * n].copy_from_slice(t.row(i));
    }
    out
}

fn permute_sym(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(perm[i], perm[j], t.get(i, j));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pearson_is_affine_invariant(ts in series_strategy(4, 20), a in 0.1f64..5.0, b in -3.0f64..3.0, row in 0usize..4) {
        let base = signal::static_fc(&ts).unwrap();
        let mut s = ts.signals().clone();
        for v in &mut s.data_mut()[row * 20..(row + 1) * 20] {
            *v = a * *v + b;
        }
        let moved = signal::static_fc(&TimeSeriesMatrix::new("p", 0, s).unwrap()).unwrap();
        prop_assert!(base.max_abs_diff(&moved) <= 1e-12);
    }

    #[test]
    fn form_graph_commutes_with_relabeling(seed in 0u64..1000, perm in permutation(7), pct in 1.0f64..100.0) {
        let sfc = random_corr(7, &mut rng(seed));
        let base = signal::form_graph(&sfc, pct, EdgeRank::Signed).unwrap();
        let relabeled = signal::form_graph(&permute_sym(&sfc, &perm), pct, EdgeRank::Signed).unwrap();
        let mut inverse = vec![0; 7];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let mut back: Vec<(usize, usize)> = relabeled.edges().iter().map(|&(i, j)| (inverse[i], inverse[j])).collect();
        back.sort();
        let mut expect = base.edges().to_vec();
        expect.sort();
        prop_assert_eq!(back, expect);
    }

    #[test]
    fn single_full_window_equals_static_fc(ts in series_strategy(5, 16)) {
        let fs = signal::windowed_fc(signal::WindowedFeatureSet::full_scan(&ts)).unwrap();
        prop_assert_eq!(fs.window_count(), 1);
        prop_assert!(fs.fc[0].max_abs_diff(&signal::static_fc(&ts).unwrap()) <= 1e-12);
    }

    #[test]
    fn lag_xcorr_is_bounded_and_mirrored(ts in series_strategy(4, 24), m in 0usize..6) {
        let fs = signal::window_signals(&ts, 10, 7).unwrap();
        let topo = GraphTopology::complete(4);
        let rho = lagfilter::lag_xcorr(&lagfilter::pad_signals(&fs, m), &topo).unwrap();
        prop_assert!(rho.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let lags = 2 * m + 1;
        let w_count = fs.window_count();
        let index: HashMap<(usize, usize), usize> = topo.edges().iter().enumerate().map(|(e, &p)| (p, e)).collect();
        for (&(i, j), &e) in &index {
            let rev = index[&(j, i)];
            for w in 0..w_count {
                for t in 0..lags {
                    let a = rho.data()[(e * w_count + w) * lags + t];
                    let b = rho.data()[(rev * w_count + w) * lags + (lags - 1 - t)];
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn softmax_and_layer_norm_row_statistics(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random(&[4, 7], &mut r).map(|v| 1000.0 * v);
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let s = tape.softmax_rows(v).unwrap();
        for row in 0..4 {
            prop_assert!((tape.value(s).row(row).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let gamma = tape.constant(Tensor::full(&[7], 1.0));
        let beta = tape.constant(Tensor::zeros(&[7]));
        let n = tape.layer_norm_rows(v, gamma, beta).unwrap();
        for row in 0..4 {
            let vals = tape.value(n).row(row);
            let mean = vals.iter().sum::<f64>() / 7.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
            prop_assert!(mean.abs() < 1e-10);
            // eps shrinks the variance to var/(var + eps); these rows are wide
            // enough for that to stay below 1e-8.
            prop_assert!((var - 1.0).abs() <= 1e-8, "variance {var}");
        }
    }

    #[test]
    fn roc_auc_ignores_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 12), flip in 1usize..11) {
        let labels: Vec<usize> = (0..12).map(|i| usize::from(i < flip)).collect();
        let base = metrics::roc_auc(&scores, &labels).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
        prop_assert_eq!(base, metrics::roc_auc(&moved, &labels).unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_stratified(n0 in 13usize..40, n1 in 13usize..40, seed in 0u64..100) {
        let labels: Vec<usize> = (0..n0 + n1).map(|i| usize::from(i >= n0)).collect();
        let splits = make_splits(&labels, &CvPlan { seed, ..CvPlan::default() }).unwrap();
        let mut tested = vec![0; labels.len()];
        for s in &splits {
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for &i in &s.test {
                tested[i] += 1;
            }
            for part in [&s.train, &s.val, &s.test] {
                let ones = part.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let expect = part.len() as f64 * n1 as f64 / labels.len() as f64;
                prop_assert!((ones - expect).abs() <= 1.0, "{} of {} vs {expect}", ones, part.len());
            }
        }
        prop_assert!(tested.iter().all(|&c| c == 1));
    }
}

fn random_messages_case(seed: u64, n: usize, w: usize, d: usize, k: usize) -> (GraphTopology, Tensor, Tensor) {
    let mut r = rng(seed);
    let topo = signal::form_graph(&random_corr(n, &mut r), 40.0, EdgeRank::Signed).unwrap();
    let emb = random(&[w, n, d], &mut r);
    let lag = random(&[topo.edge_count(), w, k], &mut r);
    (topo, emb, lag)
}

fn fused(topo: &GraphTopology, emb: &Tensor, lag: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let e = tape.leaf(emb.clone(), false);
    let l = tape.leaf(lag.clone(), false);
    let emb = NodeEmbeddings::from_stacked(&tape, e).unwrap();
    let s = lag.shape();
    let lag = LagActivations {
        var: l,
        edges: s[0],
        windows: s[1],
        filters: s[2],
    };
    let out = graphcorr::fusion::fuse(&mut tape, &emb, &lag, topo).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fusion_is_permutation_equivariant(seed in 0u64..1000, perm in permutation(6)) {
        let (w, d, k) = (3, 2, 2);
        let (topo, emb, lag) = random_messages_case(seed, 6, w, d, k);
        let base = fused(&topo, &emb, &lag);

        let mut emb2 = Tensor::zeros(emb.shape());
        for win in 0..w {
            for i in 0..6 {
                let src = &emb.data()[(win * 6 + i) * d..(win * 6 + i + 1) * d];
                emb2.data_mut()[(win * 6 + perm[i]) * d..(win * 6 + perm[i] + 1) * d].copy_from_slice(src);
            }
        }
        let topo2 = GraphTopology::from_edges(6, topo.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect()).unwrap();
        let index: HashMap<(usize, usize), usize> = topo2.edges().iter().enumerate().map(|(e, &p)| (p, e)).collect();
        let block = w * k;
        let mut lag2 = Tensor::zeros(lag.shape());
        for (e, &(i, j)) in topo.edges().iter().enumerate() {
            let to = index[&(perm[i], perm[j])];
            lag2.data_mut()[to * block..(to + 1) * block].copy_from_slice(&lag.data()[e * block..(e + 1) * block]);
        }
        let moved = fused(&topo2, &emb2, &lag2);
        prop_assert!(permute_rows(&base, &perm).max_abs_diff(&moved) <= 1e-12);
    }

    #[test]
    fn fusion_ignores_window_order(seed in 0u64..1000, perm in permutation(4)) {
        let (n, d, k) = (5, 2, 3);
        let (topo, emb, lag) = random_messages_case(seed, n, 4, d, k);
        let e_count = topo.edge_count();
        let mut emb2 = emb.clone();
        let mut lag2 = lag.clone();
        for (w, &p) in perm.iter().enumerate() {
            emb2.data_mut()[p * n * d..(p + 1) * n * d].copy_from_slice(&emb.data()[w * n * d..(w + 1) * n * d]);
            for e in 0..e_count {
                let (from, to) = ((e * 4 + w) * k, (e * 4 + p) * k);
                lag2.data_mut()[to..to + k].copy_from_slice(&lag.data()[from..from + k]);
            }
        }
        prop_assert!(fused(&topo, &emb, &lag).max_abs_diff(&fused(&topo, &emb2, &lag2)) <= 1e-12);
    }

    #[test]
    fn messages_are_linear_in_lag(seed in 0u64..1000, c in -3.0f64..3.0) {
        let (topo, emb, lag) = random_messages_case(seed, 5, 3, 2, 2);
        let run = |lag: &Tensor| {
            let mut tape = Tape::new();
            let e = tape.leaf(emb.clone(), false);
            let l = tape.leaf(lag.clone(), false);
            let mes = tape.edge_messages(e, l, topo.edges()).unwrap();
            let agg = tape.edge_aggregate(mes, topo.edges(), 5).unwrap();
            (tape.value(mes).clone(), tape.value(agg).clone())
        };
        let (m1, a1) = run(&lag);
        let (m2, a2) = run(&lag.map(|v| c * v));
        prop_assert!(m1.map(|v| c * v).max_abs_diff(&m2) <= 1e-12);
        prop_assert!(a1.map(|v| c * v).max_abs_diff(&a2) <= 1e-12);
    }
}

#[test]
fn dropout_identities() {
    let x = random(&[3, 4], &mut rng(1));
    let mut tape = Tape::training(graphcorr::rng::stream(0, "dropout", 0));
    let v = tape.leaf(x.clone(), false);
    let y = tape.dropout(v, 0.0).unwrap();
    assert_eq!(tape.value(y), &x);
    let mut eval = Tape::new();
    let v = eval.leaf(x.clone(), false);
    let y = eval.dropout(v, 0.7).unwrap();
    assert_eq!(eval.value(y), &x);
}

#[test]
fn embed_all_is_the_per_window_map() {
    let cfg = EmbedderConfig {
        nodes: 6,
        heads: 3,
        embed_dim: 4,
        residual: false,
    };
    let mut store = ParameterStore::new();
    embedder::init_params(&cfg, &mut store, &mut graphcorr::rng::stream(2, "init", 0)).unwrap();
    let mut r = rng(3);
    let fcs: Vec<Tensor> = (0..3).map(|_| random_corr(6, &mut r)).collect();

    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let vars: Vec<_> = fcs.iter().map(|f| tape.leaf(f.clone(), false)).collect();
    let all = embedder::embed_all(&mut tape, &vars, &params, &cfg).unwrap();
    assert_eq!(tape.shape(all.var), &[3, 6, 4]);
    for (w, f) in fcs.iter().enumerate() {
        let mut single = Tape::new();
        let params = store.bind(&mut single);
        let v = single.leaf(f.clone(), false);
        let a = embedder::attend_window(&mut single, v, &params, &cfg).unwrap();
        let e = embedder::embed_window(&mut single, a, &params).unwrap();
        assert_eq!(&all.window(&tape, w), single.value(e));
    }
}

fn classifier(kind: ClassifierKind, width: usize) -> (ClassifierConfig, ParameterStore) {
    let cfg = ModelConfig {
        nodes: width,
        classifier: ClassifierConfig {
            kind,
            hidden_dim: 7,
            dropout: 0.3,
            input_mode: InputMode::StaticFc,
            num_classes: 2,
            pool: Pool::Mean,
            fc_layers: 2,
        },
        graph: GraphSettings {
            edge_percent: 30.0,
            edge_rank: EdgeRank::Signed,
        },
        graphcorr: None,
    };
    let model = Model::new(cfg.clone()).unwrap();
    let mut store = model.init_params(4).unwrap();
    for name in ["classifier.layer1.bias", "classifier.layer2.bias"] {
        let v = store.value(name).unwrap().map(|_| 0.1);
        store.set_value(name, v).unwrap();
    }
    (cfg.classifier, store)
}

#[test]
fn logits_are_invariant_to_node_relabeling() {
    let n = 8;
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let mut r = rng(8);
    let x = random(&[n, n], &mut r);
    let topo = signal::form_graph(&random_corr(n, &mut r), 25.0, EdgeRank::Signed).unwrap();
    let topo2 = GraphTopology::from_edges(n, topo.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect()).unwrap();
    for kind in [ClassifierKind::Gcn, ClassifierKind::Sage] {
        let (cfg, store) = classifier(kind, n);
        let prop = |t: &GraphTopology| match kind {
            ClassifierKind::Gcn => t.gcn_normalized_adjacency(),
            ClassifierKind::Sage => t.mean_adjacency(),
        };
        let logits = |x: &Tensor, p: Tensor| {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let x = tape.leaf(x.clone(), false);
            let p = tape.constant(p);
            let z = model::classify(&mut tape, x, p, &cfg, &params).unwrap();
            tape.value(z).clone()
        };
        let a = logits(&x, prop(&topo));
        let b = logits(&permute_rows(&x, &perm), prop(&topo2));
        assert!(a.max_abs_diff(&b) <= 1e-12, "{kind:?}");
        assert_eq!(a, logits(&x, prop(&topo)));
    }
}

fn small_augmented(node_embedder: bool) -> Model {
    Model::new(ModelConfig {
        nodes: 6,
        classifier: ClassifierConfig {
            kind: ClassifierKind::Gcn,
            hidden_dim: 6,
            dropout: 0.5,
            input_mode: InputMode::Graphcorr,
            num_classes: 2,
            pool: Pool::Mean,
            fc_layers: 1,
        },
        graph: GraphSettings {
            edge_percent: 40.0,
            edge_rank: EdgeRank::Signed,
        },
        graphcorr: Some(GraphCorrConfig {
            window_size: 10,
            stride: 5,
            max_lag: 2,
            filters: 2,
            embed_dim: 3,
            heads: 2,
            residual: false,
            node_embedder,
            zero_lag_only: false,
            windowing: true,
        }),
    })
    .unwrap()
}

#[test]
fn saliency_matches_finite_differences_and_is_nonnegative() {
    for node_embedder in [true, false] {
        let model = small_augmented(node_embedder);
        let feat = model.prepare(&toy_series(6, 25, 5)).unwrap();
        let store = model.init_params(9).unwrap();
        let report = explain::saliency(&model, &store, &feat).unwrap();
        assert!(report.is_augmented());
        assert_eq!(report.saliency.len(), 3);
        assert!(report.roi_scores.iter().all(|&s| s >= 0.0));
        assert!(report.window_scores().unwrap().iter().all(|&s| s >= 0.0));
        assert!(report.roi_scores.iter().any(|&s| s > 0.0));

        let fc = feat.windowed.as_ref().unwrap().fc.clone();
        let class = report.predicted_class;
        let numeric = numeric_grads(&fc, 1e-5, |xs| {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let vars: Vec<_> = xs.iter().map(|f| tape.leaf(f.clone(), false)).collect();
            let x = model.graphcorr_features(&mut tape, &params, &feat, &vars).unwrap();
            let prop = tape.constant(feat.propagation.clone());
            let z = model::classify(&mut tape, x, prop, &model.config().classifier, &params).unwrap();
            tape.value(z).data()[class]
        });
        let numeric: Vec<Tensor> = numeric.iter().map(|g| g.map(f64::abs)).collect();
        let err = max_rel_err(&report.saliency, &numeric);
        assert!(err < 1e-4, "node_embedder={node_embedder}: {err:e}");
    }
}

#[test]
fn most_salient_window_survives_rescaling() {
    let model = small_augmented(true);
    let feat = model.prepare(&toy_series(6, 25, 6)).unwrap();
    let store = model.init_params(2).unwrap();
    let report = explain::saliency(&model, &store, &feat).unwrap();
    let w_star = report.w_star().unwrap();
    let scaled: Vec<f64> = report.window_scores().unwrap().iter().map(|s| 7.5 * s).collect();
    let best = (0..scaled.len()).max_by(|&a, &b| scaled[a].total_cmp(&scaled[b]).then(b.cmp(&a))).unwrap();
    assert_eq!(w_star, best);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let model = small_augmented(true);
    let feat = model.prepare(&toy_series(6, 25, 7)).unwrap();
    let store = model.init_params(5).unwrap();
    assert_eq!(model.predict(&store, &feat).unwrap(), model.predict(&store, &feat).unwrap());
}

#[test]
fn accuracy_is_mean_correctness() {
    let preds = [0, 1, 1, 0, 1, 1, 0];
    let labels = [0, 1, 0, 0, 1, 0, 1];
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64;
    assert_eq!(metrics::accuracy(&preds, &labels).unwrap(), 100.0 * correct / 7.0);
}

#[test]
fn uninformative_pairs_stay_uncorrelated() {
    let spec = SynthSpec {
        subjects_per_class: 10,
        ..SynthSpec::lag_scenario(7)
    };
    let informative = [0, 1, 2, 3];
    let topo = GraphTopology::complete(30);
    let subjects = synth::generate_subjects(&spec).unwrap();
    let mut mean = vec![0.0; topo.edge_count() * 11];
    for ts in &subjects {
        let fs = signal::WindowedFeatureSet::full_scan(ts);
        let rho = lagfilter::lag_xcorr(&lagfilter::pad_signals(&fs, 5), &topo).unwrap();
        for (m, v) in mean.iter_mut().zip(rho.data()) {
            *m += v / subjects.len() as f64;
        }
    }
    for (e, &(i, j)) in topo.edges().iter().enumerate() {
        if informative.contains(&i) && informative.contains(&j) {
            continue;
        }
        for &v in &mean[e * 11..(e + 1) * 11] {
            assert!(v.abs() < 0.15, "({i},{j}) {v}");
        }
    }
}

//! Downstream graph classifiers and the end-to-end (optionally augmented)
//! model.
//!
//! A vanilla model reads node `i`'s row of the static connectivity matrix
//! as its feature vector. An augmented model reads the fused GraphCorr
//! features instead. Both run the same two-layer GCN or SAGE stack over the
//! subject's thresholded graph, pool over nodes and map to class logits.

use serde::{Deserialize, Serialize};

use crate::embedder::{self, EmbedderConfig, NodeEmbeddings};
use crate::error::{Error, Result};
use crate::fusion;
use crate::lagfilter::{self, LagFilterConfig};
use crate::rng;
use crate::signal::{self, EdgeRank, GraphTopology, TimeSeriesMatrix, WindowedFeatureSet};
use crate::tensor::{BoundParams, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Sage,
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    StaticFc,
    Graphcorr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub input_mode: InputMode,
    pub num_classes: usize,
    pub pool: Pool,
    /// Fully connected layers after pooling, the last one producing logits.
    pub fc_layers: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.fc_layers == 0 {
            return Err(Error::Config("at least one fully connected layer is required".into()));
        }
        Ok(())
    }
}

/// GraphCorr plug-in settings, including the ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphCorrConfig {
    pub window_size: usize,
    pub stride: usize,
    pub max_lag: usize,
    pub filters: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub residual: bool,
    /// When off, the raw windowed connectivity stands in for the embeddings.
    pub node_embedder: bool,
    /// When set, a single frozen zero-lag filter replaces the filter bank.
    pub zero_lag_only: bool,
    /// When off, one window spans the whole scan.
    pub windowing: bool,
}

impl GraphCorrConfig {
    pub fn lag_config(&self) -> LagFilterConfig {
        LagFilterConfig {
            max_lag: self.max_lag,
            filters: self.filters,
            zero_lag_only: self.zero_lag_only,
        }
    }

    pub fn embedder_config(&self, nodes: usize) -> EmbedderConfig {
        EmbedderConfig {
            nodes,
            heads: self.heads,
            embed_dim: self.embed_dim,
            residual: self.residual,
        }
    }

    /// Embedding width seen by the fusion step.
    pub fn effective_embed_dim(&self, nodes: usize) -> usize {
        if self.node_embedder {
            self.embed_dim
        } else {
            nodes
        }
    }

    pub fn output_width(&self, nodes: usize) -> usize {
        self.effective_embed_dim(nodes) * (self.lag_config().effective_filters() + 1)
    }
}

/// Graph formation settings shared by vanilla and augmented models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    pub edge_percent: f64,
    pub edge_rank: EdgeRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nodes: usize,
    pub classifier: ClassifierConfig,
    pub graph: GraphSettings,
    /// Required when the classifier reads GraphCorr features.
    pub graphcorr: Option<GraphCorrConfig>,
}

/// Data-only inputs of one subject, computed once before training.
#[derive(Clone, Debug)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub label: usize,
    pub sfc: Tensor,
    pub topology: GraphTopology,
    /// `Â` for GCN, the neighbor-mean matrix for SAGE.
    pub propagation: Tensor,
    pub windowed: Option<WindowedInputs>,
}

#[derive(Clone, Debug)]
pub struct WindowedInputs {
    /// Per-window connectivity, `W` tensors of `R×R`.
    pub fc: Vec<Tensor>,
    /// Lag profiles `[E, W, 2m+1]`; `None` for an edgeless graph.
    pub rho: Option<Tensor>,
}

impl WindowedInputs {
    pub fn window_count(&self) -> usize {
        self.fc.len()
    }
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `1×C` logits.
    pub logits: Var,
    /// Connectivity leaves: `[sFC]` for vanilla models, one per window for
    /// augmented ones. Gradient-tracked when requested.
    pub inputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub class: usize,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>) -> Self {
        let class = argmax(&logits);
        Self { logits, class }
    }

    /// Softmax probability of class 1, the ROC score.
    pub fn positive_score(&self) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = self.logits.iter().map(|z| (z - max).exp()).sum();
        (self.logits[1] - max).exp() / total
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.classifier.validate()?;
        if config.nodes == 0 {
            return Err(Error::Config("node count must be positive".into()));
        }
        match (config.classifier.input_mode, &config.graphcorr) {
            (InputMode::Graphcorr, None) => {
                return Err(Error::Config("graphcorr input requires graphcorr settings".into()))
            }
            (InputMode::Graphcorr, Some(gc)) => {
                gc.lag_config().validate()?;
                if gc.node_embedder {
                    gc.embedder_config(config.nodes).validate()?;
                }
                if gc.windowing && (gc.stride == 0 || gc.window_size < 2) {
                    return Err(Error::Config("window size must be ≥ 2 and stride ≥ 1".into()));
                }
            }
            (InputMode::StaticFc, _) => {}
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn augmented(&self) -> Option<&GraphCorrConfig> {
        match self.config.classifier.input_mode {
            InputMode::Graphcorr => self.config.graphcorr.as_ref(),
            InputMode::StaticFc => None,
        }
    }

    /// Node feature width expected by the classifier.
    pub fn input_width(&self) -> usize {
        match self.augmented() {
            Some(gc) => gc.output_width(self.config.nodes),
            None => self.config.nodes,
        }
    }

    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let mut rng = rng::stream(seed, "init", 0);
        if let Some(gc) = self.augmented() {
            if gc.node_embedder {
                embedder::init_params(&gc.embedder_config(self.config.nodes), &mut store, &mut rng)?;
            }
            lagfilter::init_params(&gc.lag_config(), &mut store, &mut rng)?;
        }
        let c = &self.config.classifier;
        let h = c.hidden_dim;
        let mut layer = |store: &mut ParameterStore, prefix: &str, fan_in: usize| match c.kind {
            ClassifierKind::Gcn => {
                store.insert_glorot(format!("{prefix}.weight"), &[fan_in, h], fan_in, h, &mut rng);
                store.insert(format!("{prefix}.bias"), Tensor::zeros(&[h]));
            }
            ClassifierKind::Sage => {
                store.insert_glorot(format!("{prefix}.self"), &[fan_in, h], fan_in, h, &mut rng);
                store.insert_glorot(format!("{prefix}.neigh"), &[fan_in, h], fan_in, h, &mut rng);
                store.insert(format!("{prefix}.bias"), Tensor::zeros(&[h]));
            }
        };
        layer(&mut store, "classifier.layer1", self.input_width());
        layer(&mut store, "classifier.layer2", h);
        for i in 0..c.fc_layers - 1 {
            store.insert_glorot(format!("classifier.fc{i}.weight"), &[h, h], h, h, &mut rng);
            store.insert(format!("classifier.fc{i}.bias"), Tensor::zeros(&[h]));
        }
        store.insert_glorot("classifier.out.weight", &[h, c.num_classes], h, c.num_classes, &mut rng);
        store.insert("classifier.out.bias", Tensor::zeros(&[c.num_classes]));
        Ok(store)
    }

    /// Windowed signals for a subject under this model's windowing rule.
    pub fn windows(&self, ts: &TimeSeriesMatrix) -> Result<Option<WindowedFeatureSet>> {
        let Some(gc) = self.augmented() else { return Ok(None) };
        let fs = if gc.windowing {
            signal::window_signals(ts, gc.window_size, gc.stride)?
        } else {
            WindowedFeatureSet::full_scan(ts)
        };
        Ok(Some(fs))
    }

    /// Computes every data-only quantity of a subject.
    pub fn prepare(&self, ts: &TimeSeriesMatrix) -> Result<SubjectFeatures> {
        if ts.nodes() != self.config.nodes {
            return Err(Error::Config(format!(
                "subject {} has {} nodes, model expects {}",
                ts.subject_id,
                ts.nodes(),
                self.config.nodes
            )));
        }
        if ts.label >= self.config.classifier.num_classes {
            return Err(Error::Contract(format!(
                "subject {} label {} out of range",
                ts.subject_id, ts.label
            )));
        }
        let sfc = signal::static_fc(ts)?;
        let topology = signal::form_graph(&sfc, self.config.graph.edge_percent, self.config.graph.edge_rank)?;
        let propagation = match self.config.classifier.kind {
            ClassifierKind::Gcn => topology.gcn_normalized_adjacency(),
            ClassifierKind::Sage => topology.mean_adjacency(),
        };
        let windowed = match (self.augmented(), self.windows(ts)?) {
            (Some(gc), Some(fs)) => {
                let fs = signal::windowed_fc(fs)?;
                let rho = if topology.edge_count() > 0 {
                    Some(lagfilter::lag_xcorr(&lagfilter::pad_signals(&fs, gc.max_lag), &topology)?)
                } else {
                    None
                };
                Some(WindowedInputs { fc: fs.fc, rho })
            }
            _ => None,
        };
        Ok(SubjectFeatures {
            subject_id: ts.subject_id.clone(),
            label: ts.label,
            sfc,
            topology,
            propagation,
            windowed,
        })
    }

    /// GraphCorr output `[R, D·(k+1)]` for the given connectivity leaves.
    pub fn graphcorr_features(&self, tape: &mut Tape, params: &BoundParams, feat: &SubjectFeatures, fc: &[Var]) -> Result<Var> {
        let gc = self
            .augmented()
            .ok_or_else(|| Error::Contract("model does not use graphcorr features".into()))?;
        let windowed = feat
            .windowed
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("subject {} was prepared without windows", feat.subject_id)))?;
        let emb = if gc.node_embedder {
            embedder::embed_all(tape, fc, params, &gc.embedder_config(self.config.nodes))?
        } else {
            let stacked = tape.stack(fc)?;
            NodeEmbeddings::from_stacked(tape, stacked)?
        };
        match &windowed.rho {
            Some(rho) => {
                let rho = tape.constant(rho.clone());
                let lag = lagfilter::lag_activations(tape, rho, params)?;
                fusion::fuse(tape, &emb, &lag, &feat.topology)
            }
            None => fusion::fuse_without_edges(tape, &emb, gc.lag_config().effective_filters()),
        }
    }

    /// Full forward pass to `1×C` logits.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, feat: &SubjectFeatures, track_inputs: bool) -> Result<Forward> {
        let (x, inputs) = match &feat.windowed {
            Some(w) if self.augmented().is_some() => {
                let fc: Vec<Var> = w.fc.iter().map(|f| tape.leaf(f.clone(), track_inputs)).collect();
                (self.graphcorr_features(tape, params, feat, &fc)?, fc)
            }
            _ => {
                if self.augmented().is_some() {
                    return Err(Error::Contract(format!(
                        "subject {} was prepared without windows",
                        feat.subject_id
                    )));
                }
                let s = tape.leaf(feat.sfc.clone(), track_inputs);
                (s, vec![s])
            }
        };
        let prop = tape.constant(feat.propagation.clone());
        let logits = classify(tape, x, prop, &self.config.classifier, params)?;
        Ok(Forward { logits, inputs })
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, store: &ParameterStore, feat: &SubjectFeatures) -> Result<Prediction> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let out = self.forward(&mut tape, &params, feat, false)?;
        let logits = tape.value(out.logits).data().to_vec();
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("logits of subject {}", feat.subject_id)));
        }
        Ok(Prediction::from_logits(logits))
    }
}

fn graph_layer(tape: &mut Tape, x: Var, prop: Var, params: &BoundParams, kind: ClassifierKind, prefix: &str) -> Result<Var> {
    let bias = params.get(&format!("{prefix}.bias"))?;
    let h = match kind {
        ClassifierKind::Gcn => {
            let xw = tape.matmul(x, params.get(&format!("{prefix}.weight"))?)?;
            tape.matmul(prop, xw)?
        }
        ClassifierKind::Sage => {
            let own = tape.matmul(x, params.get(&format!("{prefix}.self"))?)?;
            let neigh = tape.matmul(prop, x)?;
            let neigh = tape.matmul(neigh, params.get(&format!("{prefix}.neigh"))?)?;
            tape.add(own, neigh)?
        }
    };
    tape.add_row(h, bias)
}

/// Two graph layers (ReLU between, dropout after each), node pooling, then
/// the fully connected head. `x` is `R×F`, `prop` the `R×R` propagation
/// matrix; returns `1×C` logits.
pub fn classify(tape: &mut Tape, x: Var, prop: Var, cfg: &ClassifierConfig, params: &BoundParams) -> Result<Var> {
    let expected = match cfg.kind {
        ClassifierKind::Gcn => "classifier.layer1.weight",
        ClassifierKind::Sage => "classifier.layer1.self",
    };
    let want = tape.shape(params.get(expected)?)[0];
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != want {
        return Err(Error::Config(format!(
            "node feature width {:?} does not match classifier input width {want}",
            tape.shape(x)
        )));
    }
    let h = graph_layer(tape, x, prop, params, cfg.kind, "classifier.layer1")?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout)?;
    let h = graph_layer(tape, h, prop, params, cfg.kind, "classifier.layer2")?;
    let h = tape.dropout(h, cfg.dropout)?;
    let mut z = match cfg.pool {
        Pool::Mean => tape.mean_axis(h, 0)?,
        Pool::Max => tape.max_rows(h)?,
    };
    for i in 0..cfg.fc_layers - 1 {
        z = tape.matmul(z, params.get(&format!("classifier.fc{i}.weight"))?)?;
        z = tape.add_row(z, params.get(&format!("classifier.fc{i}.bias"))?)?;
        z = tape.relu(z);
    }
    let z = tape.matmul(z, params.get("classifier.out.weight")?)?;
    tape.add_row(z, params.get("classifier.out.bias")?)
}

/// Cross-entropy of the true class.
pub fn loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

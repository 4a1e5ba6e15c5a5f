use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How candidate node pairs are ranked when thresholding connectivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeRank {
    /// Largest correlation values first.
    #[default]
    Signed,
    /// Largest magnitudes first.
    Absolute,
}

/// Directed, symmetric edge set without self loops.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    nodes: usize,
    edges: Arc<[(usize, usize)]>,
    neighborhoods: Vec<Vec<usize>>,
}

impl GraphTopology {
    /// Builds a topology from directed edges; rejects self loops, duplicates,
    /// out-of-range indices and missing reverse edges. Edges are stored in
    /// lexicographic order.
    pub fn from_edges(nodes: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        edges.sort_unstable();
        if edges.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Contract("duplicate edge".into()));
        }
        for &(i, j) in &edges {
            if i >= nodes || j >= nodes {
                return Err(Error::Contract(format!("edge ({i}, {j}) out of range for {nodes} nodes")));
            }
            if i == j {
                return Err(Error::Contract(format!("self loop at node {i}")));
            }
            if edges.binary_search(&(j, i)).is_err() {
                return Err(Error::Contract(format!("edge ({i}, {j}) has no reverse")));
            }
        }
        let mut neighborhoods = vec![Vec::new(); nodes];
        for &(i, j) in &edges {
            neighborhoods[i].push(j);
        }
        Ok(Self {
            nodes,
            edges: edges.into(),
            neighborhoods,
        })
    }

    /// Every ordered pair of distinct nodes.
    pub fn complete(nodes: usize) -> Self {
        let edges = (0..nodes)
            .flat_map(|i| (0..nodes).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Self::from_edges(nodes, edges).expect("complete graph is valid")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &Arc<[(usize, usize)]> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighborhoods[node]
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` as a dense matrix.
    pub fn gcn_normalized_adjacency(&self) -> Tensor {
        let n = self.nodes;
        let inv_sqrt: Vec<f64> = self
            .neighborhoods
            .iter()
            .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
            .collect();
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.set(i, i, inv_sqrt[i] * inv_sqrt[i]);
            for &j in &self.neighborhoods[i] {
                a.set(i, j, inv_sqrt[i] * inv_sqrt[j]);
            }
        }
        a
    }

    /// Row-normalized adjacency (neighbor mean); isolated nodes get a zero row.
    pub fn mean_adjacency(&self) -> Tensor {
        let n = self.nodes;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let nb = &self.neighborhoods[i];
            for &j in nb {
                a.set(i, j, 1.0 / nb.len() as f64);
            }
        }
        a
    }
}

/// Number of unordered pairs kept for a percentage `z` of `pairs` candidates.
pub(crate) fn retained_pairs(pairs: usize, percent: f64) -> usize {
    // Products such as 0.07·100 land a hair above the integer; absorb that.
    let exact = percent * pairs as f64 / 100.0;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(pairs)
}

/// Keeps the strongest `z%` of off-diagonal pairs of `sfc` as edges, each
/// pair contributing both directions.
///
/// Pairs are ranked by value (or magnitude) descending; ties break by
/// ascending `(i, j)`. The retained count is `ceil(z/100 · R(R-1)/2)`.
pub fn form_graph(sfc: &Tensor, percent: f64, rank: EdgeRank) -> Result<GraphTopology> {
    let r = sfc.rows();
    if sfc.rank() != 2 || sfc.cols() != r {
        return Err(Error::shape("form_graph", sfc.shape(), &[r, r]));
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("edge percentage {percent} outside (0, 100]")));
    }
    let key = |v: f64| match rank {
        EdgeRank::Signed => v,
        EdgeRank::Absolute => v.abs(),
    };
    let mut pairs: Vec<(f64, usize, usize)> = (0..r)
        .flat_map(|i| ((i + 1)..r).map(move |j| (i, j)))
        .map(|(i, j)| (key(sfc.get(i, j)), i, j))
        .collect();
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(Error::NonFinite("connectivity matrix".into()));
    }
    // NaN was rejected above; partial_cmp also makes -0.0 tie with 0.0.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("no NaN").then((a.1, a.2).cmp(&(b.1, b.2))));
    let keep = retained_pairs(pairs.len(), percent);
    let edges = pairs[..keep]
        .iter()
        .flat_map(|&(_, i, j)| [(i, j), (j, i)])
        .collect();
    GraphTopology::from_edges(r, edges)
}

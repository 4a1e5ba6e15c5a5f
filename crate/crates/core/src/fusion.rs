//! One round of message passing: each directed edge `(i, j)` carries the
//! outer product of node `j`'s embedding with the edge's lag activation;
//! node `i` sums the window-averaged messages of its neighbors and appends
//! them to its own window-averaged embedding.
//!
//! Output layout per node: `D` embedding columns, then the `D×k` aggregate
//! flattened row-major (column `D + a·k + b` holds embedding feature `a`
//! times filter `b`).

use crate::embedder::NodeEmbeddings;
use crate::error::{Error, Result};
use crate::lagfilter::LagActivations;
use crate::signal::GraphTopology;
use crate::tensor::{Tape, Var};

/// Messages `[E, W, D·k]`.
pub fn messages(tape: &mut Tape, emb: &NodeEmbeddings, lag: &LagActivations, topo: &GraphTopology) -> Result<Var> {
    if emb.nodes != topo.nodes() || lag.edges != topo.edge_count() || lag.windows != emb.windows {
        return Err(Error::Contract(format!(
            "inconsistent message inputs: embeddings {}×{} windows, lag {} edges×{} windows, graph {} nodes/{} edges",
            emb.nodes,
            emb.windows,
            lag.edges,
            lag.windows,
            topo.nodes(),
            topo.edge_count()
        )));
    }
    tape.edge_messages(emb.var, lag.var, topo.edges())
}

/// Enhanced features `[R, D·(k+1)]`. Nodes without neighbors get a zero
/// aggregate.
pub fn aggregate_and_fuse(tape: &mut Tape, mes: Var, emb: &NodeEmbeddings, topo: &GraphTopology) -> Result<Var> {
    let (w, r, d) = (emb.windows, emb.nodes, emb.dim);
    let flat = tape.reshape(emb.var, &[w, r * d])?;
    let mean = tape.mean_axis(flat, 0)?;
    let mean = tape.reshape(mean, &[r, d])?;
    let agg = tape.edge_aggregate(mes, topo.edges(), r)?;
    tape.concat_cols(&[mean, agg])
}

/// Enhanced features straight from embeddings and lag activations; equal to
/// `aggregate_and_fuse(messages(..))` but never holds the per-edge messages.
pub fn fuse(tape: &mut Tape, emb: &NodeEmbeddings, lag: &LagActivations, topo: &GraphTopology) -> Result<Var> {
    if emb.nodes != topo.nodes() || lag.edges != topo.edge_count() || lag.windows != emb.windows {
        return Err(Error::Contract(format!(
            "inconsistent message inputs: embeddings {}×{} windows, lag {} edges×{} windows, graph {} nodes/{} edges",
            emb.nodes,
            emb.windows,
            lag.edges,
            lag.windows,
            topo.nodes(),
            topo.edge_count()
        )));
    }
    let (w, r, d) = (emb.windows, emb.nodes, emb.dim);
    let flat = tape.reshape(emb.var, &[w, r * d])?;
    let mean = tape.mean_axis(flat, 0)?;
    let mean = tape.reshape(mean, &[r, d])?;
    let agg = tape.edge_message_aggregate(emb.var, lag.var, topo.edges())?;
    tape.concat_cols(&[mean, agg])
}

/// Enhanced features for a graph without edges: `[mean_w EMB, 0]`.
pub fn fuse_without_edges(tape: &mut Tape, emb: &NodeEmbeddings, filters: usize) -> Result<Var> {
    let (w, r, d) = (emb.windows, emb.nodes, emb.dim);
    let flat = tape.reshape(emb.var, &[w, r * d])?;
    let mean = tape.mean_axis(flat, 0)?;
    let mean = tape.reshape(mean, &[r, d])?;
    let zeros = tape.constant(crate::tensor::Tensor::zeros(&[r, d * filters]));
    tape.concat_cols(&[mean, zeros])
}

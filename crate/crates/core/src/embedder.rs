//! Per-window transformer encoder over connectivity rows.
//!
//! Each window's `R×R` connectivity matrix is one sequence of `R` tokens
//! (node rows). Multi-head self-attention mixes the rows, a row-wise layer
//! norm follows, and a two-matrix GELU MLP compresses each node to `D < R`
//! features. Weights are shared across windows.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParameterStore, Tape, Tensor, Var};

pub const U_Q: &str = "embedder.u_q";
pub const U_K: &str = "embedder.u_k";
pub const U_V: &str = "embedder.u_v";
pub const LN_GAMMA: &str = "embedder.ln_gamma";
pub const LN_BETA: &str = "embedder.ln_beta";
pub const M1: &str = "embedder.m1";
pub const M2: &str = "embedder.m2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub nodes: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Adds the connectivity input to the attention output before the norm.
    pub residual: bool,
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.nodes % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide node count {}",
                self.heads, self.nodes
            )));
        }
        if self.embed_dim == 0 || self.embed_dim >= self.nodes {
            return Err(Error::Config(format!(
                "embedding width {} must lie in [1, {})",
                self.embed_dim, self.nodes
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.nodes / self.heads
    }
}

/// Adds the embedder's parameters to `store`.
///
/// `U_q`, `U_k`, `U_v` are `R×R`, holding the `H` per-head `R×d`
/// projections as consecutive column blocks.
pub fn init_params(cfg: &EmbedderConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let (r, d, dim) = (cfg.nodes, cfg.head_dim(), cfg.embed_dim);
    for name in [U_Q, U_K, U_V] {
        store.insert_glorot(name, &[r, r], r, d, rng);
    }
    store.insert(LN_GAMMA, Tensor::full(&[r], 1.0));
    store.insert(LN_BETA, Tensor::zeros(&[r]));
    store.insert_glorot(M1, &[r, dim], r, dim, rng);
    store.insert_glorot(M2, &[dim, dim], dim, dim, rng);
    Ok(())
}

/// Multi-head attention of one window: per head
/// `softmax(Q Kᵀ / √d) V` with `Q = FC·U_q[:, head]` etc., heads concatenated
/// back to `R×R`.
pub fn attend_window(tape: &mut Tape, fc: Var, params: &BoundParams, cfg: &EmbedderConfig) -> Result<Var> {
    let r = cfg.nodes;
    if tape.shape(fc) != [r, r] {
        return Err(Error::shape("attend_window", tape.shape(fc), &[r, r]));
    }
    let d = cfg.head_dim();
    let q_all = tape.matmul(fc, params.get(U_Q)?)?;
    let k_all = tape.matmul(fc, params.get(U_K)?)?;
    let v_all = tape.matmul(fc, params.get(U_V)?)?;
    if cfg.heads == 1 {
        return attention_head(tape, q_all, k_all, v_all, d);
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let q = tape.slice_cols(q_all, lo, hi)?;
        let k = tape.slice_cols(k_all, lo, hi)?;
        let v = tape.slice_cols(v_all, lo, hi)?;
        heads.push(attention_head(tape, q, k, v, d)?);
    }
    tape.concat_cols(&heads)
}

fn attention_head(tape: &mut Tape, q: Var, k: Var, v: Var, d: usize) -> Result<Var> {
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(logits)?;
    tape.matmul(weights, v)
}

/// `GELU(LN(A) · M1) · M2`, giving `R×D`.
pub fn embed_window(tape: &mut Tape, attended: Var, params: &BoundParams) -> Result<Var> {
    let normed = tape.layer_norm_rows(attended, params.get(LN_GAMMA)?, params.get(LN_BETA)?)?;
    let hidden = tape.matmul(normed, params.get(M1)?)?;
    let hidden = tape.gelu(hidden);
    tape.matmul(hidden, params.get(M2)?)
}

/// Window-specific node embeddings stacked as a `[W, R, D]` tensor.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbeddings {
    pub var: Var,
    pub windows: usize,
    pub nodes: usize,
    pub dim: usize,
}

impl NodeEmbeddings {
    /// Uses the given `[W, R, D]` variable directly (e.g. raw connectivity
    /// when the encoder is ablated).
    pub fn from_stacked(tape: &Tape, var: Var) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 3 {
            return Err(Error::shape("node_embeddings", s, &[0, 0, 0]));
        }
        Ok(Self {
            var,
            windows: s[0],
            nodes: s[1],
            dim: s[2],
        })
    }

    /// Embedding of one window as an `R×D` matrix (copied out of the tape).
    pub fn window(&self, tape: &Tape, w: usize) -> Tensor {
        let size = self.nodes * self.dim;
        let data = tape.value(self.var).data()[w * size..(w + 1) * size].to_vec();
        Tensor::new(vec![self.nodes, self.dim], data).expect("consistent shape")
    }
}

/// Runs the encoder over every window with shared weights.
pub fn embed_all(tape: &mut Tape, fc: &[Var], params: &BoundParams, cfg: &EmbedderConfig) -> Result<NodeEmbeddings> {
    if fc.is_empty() {
        return Err(Error::Contract("no windows to embed".into()));
    }
    let mut per_window = Vec::with_capacity(fc.len());
    for &f in fc {
        let mut a = attend_window(tape, f, params, cfg)?;
        if cfg.residual {
            a = tape.add(a, f)?;
        }
        per_window.push(embed_window(tape, a, params)?);
    }
    let stacked = tape.stack(&per_window)?;
    NodeEmbeddings::from_stacked(tape, stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(nodes: usize, heads: usize, embed_dim: usize) -> EmbedderConfig {
        EmbedderConfig {
            nodes,
            heads,
            embed_dim,
            residual: false,
        }
    }

    fn sym(r: usize, seed: u64) -> Tensor {
        let mut t = Tensor::identity(r);
        for i in 0..r {
            for j in (i + 1)..r {
                let v = ((seed as f64 + 1.3 * i as f64 + 0.7 * j as f64 * j as f64).sin()) * 0.8;
                t.set(i, j, v);
                t.set(j, i, v);
            }
        }
        t
    }

    #[test]
    fn rejects_bad_configurations() {
        assert!(cfg(6, 4, 2).validate().is_err());
        assert!(cfg(6, 2, 6).validate().is_err());
        assert!(cfg(400, 4, 32).validate().is_ok());
        assert_eq!(cfg(400, 4, 32).head_dim(), 100);
    }

    #[test]
    fn zero_query_key_gives_mean_row() {
        let r = 5;
        let c = cfg(r, 1, 2);
        let mut store = ParameterStore::new();
        init_params(&c, &mut store, &mut rng::stream(0, "init", 0)).unwrap();
        store.set_value(U_Q, Tensor::zeros(&[r, r])).unwrap();
        store.set_value(U_K, Tensor::zeros(&[r, r])).unwrap();
        store.set_value(U_V, Tensor::identity(r)).unwrap();
        let fc = sym(r, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(fc.clone());
        let a = attend_window(&mut tape, f, &p, &c).unwrap();
        let a = tape.value(a);
        for j in 0..r {
            let mean = (0..r).map(|i| fc.get(i, j)).sum::<f64>() / r as f64;
            for i in 0..r {
                assert!((a.get(i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_first_mlp_matrix_gives_zero_embedding() {
        let c = cfg(4, 2, 3);
        let mut store = ParameterStore::new();
        init_params(&c, &mut store, &mut rng::stream(0, "init", 0)).unwrap();
        store.set_value(M1, Tensor::zeros(&[4, 3])).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(sym(4, 1));
        let emb = embed_all(&mut tape, &[f], &p, &c).unwrap();
        assert_eq!(emb.window(&tape, 0).data(), Tensor::zeros(&[4, 3]).data());
    }

    #[test]
    fn identical_windows_give_identical_embeddings() {
        let c = cfg(6, 3, 4);
        let mut store = ParameterStore::new();
        init_params(&c, &mut store, &mut rng::stream(2, "init", 0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let fc: Vec<Var> = (0..3).map(|_| tape.constant(sym(6, 9))).collect();
        let emb = embed_all(&mut tape, &fc, &p, &c).unwrap();
        assert_eq!((emb.windows, emb.nodes, emb.dim), (3, 6, 4));
        assert_eq!(emb.window(&tape, 0), emb.window(&tape, 2));
    }
}

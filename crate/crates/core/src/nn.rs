//! Transformer building blocks shared by the image encoder, the query
//! fusion block and the small language model.

use crate::params::{ParamGraph, ParamStore};
use crate::rng::stream;
use crate::tensor::{NodeId, Tensor, TensorError};

/// x·W + b. W is `[in × out]`, b `[out]`.
pub fn linear(pg: &mut ParamGraph, x: NodeId, prefix: &str) -> Result<NodeId, TensorError> {
    let w = pg.p(&format!("{prefix}.w"));
    let b = pg.p(&format!("{prefix}.b"));
    let y = pg.graph.matmul(x, w)?;
    pg.graph.add_bias(y, b)
}

pub fn layer_norm(pg: &mut ParamGraph, x: NodeId, prefix: &str) -> Result<NodeId, TensorError> {
    let g = pg.p(&format!("{prefix}.g"));
    let b = pg.p(&format!("{prefix}.b"));
    pg.graph.layer_norm(x, g, b)
}

/// Multi-head attention. Queries come from `x`; keys/values from `kv`
/// (self-attention when `kv == x`). `causal` masks future positions.
pub fn attention(
    pg: &mut ParamGraph,
    x: NodeId,
    kv: NodeId,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<NodeId, TensorError> {
    let d = *pg.graph.shape(x).last().unwrap();
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wq = pg.p(&format!("{prefix}.wq"));
    let wk = pg.p(&format!("{prefix}.wk"));
    let wv = pg.p(&format!("{prefix}.wv"));
    let q = pg.graph.matmul(x, wq)?;
    let k = pg.graph.matmul(kv, wk)?;
    let v = pg.graph.matmul(kv, wv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = pg.graph.slice_cols(q, h * head_dim, head_dim)?;
        let kh = pg.graph.slice_cols(k, h * head_dim, head_dim)?;
        let vh = pg.graph.slice_cols(v, h * head_dim, head_dim)?;
        let kt = pg.graph.transpose(kh);
        let scores = pg.graph.matmul(qh, kt)?;
        let scaled = pg.graph.mul_const(scores, scale);
        let masked = if causal {
            pg.graph.causal_mask(scaled)?
        } else {
            scaled
        };
        let weights = pg.graph.softmax(masked);
        head_outs.push(pg.graph.matmul(weights, vh)?);
    }
    let merged = pg.graph.concat_cols(&head_outs)?;
    linear(pg, merged, &format!("{prefix}.out"))
}

/// Two-layer GELU feed-forward.
pub fn ffn(pg: &mut ParamGraph, x: NodeId, prefix: &str) -> Result<NodeId, TensorError> {
    let h = linear(pg, x, &format!("{prefix}.fc1"))?;
    let a = pg.graph.gelu(h);
    linear(pg, a, &format!("{prefix}.fc2"))
}

/// Pre-LN transformer block: x + attn(ln1(x)), then x + ffn(ln2(x)).
pub fn block(
    pg: &mut ParamGraph,
    x: NodeId,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<NodeId, TensorError> {
    let n1 = layer_norm(pg, x, &format!("{prefix}.ln1"))?;
    let a = attention(pg, n1, n1, &format!("{prefix}.attn"), heads, causal)?;
    let x = pg.graph.add(x, a)?;
    let n2 = layer_norm(pg, x, &format!("{prefix}.ln2"))?;
    let f = ffn(pg, n2, &format!("{prefix}.ffn"))?;
    pg.graph.add(x, f)
}

/// Seeded init for a linear layer: fan-in scaled weights, zero bias.
/// At desk-scale widths a fixed tiny std starves the forward signal, so
/// std = 1/sqrt(fan_in) keeps activations O(1) through each layer.
pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    let mut rng = stream(seed, &format!("init/{prefix}"));
    let std = (fan_in as f64).sqrt().recip();
    store.insert(
        &format!("{prefix}.w"),
        Tensor::randn(&mut rng, vec![fan_in, fan_out], std),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(
        &format!("{prefix}.g"),
        Tensor::vector(vec![1.0; dim]),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![dim]));
}

pub fn init_attention(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) {
    for name in ["wq", "wk", "wv"] {
        let mut rng = stream(seed, &format!("init/{prefix}.{name}"));
        store.insert(
            &format!("{prefix}.{name}"),
            Tensor::randn(&mut rng, vec![dim, dim], (dim as f64).sqrt().recip()),
        );
    }
    init_linear(store, seed, &format!("{prefix}.out"), dim, dim);
}

pub fn init_block(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, ffn_dim: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, seed, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, seed, &format!("{prefix}.ffn.fc1"), dim, ffn_dim);
    init_linear(store, seed, &format!("{prefix}.ffn.fc2"), ffn_dim, dim);
}

//! Multimodal fusion: learnable-query cross-attention over image patches,
//! prompt assembly with placeholder spans, and a small decoder-only
//! language model producing the fused sequence.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn;
use crate::params::{ParamGraph, ParamStore};
use crate::rng::{stream, stream_at};
use crate::tensor::{NodeId, Tensor, TensorError};
use crate::text::{tokenize, BpeVocab, Special};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("template {0} must contain exactly one <ImageHere> and one <TextHere>")]
    BadTemplate(usize),
    #[error("prompt needs {needed} positions but the context bound is {bound}")]
    ContextOverflow { needed: usize, bound: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One of the four shipped instruction templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: usize,
    pub text: String,
}

pub const IMAGE_PLACEHOLDER: &str = "<ImageHere>";
pub const TEXT_PLACEHOLDER: &str = "<TextHere>";

const TEMPLATE_ASSET: &str = include_str!("../assets/prompt_templates.txt");

/// The four templates, ids 1..4, one per asset line.
pub fn load_templates() -> Vec<PromptTemplate> {
    TEMPLATE_ASSET
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| PromptTemplate {
            id: i + 1,
            text: l.to_string(),
        })
        .collect()
}

/// Uniform template draw, deterministic per (seed, step).
pub fn pick_prompt(templates: &[PromptTemplate], seed: u64, step: u64) -> &PromptTemplate {
    let mut rng = stream_at(seed, "prompt", step);
    &templates[rng.gen_range(0..templates.len())]
}

/// Template id fixed during evaluation so metrics are prompt-deterministic.
pub const EVAL_TEMPLATE_ID: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub num_queries: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub lm_layers: usize,
    pub max_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            model_dim: 64,
            heads: 4,
            lm_layers: 2,
            max_len: 128,
        }
    }
}

/// Learnable-query block: queries self-attend, cross-attend to the patch
/// sequence, then pass through a feed-forward, all with residuals. Output
/// shape is `num_queries × model_dim` regardless of patch count.
pub fn query_fuse(
    pg: &mut ParamGraph,
    patch_feats: NodeId,
    cfg: &FusionConfig,
) -> Result<NodeId, TensorError> {
    let q0 = pg.p("fuse.queries");
    let n1 = nn::layer_norm(pg, q0, "fuse.ln1")?;
    let sa = nn::attention(pg, n1, n1, "fuse.self_attn", cfg.heads, false)?;
    let q1 = pg.graph.add(q0, sa)?;
    let n2 = nn::layer_norm(pg, q1, "fuse.ln2")?;
    let ca = nn::attention(pg, n2, patch_feats, "fuse.cross_attn", cfg.heads, false)?;
    let q2 = pg.graph.add(q1, ca)?;
    let n3 = nn::layer_norm(pg, q2, "fuse.ln3")?;
    let f = nn::ffn(pg, n3, "fuse.ffn")?;
    pg.graph.add(q2, f)
}

pub fn init_fusion(store: &mut ParamStore, seed: u64, cfg: &FusionConfig) {
    let d = cfg.model_dim;
    let mut rng = stream(seed, "init/fuse.queries");
    store.insert(
        "fuse.queries",
        Tensor::randn(&mut rng, vec![cfg.num_queries, d], 0.02),
    );
    nn::init_layer_norm(store, "fuse.ln1", d);
    nn::init_attention(store, seed, "fuse.self_attn", d);
    nn::init_layer_norm(store, "fuse.ln2", d);
    nn::init_attention(store, seed, "fuse.cross_attn", d);
    nn::init_layer_norm(store, "fuse.ln3", d);
    nn::init_linear(store, seed, "fuse.ffn.fc1", d, d * 4);
    nn::init_linear(store, seed, "fuse.ffn.fc2", d * 4, d);
}

/// Token/embedding sequence realizing the prompt, with recorded spans.
#[derive(Debug)]
pub struct PromptAssembly {
    pub embeddings: NodeId,
    pub seq_len: usize,
    pub image_span: Range<usize>,
    pub text_span: Range<usize>,
    pub instruction_span: Range<usize>,
    /// Text token ids actually embedded (after truncation).
    pub text_ids: Vec<u32>,
}

/// Embeds template tokens via the tied table and splices the query output
/// into the image placeholder and the text token embeddings into the text
/// placeholder. On overflow only the text span is truncated, from the
/// right.
pub fn assemble_prompt(
    pg: &mut ParamGraph,
    template: &PromptTemplate,
    query_out: Option<NodeId>,
    text_ids: &[u32],
    vocab: &BpeVocab,
    cfg: &FusionConfig,
) -> Result<PromptAssembly, FusionError> {
    let img_at = template
        .text
        .find(IMAGE_PLACEHOLDER)
        .ok_or(FusionError::BadTemplate(template.id))?;
    let txt_at = template
        .text
        .find(TEXT_PLACEHOLDER)
        .ok_or(FusionError::BadTemplate(template.id))?;
    if txt_at < img_at
        || template.text.matches(IMAGE_PLACEHOLDER).count() != 1
        || template.text.matches(TEXT_PLACEHOLDER).count() != 1
    {
        return Err(FusionError::BadTemplate(template.id));
    }

    let pre = &template.text[..img_at];
    let mid = &template.text[img_at + IMAGE_PLACEHOLDER.len()..txt_at];
    let post = &template.text[txt_at + TEXT_PLACEHOLDER.len()..];

    let pre_ids: Vec<usize> = std::iter::once(Special::Bos.id() as usize)
        .chain(tokenize(pre, vocab).ids.iter().map(|&i| i as usize))
        .collect();
    let mid_ids: Vec<usize> = tokenize(mid, vocab).ids.iter().map(|&i| i as usize).collect();
    let post_ids: Vec<usize> = tokenize(post, vocab)
        .ids
        .iter()
        .map(|&i| i as usize)
        .chain(std::iter::once(Special::Eos.id() as usize))
        .collect();

    let q_len = query_out.map(|id| pg.graph.shape(id)[0]).unwrap_or(0);
    let fixed = pre_ids.len() + q_len + mid_ids.len() + post_ids.len();
    if fixed > cfg.max_len {
        return Err(FusionError::ContextOverflow {
            needed: fixed,
            bound: cfg.max_len,
        });
    }
    let text_budget = cfg.max_len - fixed;
    let kept_text: Vec<u32> = text_ids.iter().take(text_budget).cloned().collect();
    let kept_usize: Vec<usize> = kept_text.iter().map(|&i| i as usize).collect();

    let mut parts = Vec::new();
    let mut cursor = 0usize;
    let pre_emb = crate::text::embed_tokens(pg, "lm.tok_emb", &pre_ids)?;
    parts.push(pre_emb);
    cursor += pre_ids.len();

    let image_span = cursor..cursor + q_len;
    if let Some(q) = query_out {
        parts.push(q);
        cursor += q_len;
    }

    if !mid_ids.is_empty() {
        let mid_emb = crate::text::embed_tokens(pg, "lm.tok_emb", &mid_ids)?;
        parts.push(mid_emb);
        cursor += mid_ids.len();
    }

    let text_span = cursor..cursor + kept_usize.len();
    if !kept_usize.is_empty() {
        let text_emb = crate::text::embed_tokens(pg, "lm.tok_emb", &kept_usize)?;
        parts.push(text_emb);
        cursor += kept_usize.len();
    }

    let instruction_span = cursor..cursor + post_ids.len();
    let post_emb = crate::text::embed_tokens(pg, "lm.tok_emb", &post_ids)?;
    parts.push(post_emb);
    cursor += post_ids.len();

    let embeddings = pg.graph.concat_rows(&parts)?;
    Ok(PromptAssembly {
        embeddings,
        seq_len: cursor,
        image_span,
        text_span,
        instruction_span,
        text_ids: kept_text,
    })
}

/// Decoder-only forward: positions added, causal blocks, final layer-norm.
/// Returns hidden states for the full sequence.
pub fn lm_forward(
    pg: &mut ParamGraph,
    embeddings: NodeId,
    cfg: &FusionConfig,
) -> Result<NodeId, TensorError> {
    let n = pg.graph.shape(embeddings)[0];
    let pos_table = pg.p("lm.pos");
    let positions: Vec<usize> = (0..n).collect();
    let pos = pg.graph.gather(pos_table, &positions)?;
    let mut x = pg.graph.add(embeddings, pos)?;
    for l in 0..cfg.lm_layers {
        x = nn::block(pg, x, &format!("lm.blk{l}"), cfg.heads, true)?;
    }
    nn::layer_norm(pg, x, "lm.ln_f")
}

/// Allocates LM parameters, including the token table tied with the text
/// embedding layer.
pub fn init_lm(store: &mut ParamStore, seed: u64, num_tokens: usize, cfg: &FusionConfig) {
    let d = cfg.model_dim;
    let mut rng = stream(seed, "init/lm.tok_emb");
    store.insert(
        "lm.tok_emb",
        Tensor::randn(&mut rng, vec![num_tokens, d], 0.02),
    );
    let mut rng = stream(seed, "init/lm.pos");
    store.insert("lm.pos", Tensor::randn(&mut rng, vec![cfg.max_len, d], 0.02));
    for l in 0..cfg.lm_layers {
        nn::init_block(store, seed, &format!("lm.blk{l}"), d, d * 4);
    }
    nn::init_layer_norm(store, "lm.ln_f", d);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use crate::text::bpe_train;
    use std::collections::HashMap;

    fn tiny_vocab() -> BpeVocab {
        bpe_train(&["determine if this news story is false".to_string()], 300).unwrap()
    }

    fn fused_store(cfg: &FusionConfig, vocab: &BpeVocab) -> ParamStore {
        let mut store = ParamStore::new();
        init_fusion(&mut store, 3, cfg);
        init_lm(&mut store, 3, vocab.num_tokens(), cfg);
        store
    }

    #[test]
    fn four_templates_with_both_placeholders() {
        let templates = load_templates();
        assert_eq!(templates.len(), 4);
        for t in &templates {
            assert_eq!(t.text.matches(IMAGE_PLACEHOLDER).count(), 1, "template {}", t.id);
            assert_eq!(t.text.matches(TEXT_PLACEHOLDER).count(), 1, "template {}", t.id);
            assert!(t.text.contains("<Img>") && t.text.contains("###Assistant:"));
        }
        assert!(templates.iter().any(|t| t.id == EVAL_TEMPLATE_ID));
    }

    #[test]
    fn pick_prompt_is_deterministic_and_roughly_uniform() {
        let templates = load_templates();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for step in 0..4000 {
            let a = pick_prompt(&templates, 9, step);
            let b = pick_prompt(&templates, 9, step);
            assert_eq!(a.id, b.id);
            *counts.entry(a.id).or_insert(0) += 1;
        }
        for id in 1..=4 {
            let c = counts[&id] as f64 / 4000.0;
            assert!((c - 0.25).abs() < 0.05, "template {id} drawn {c}");
        }
    }

    #[test]
    fn query_fuse_output_is_query_shaped() {
        let cfg = FusionConfig::default();
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let patches = Tensor::randn(&mut crate::rng::stream(4, "t"), vec![16, cfg.model_dim], 1.0);
        let pid = pg.graph.input(&patches);
        let out = query_fuse(&mut pg, pid, &cfg).unwrap();
        assert_eq!(g.shape(out), &[cfg.num_queries, cfg.model_dim]);
    }

    #[test]
    fn query_fuse_ignores_patch_duplication() {
        // attention over keys is a weighted average, so repeating every
        // patch row leaves the output unchanged
        let cfg = FusionConfig::default();
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let patches = Tensor::randn(&mut crate::rng::stream(4, "t"), vec![6, cfg.model_dim], 1.0);
        let mut doubled_data = patches.data.clone();
        doubled_data.extend_from_slice(&patches.data);
        let doubled = Tensor::matrix(12, cfg.model_dim, doubled_data).unwrap();

        let run = |p: &Tensor| {
            let mut g = Graph::new();
            let mut pg = ParamGraph::new(&mut g, &store, false);
            let pid = pg.graph.input(p);
            let out = query_fuse(&mut pg, pid, &cfg).unwrap();
            g.data(out).to_vec()
        };
        let (a, b) = (run(&patches), run(&doubled));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn assembled_spans_tile_the_sequence() {
        let cfg = FusionConfig::default();
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let templates = load_templates();
        let text_ids = tokenize("a red circle", &vocab).ids;

        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let queries = Tensor::randn(&mut crate::rng::stream(4, "q"), vec![cfg.num_queries, cfg.model_dim], 1.0);
        let qid = pg.graph.input(&queries);
        let asm = assemble_prompt(&mut pg, &templates[0], Some(qid), &text_ids, &vocab, &cfg).unwrap();
        assert_eq!(g.shape(asm.embeddings)[0], asm.seq_len);
        assert!(asm.seq_len <= cfg.max_len);
        assert_eq!(asm.image_span.len(), cfg.num_queries);
        assert_eq!(asm.text_span.len(), text_ids.len());
        assert!(asm.image_span.end <= asm.text_span.start);
        assert!(asm.text_span.end <= asm.instruction_span.start);
        assert_eq!(asm.instruction_span.end, asm.seq_len);
        // query rows are spliced through verbatim
        let emb = g.data(asm.embeddings);
        let d = cfg.model_dim;
        for (i, row) in (asm.image_span.start..asm.image_span.end).enumerate() {
            assert_eq!(&emb[row * d..(row + 1) * d], &queries.data[i * d..(i + 1) * d]);
        }
    }

    #[test]
    fn overflow_truncates_text_only() {
        let cfg = FusionConfig { max_len: 112, ..FusionConfig::default() };
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let templates = load_templates();
        let long_text: Vec<u32> = (0..200).map(|i| (i % 200) as u32).collect();

        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let queries = Tensor::randn(&mut crate::rng::stream(4, "q"), vec![cfg.num_queries, cfg.model_dim], 1.0);
        let qid = pg.graph.input(&queries);
        let asm = assemble_prompt(&mut pg, &templates[2], Some(qid), &long_text, &vocab, &cfg).unwrap();
        assert_eq!(asm.seq_len, cfg.max_len);
        assert!(asm.text_ids.len() < long_text.len());
        assert_eq!(asm.text_ids[..], long_text[..asm.text_ids.len()]);
        assert_eq!(asm.image_span.len(), cfg.num_queries);
    }

    #[test]
    fn overflow_without_text_budget_is_an_error() {
        let cfg = FusionConfig { max_len: 8, ..FusionConfig::default() };
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let templates = load_templates();
        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let queries = Tensor::randn(&mut crate::rng::stream(4, "q"), vec![cfg.num_queries, cfg.model_dim], 1.0);
        let qid = pg.graph.input(&queries);
        assert!(matches!(
            assemble_prompt(&mut pg, &templates[0], Some(qid), &[], &vocab, &cfg),
            Err(FusionError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn lm_is_causal() {
        // hidden state at position t must be bit-identical no matter what
        // comes after t
        let cfg = FusionConfig::default();
        let vocab = tiny_vocab();
        let store = fused_store(&cfg, &vocab);
        let d = cfg.model_dim;
        let base = Tensor::randn(&mut crate::rng::stream(4, "seq"), vec![6, d], 0.5);
        let mut changed = base.clone();
        for v in &mut changed.data[4 * d..] {
            *v += 1.0;
        }
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let mut pg = ParamGraph::new(&mut g, &store, false);
            let x = pg.graph.input(t);
            let h = lm_forward(&mut pg, x, &cfg).unwrap();
            g.data(h).to_vec()
        };
        let (a, b) = (run(&base), run(&changed));
        assert_eq!(a[..4 * d], b[..4 * d], "prefix states must not see the future");
        assert_ne!(a[4 * d..], b[4 * d..]);
    }
}

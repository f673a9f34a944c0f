//! Training loop, evaluation and ablation protocols.
//!
//! Per step the contrastive branch (when live) produces L1 over the
//! micro-batch, the fusion+classifier branch produces L2 per record, and
//! the two combine under the uncertainty-weighted loss. The combined loss
//! is linear in L1 and L2 given the σ values, so the branch gradients are
//! computed on separate graphs (per-record classification graphs run
//! data-parallel) and scaled by the current coefficients; the σ gradients
//! come from the combined-loss graph itself. This is algebraically the
//! single-graph gradient, with a deterministic fixed-order reduction.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::contrastive::{self, ContrastiveError};
use crate::data::{DataError, NewsRecord, Split, SplitManifest};
use crate::fusion::{self, FusionError, PromptTemplate, EVAL_TEMPLATE_ID};
use crate::metrics::{Confusion, MetricsReport};
use crate::objective;
use crate::params::{ParamGraph, ParamStore, SgdMomentum};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::text::{self, BpeVocab, TextError};
use crate::vision::{self, Image};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("training diverged (non-finite {what}) at micro-batch step {step}")]
    Diverged { step: usize, what: &'static str },
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Vision(#[from] vision::VisionError),
}

/// Record with image resized and text preprocessed + tokenized.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub id: String,
    pub label: u8,
    pub image: Image,
    pub text_ids: Vec<u32>,
}

pub fn prepare_records(
    records: &[NewsRecord],
    vocab: &BpeVocab,
    image_side: usize,
) -> Vec<PreparedRecord> {
    records
        .iter()
        .map(|r| {
            let text = crate::data::preprocess_text(&r.text);
            PreparedRecord {
                id: r.id.clone(),
                label: r.label,
                image: r.image.resize(image_side),
                text_ids: text::tokenize(&text, vocab).ids,
            }
        })
        .collect()
}

/// Trains the tokenizer on the training-split texts plus the prompt
/// templates, so instruction text compresses well.
pub fn build_vocab(
    records: &[NewsRecord],
    manifest: &SplitManifest,
    vocab_size: usize,
) -> Result<BpeVocab, TextError> {
    let mut corpus: Vec<String> = manifest
        .train
        .iter()
        .filter_map(|id| records.iter().find(|r| &r.id == id))
        .map(|r| crate::data::preprocess_text(&r.text))
        .collect();
    for t in fusion::load_templates() {
        corpus.push(t.text);
    }
    text::bpe_train(&corpus, vocab_size)
}

/// Allocates every parameter group for a run, with the momentum encoder
/// starting as a bit-exact copy of the online encoder.
pub fn init_params(cfg: &RunConfig, vocab: &BpeVocab) -> ParamStore {
    let mut store = ParamStore::new();
    let enc = cfg.encoder_config();
    vision::init_encoder(&mut store, cfg.seed, "enc.online", &enc);
    store.copy_prefix("enc.online.", "enc.momentum.");
    let fusion_cfg = cfg.fusion_config();
    fusion::init_fusion(&mut store, cfg.seed, &fusion_cfg);
    fusion::init_lm(&mut store, cfg.seed, vocab.num_tokens(), &fusion_cfg);
    objective::init_classifier(&mut store, cfg.seed, cfg.model_dim, cfg.cls_hidden);
    objective::init_awl(&mut store);
    store
}

/// Forward pass + classification loss for one record. Returns the graph
/// (for backward), the loss node value and the logits.
pub fn classification_graph(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &BpeVocab,
    template: &PromptTemplate,
    rec: &PreparedRecord,
    trainable: bool,
) -> Result<(Graph, crate::tensor::NodeId, [f64; 2]), HarnessError> {
    let mut g = Graph::new();
    let mut pg = ParamGraph::new(&mut g, store, trainable && !cfg.freeze_image_encoder);
    let fusion_cfg = cfg.fusion_config();
    let enc_cfg = cfg.encoder_config();

    let image_rows = if cfg.mode.use_image() {
        let patches = vision::patchify(&rec.image, &enc_cfg)?;
        let pid = pg.graph.input(&patches);
        let (_pooled, patch_seq) = vision::encode_patches(&mut pg, pid, "enc.online", &enc_cfg)?;
        pg.set_trainable(trainable);
        Some(if cfg.mode.fusion_live() {
            fusion::query_fuse(&mut pg, patch_seq, &fusion_cfg)?
        } else {
            patch_seq
        })
    } else {
        pg.set_trainable(trainable);
        None
    };

    let text_ids: &[u32] = if cfg.mode.use_text() {
        &rec.text_ids
    } else {
        &[]
    };
    let assembly = fusion::assemble_prompt(&mut pg, template, image_rows, text_ids, vocab, &fusion_cfg)?;
    let hidden = fusion::lm_forward(&mut pg, assembly.embeddings, &fusion_cfg)?;
    let logits = objective::classify(&mut pg, hidden)?;
    let loss = pg.graph.cross_entropy(logits, &[rec.label as usize])?;
    let out = [g.data(logits)[0], g.data(logits)[1]];
    Ok((g, loss, out))
}

/// Builds the contrastive micro-batch graph: online features of both
/// views carry gradients, momentum features are detached inputs.
pub fn contrastive_graph(
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&PreparedRecord],
    step: u64,
) -> Result<(Graph, crate::tensor::NodeId), HarnessError> {
    let enc_cfg = cfg.encoder_config();
    let mut g = Graph::new();
    let mut pg = ParamGraph::new(&mut g, store, true);
    let mut qa = Vec::new();
    let mut qb = Vec::new();
    let mut ka = Vec::new();
    let mut kb = Vec::new();
    for rec in batch {
        let pair = vision::make_pair(
            &rec.image,
            &format!("{}/{step}", rec.id),
            &cfg.augs,
            cfg.seed,
        );
        let pa = vision::patchify(&pair.view_a, &enc_cfg)?;
        let pb = vision::patchify(&pair.view_b, &enc_cfg)?;
        let pa_id = pg.graph.input(&pa);
        let pb_id = pg.graph.input(&pb);
        pg.set_trainable(true);
        let (qa_i, _) = vision::encode_patches(&mut pg, pa_id, "enc.online", &enc_cfg)?;
        let (qb_i, _) = vision::encode_patches(&mut pg, pb_id, "enc.online", &enc_cfg)?;
        pg.set_trainable(false);
        let (ka_i, _) = vision::encode_patches(&mut pg, pa_id, "enc.momentum", &enc_cfg)?;
        let (kb_i, _) = vision::encode_patches(&mut pg, pb_id, "enc.momentum", &enc_cfg)?;
        qa.push(qa_i);
        qb.push(qb_i);
        ka.push(ka_i);
        kb.push(kb_i);
    }
    let qa = g.concat_rows(&qa)?;
    let qb = g.concat_rows(&qb)?;
    let ka = g.concat_rows(&ka)?;
    let kb = g.concat_rows(&kb)?;
    let logits = contrastive::similarity_logits(&mut g, qa, kb, qb, ka, cfg.sim_mode)?;
    let loss = contrastive::info_nce(&mut g, logits, cfg.tau)?;
    Ok((g, loss))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub val_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub vocab: BpeVocab,
    pub report: MetricsReport,
    pub trace: Vec<EpochTrace>,
}

/// Metadata embedded in every checkpoint header.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub vocab: String,
}

#[derive(Debug)]
struct StepLosses {
    l1: f64,
    l2: f64,
    combined: f64,
}

/// One micro-batch: gradients accumulate into the store, scaled so that
/// `accumulate` micro-batches average into one effective batch.
#[allow(clippy::too_many_arguments)]
fn micro_batch_step(
    store: &mut ParamStore,
    cfg: &RunConfig,
    vocab: &BpeVocab,
    templates: &[PromptTemplate],
    batch: &[&PreparedRecord],
    step: usize,
    record_counter: u64,
    contrastive_only: bool,
) -> Result<StepLosses, HarnessError> {
    let inv_acc = 1.0 / cfg.accumulate as f64;
    let contrastive_live = cfg.mode.contrastive_live();
    let (sigma1, sigma2) = objective::sigmas(store);
    let coef1 = 1.0 / (2.0 * sigma1 * sigma1);
    let coef2 = if cfg.awl_symmetric {
        1.0 / (2.0 * sigma2 * sigma2)
    } else {
        1.0 / (sigma2 * sigma2)
    };

    let l1 = if contrastive_live || contrastive_only {
        let (mut g, loss) = contrastive_graph(store, cfg, batch, step as u64)?;
        let value = g.scalar_value(loss);
        g.backward(loss)?;
        let scale = if contrastive_only { inv_acc } else { coef1 * inv_acc };
        store.harvest(&g, scale);
        value
    } else {
        0.0
    };
    if !l1.is_finite() {
        return Err(HarnessError::Diverged { step, what: "L1" });
    }
    if contrastive_only {
        return Ok(StepLosses {
            l1,
            l2: 0.0,
            combined: l1,
        });
    }

    // per-record classification graphs, built and differentiated in
    // parallel, reduced in record order
    let jobs: Vec<(usize, &PreparedRecord)> = batch.iter().cloned().enumerate().collect();
    let results = crate::parallel::map_indexed(jobs, |(i, rec)| {
        let template = fusion::pick_prompt(templates, cfg.seed, record_counter + i as u64);
        classification_graph(store, cfg, vocab, template, rec, true).map(|(mut g, loss, _)| {
            let value = g.scalar_value(loss);
            g.backward(loss).map(|_| (g, value))
        })
    });
    let batch_len = batch.len() as f64;
    let l2_scale = if contrastive_live { coef2 } else { 1.0 } * inv_acc / batch_len;
    let mut l2_sum = 0.0;
    for res in results {
        let (g, value) = res?.map_err(HarnessError::Tensor)?;
        l2_sum += value;
        store.harvest(&g, l2_scale);
    }
    let l2 = l2_sum / batch_len;
    if !l2.is_finite() {
        return Err(HarnessError::Diverged { step, what: "L2" });
    }

    // σ gradients and the combined loss value come from the actual
    // weighted-loss graph over the scalar branch losses
    let combined = if contrastive_live {
        let mut g = Graph::new();
        let l1_node = g.input(&Tensor::scalar(l1));
        let l2_node = g.input(&Tensor::scalar(l2));
        let mut pg = ParamGraph::new(&mut g, store, true);
        let total = objective::awl_combine(&mut pg, l1_node, l2_node, cfg.awl_symmetric)?;
        let value = g.scalar_value(total);
        g.backward(total)?;
        store.harvest(&g, inv_acc);
        value
    } else {
        l2
    };
    if !combined.is_finite() {
        return Err(HarnessError::Diverged { step, what: "loss" });
    }
    Ok(StepLosses { l1, l2, combined })
}

pub fn train(
    cfg: &RunConfig,
    records: &[NewsRecord],
    manifest: &SplitManifest,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if manifest.train.is_empty() {
        return Err(HarnessError::EmptySplit("train"));
    }
    let vocab = build_vocab(records, manifest, cfg.vocab_size)?;
    let prepared = prepare_records(records, &vocab, cfg.image_side);
    let by_id = |id: &String| {
        prepared
            .iter()
            .find(|r| &r.id == id)
            .expect("manifest id missing from records")
    };
    let train_set: Vec<&PreparedRecord> = manifest.train.iter().map(by_id).collect();
    let val_set: Vec<&PreparedRecord> = manifest.val.iter().map(by_id).collect();

    let mut store = init_params(cfg, &vocab);
    let templates = fusion::load_templates();
    let mut optimizer = SgdMomentum::new(
        cfg.lr,
        cfg.sgd_momentum,
        vec!["enc.momentum.".to_string()],
    );

    let mut step = 0usize;
    // optional contrastive-only warmup
    if cfg.pretrain_steps > 0 {
        let mut cursor = 0usize;
        for _ in 0..cfg.pretrain_steps {
            let batch: Vec<&PreparedRecord> = (0..cfg.micro_batch)
                .map(|k| train_set[(cursor + k) % train_set.len()])
                .collect();
            cursor = (cursor + cfg.micro_batch) % train_set.len();
            micro_batch_step(&mut store, cfg, &vocab, &templates, &batch, step, 0, true)?;
            step += 1;
            if step % cfg.accumulate == 0 {
                optimizer.step(&mut store);
                store.momentum_update("enc.online.", "enc.momentum.", cfg.m)?;
            }
        }
    }

    let mut best: Option<(f64, f64, ParamStore)> = None;
    let mut trace = Vec::new();
    let mut record_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("order/{epoch}")));
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(cfg.micro_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PreparedRecord> = chunk.iter().map(|&i| train_set[i]).collect();
            let losses = micro_batch_step(
                &mut store,
                cfg,
                &vocab,
                &templates,
                &batch,
                step,
                record_counter,
                false,
            )?;
            record_counter += batch.len() as u64;
            step += 1;
            steps_in_epoch += 1;
            sums.0 += losses.combined;
            sums.1 += losses.l1;
            sums.2 += losses.l2;
            if step % cfg.accumulate == 0 {
                optimizer.step(&mut store);
                if cfg.mode.contrastive_live() {
                    store.momentum_update("enc.online.", "enc.momentum.", cfg.m)?;
                }
            }
        }

        let val_report = evaluate_prepared(&store, cfg, &vocab, &val_set)?;
        let (sigma1, sigma2) = objective::sigmas(&store);
        let denom = steps_in_epoch.max(1) as f64;
        trace.push(EpochTrace {
            epoch,
            loss: sums.0 / denom,
            l1: sums.1 / denom,
            l2: sums.2 / denom,
            sigma1,
            sigma2,
            val_accuracy: val_report.accuracy,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _)) => {
                val_report.accuracy > *acc
                    || (val_report.accuracy == *acc && val_report.mean_loss < *loss)
            }
        };
        if better {
            best = Some((val_report.accuracy, val_report.mean_loss, store.clone()));
        }
    }

    let best_store = best.map(|(_, _, s)| s).unwrap_or_else(|| store.clone());
    let report = evaluate_prepared(&best_store, cfg, &vocab, &val_set)?;
    Ok(TrainOutcome {
        store: best_store,
        vocab,
        report,
        trace,
    })
}

/// Fixed template, no augmentation, argmax decision.
pub fn evaluate_prepared(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &BpeVocab,
    set: &[&PreparedRecord],
) -> Result<MetricsReport, HarnessError> {
    if set.is_empty() {
        return Err(HarnessError::EmptySplit("eval"));
    }
    let templates = fusion::load_templates();
    let template = &templates[EVAL_TEMPLATE_ID - 1];
    let jobs: Vec<&PreparedRecord> = set.to_vec();
    let results = crate::parallel::map_indexed(jobs, |rec| {
        classification_graph(store, cfg, vocab, template, rec, false)
            .map(|(g, loss, logits)| (g.scalar_value(loss), logits, rec.label))
    });
    let mut confusion = Confusion::default();
    let mut loss_sum = 0.0;
    let n = results.len();
    for res in results {
        let (loss, logits, label) = res?;
        let predicted = u8::from(logits[1] > logits[0]);
        confusion.observe(predicted, label);
        loss_sum += loss;
    }
    Ok(MetricsReport::from_confusion(confusion, loss_sum / n as f64))
}

pub fn evaluate(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &BpeVocab,
    records: &[NewsRecord],
    ids: &[String],
) -> Result<MetricsReport, HarnessError> {
    let prepared = prepare_records(records, vocab, cfg.image_side);
    let set: Vec<&PreparedRecord> = ids
        .iter()
        .filter_map(|id| prepared.iter().find(|r| &r.id == id))
        .collect();
    evaluate_prepared(store, cfg, vocab, &set)
}

/// Compares a loaded checkpoint's tensors against a freshly initialized
/// architecture, naming the first mismatching tensor.
pub fn check_architecture(expected: &ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    for (name, t) in expected.iter() {
        if !loaded.contains(name) {
            return Err(CheckpointError::ArchMismatch {
                name: name.to_string(),
                found: vec![],
                expected: t.shape.clone(),
            });
        }
        let lt = loaded.get(name);
        if lt.shape != t.shape {
            return Err(CheckpointError::ArchMismatch {
                name: name.to_string(),
                found: lt.shape.clone(),
                expected: t.shape.clone(),
            });
        }
    }
    Ok(())
}

pub fn save_outcome(
    path: &Path,
    cfg: &RunConfig,
    outcome: &TrainOutcome,
) -> Result<(), HarnessError> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        vocab: text::vocab_to_string(&outcome.vocab),
    };
    let meta_json = serde_json::to_value(&meta)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    checkpoint::save_checkpoint(path, meta_json, &outcome.store)?;
    Ok(())
}

pub fn load_outcome(path: &Path) -> Result<(RunConfig, BpeVocab, ParamStore), HarnessError> {
    let (meta_json, store) = checkpoint::load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_json)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let vocab = text::vocab_from_str(&meta.vocab)?;
    let expected = init_params(&meta.config, &vocab);
    check_architecture(&expected, &store)?;
    Ok((meta.config, vocab, store))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationProtocol {
    Modality,
    Modules,
}

impl AblationProtocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "modality" => Some(Self::Modality),
            "modules" => Some(Self::Modules),
            _ => None,
        }
    }

    pub fn modes(self) -> Vec<Mode> {
        match self {
            Self::Modality => vec![Mode::ModalityImage, Mode::ModalityText, Mode::Full],
            Self::Modules => vec![Mode::ExpA, Mode::ExpB, Mode::ExpC],
        }
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub mode: Mode,
    pub config_hash: String,
    pub report: MetricsReport,
}

/// Runs the protocol's configurations sequentially, evaluating each on
/// the test split.
pub fn ablate(
    protocol: AblationProtocol,
    base_cfg: &RunConfig,
    records: &[NewsRecord],
    manifest: &SplitManifest,
) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for mode in protocol.modes() {
        let mut cfg = base_cfg.clone();
        cfg.mode = mode;
        let outcome = train(&cfg, records, manifest)?;
        let report = evaluate(&outcome.store, &cfg, &outcome.vocab, records, &manifest.test)?;
        rows.push(AblationRow {
            mode,
            config_hash: cfg.hash(),
            report,
        });
    }
    Ok(rows)
}

/// Ablation CSV, with the flag mapping documented in the header comments.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str("# modality protocol: modality_image (no text span), modality_text (no image span), full\n");
    out.push_str("# module protocol: expA = LM + classifier (raw patch features, no contrastive),\n");
    out.push_str("#   expB = expA + contrastive loss, expC = expB + learnable-query fusion (= full)\n");
    out.push_str("mode,config_hash,accuracy,precision,recall,f1\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            row.mode.name(),
            row.config_hash,
            row.report.accuracy,
            row.report.precision,
            row.report.recall,
            row.report.f1
        ));
    }
    out
}

/// Contrastive sanity protocol: trains the contrastive branch alone for
/// `steps` micro-batches, then measures diagonal-argmax accuracy of the
/// summed similarity matrix on a held-out batch.
pub fn contrastive_sanity(
    cfg: &RunConfig,
    records: &[NewsRecord],
    manifest: &SplitManifest,
    steps: usize,
    holdout: usize,
) -> Result<f64, HarnessError> {
    let vocab = build_vocab(records, manifest, cfg.vocab_size)?;
    let prepared = prepare_records(records, &vocab, cfg.image_side);
    let by_id = |id: &String| prepared.iter().find(|r| &r.id == id).unwrap();
    let train_set: Vec<&PreparedRecord> = manifest.train.iter().map(by_id).collect();
    let held: Vec<&PreparedRecord> = manifest
        .val
        .iter()
        .chain(&manifest.test)
        .take(holdout)
        .map(by_id)
        .collect();
    if held.len() < holdout {
        return Err(HarnessError::EmptySplit("holdout"));
    }

    let mut store = init_params(cfg, &vocab);
    let templates = fusion::load_templates();
    let mut optimizer = SgdMomentum::new(cfg.lr, cfg.sgd_momentum, vec!["enc.momentum.".into()]);
    // batches cycle a shuffled order without replacement: a duplicated
    // record inside one batch would be its own impossible negative
    let mut order_rng = stream(cfg.seed, "contrastive-sanity");
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        // cosine decay to zero: the short budget needs a settled endpoint
        optimizer.lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        let batch: Vec<&PreparedRecord> = (0..cfg.micro_batch)
            .map(|_| {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    order.shuffle(&mut order_rng);
                }
                train_set[order.pop().unwrap()]
            })
            .collect();
        micro_batch_step(&mut store, cfg, &vocab, &templates, &batch, step, 0, true)?;
        optimizer.step(&mut store);
        store.momentum_update("enc.online.", "enc.momentum.", cfg.m)?;
    }

    let b = held.len();
    let logits = {
        let enc_cfg = cfg.encoder_config();
        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let mut qa = Vec::new();
        let mut qb = Vec::new();
        let mut ka = Vec::new();
        let mut kb = Vec::new();
        for rec in &held {
            let pair = vision::make_pair(
                &rec.image,
                &format!("{}/holdout", rec.id),
                &cfg.augs,
                cfg.seed,
            );
            let pa = vision::patchify(&pair.view_a, &enc_cfg)?;
            let pb = vision::patchify(&pair.view_b, &enc_cfg)?;
            let pa_id = pg.graph.input(&pa);
            let pb_id = pg.graph.input(&pb);
            let (qa_i, _) = vision::encode_patches(&mut pg, pa_id, "enc.online", &enc_cfg)?;
            let (qb_i, _) = vision::encode_patches(&mut pg, pb_id, "enc.online", &enc_cfg)?;
            let (ka_i, _) = vision::encode_patches(&mut pg, pa_id, "enc.momentum", &enc_cfg)?;
            let (kb_i, _) = vision::encode_patches(&mut pg, pb_id, "enc.momentum", &enc_cfg)?;
            qa.push(qa_i);
            qb.push(qb_i);
            ka.push(ka_i);
            kb.push(kb_i);
        }
        let qa = g.concat_rows(&qa)?;
        let qb = g.concat_rows(&qb)?;
        let ka = g.concat_rows(&ka)?;
        let kb = g.concat_rows(&kb)?;
        let logits = contrastive::similarity_logits(&mut g, qa, kb, qb, ka, cfg.sim_mode)?;
        g.data(logits).to_vec()
    };
    Ok(contrastive::diagonal_argmax_accuracy(&logits, b))
}

/// Per-epoch trace CSV.
pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,loss,l1,l2,sigma1,sigma2,val_accuracy\n");
    for t in trace {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            t.epoch, t.loss, t.l1, t.l2, t.sigma1, t.sigma2, t.val_accuracy
        ));
    }
    out
}

/// Splits a prepared dataset by manifest split for callers that need raw
/// access (tests, benches).
pub fn split_refs<'a>(
    prepared: &'a [PreparedRecord],
    manifest: &SplitManifest,
    split: Split,
) -> Vec<&'a PreparedRecord> {
    manifest
        .ids(split)
        .iter()
        .filter_map(|id| prepared.iter().find(|r| &r.id == id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_records: n,
            mismatch_rate: 0.5,
            noise: 0.02,
            image_side: 32,
            seed: 9,
        }
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 3;
        cfg.epochs = 1;
        cfg.micro_batch = 4;
        cfg.accumulate = 1;
        cfg.lr = 0.02;
        cfg.vocab_size = 300;
        cfg.max_len = 96;
        cfg.cls_hidden = 8;
        cfg.num_queries = 2;
        cfg.image_side = 32;
        cfg.patch_size = 8;
        cfg.model_dim = 16;
        cfg.enc_layers = 1;
        cfg.lm_layers = 1;
        cfg.heads = 2;
        cfg
    }

    #[test]
    fn accumulated_micro_batches_match_one_large_batch() {
        // classification-only mode: the batch loss is a per-record mean, so
        // k accumulated micro-batches must equal one concatenated batch
        let (records, manifest) = generate_synthetic(&tiny_spec(40)).unwrap();
        let mut cfg = tiny_config();
        cfg.mode = Mode::ExpA;
        let vocab = build_vocab(&records, &manifest, cfg.vocab_size).unwrap();
        let prepared = prepare_records(&records, &vocab, cfg.image_side);
        let train_set: Vec<&PreparedRecord> =
            manifest.train.iter().take(6).map(|id| {
                prepared.iter().find(|r| &r.id == id).unwrap()
            }).collect();
        let templates = fusion::load_templates();

        let mut small_cfg = cfg.clone();
        small_cfg.accumulate = 3;
        small_cfg.micro_batch = 2;
        let mut store_a = init_params(&small_cfg, &vocab);
        let mut opt_a = SgdMomentum::new(cfg.lr, cfg.sgd_momentum, vec!["enc.momentum.".into()]);
        for (k, chunk) in train_set.chunks(2).enumerate() {
            let batch: Vec<&PreparedRecord> = chunk.to_vec();
            micro_batch_step(
                &mut store_a, &small_cfg, &vocab, &templates, &batch,
                k, (k * 2) as u64, false,
            )
            .unwrap();
        }
        opt_a.step(&mut store_a);

        let mut big_cfg = cfg.clone();
        big_cfg.accumulate = 1;
        big_cfg.micro_batch = 6;
        let mut store_b = init_params(&big_cfg, &vocab);
        let mut opt_b = SgdMomentum::new(cfg.lr, cfg.sgd_momentum, vec!["enc.momentum.".into()]);
        micro_batch_step(&mut store_b, &big_cfg, &vocab, &templates, &train_set, 0, 0, false)
            .unwrap();
        opt_b.step(&mut store_b);

        for (name, ta) in store_a.iter() {
            let tb = store_b.get(name);
            for (a, b) in ta.data.iter().zip(&tb.data) {
                assert!(
                    (a - b).abs() < 1e-10,
                    "{name} differs after one step: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn momentum_encoder_receives_no_gradients() {
        let (records, manifest) = generate_synthetic(&tiny_spec(12)).unwrap();
        let cfg = tiny_config();
        let vocab = build_vocab(&records, &manifest, cfg.vocab_size).unwrap();
        let prepared = prepare_records(&records, &vocab, cfg.image_side);
        let batch: Vec<&PreparedRecord> = prepared.iter().take(3).collect();
        let store = init_params(&cfg, &vocab);
        let (mut g, loss) = contrastive_graph(&store, &cfg, &batch, 0).unwrap();
        g.backward(loss).unwrap();
        let mut saw_online = false;
        for (name, id) in g.registered_params() {
            assert!(
                !name.starts_with("enc.momentum."),
                "momentum tensor {name} registered as trainable"
            );
            if name.starts_with("enc.online.") {
                saw_online = true;
                assert!(g.grad(*id).is_some(), "online tensor {name} missing grad");
            }
        }
        assert!(saw_online);
    }

    #[test]
    fn poisoned_parameters_report_divergence() {
        let (records, manifest) = generate_synthetic(&tiny_spec(12)).unwrap();
        let cfg = tiny_config();
        let vocab = build_vocab(&records, &manifest, cfg.vocab_size).unwrap();
        let prepared = prepare_records(&records, &vocab, cfg.image_side);
        let batch: Vec<&PreparedRecord> = prepared.iter().take(2).collect();
        let templates = fusion::load_templates();
        let mut store = init_params(&cfg, &vocab);
        // cross_entropy clamps probabilities, so classifier NaN saturates
        // rather than propagating; the combined-loss graph is where a
        // poisoned parameter surfaces as non-finite
        store.get_mut("awl.rho1").data[0] = f64::NAN;
        let err = micro_batch_step(&mut store, &cfg, &vocab, &templates, &batch, 5, 0, false)
            .unwrap_err();
        assert!(matches!(err, HarnessError::Diverged { step: 5, .. }), "{err}");
    }

    #[test]
    fn outcome_round_trips_and_architecture_is_checked() {
        let (records, manifest) = generate_synthetic(&tiny_spec(24)).unwrap();
        let cfg = tiny_config();
        let outcome = train(&cfg, &records, &manifest).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_outcome(&path, &cfg, &outcome).unwrap();
        let (loaded_cfg, loaded_vocab, loaded_store) = load_outcome(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded_vocab.num_tokens(), outcome.vocab.num_tokens());
        for (name, t) in outcome.store.iter() {
            assert_eq!(t.data, loaded_store.get(name).data, "{name}");
        }

        // a checkpoint missing a tensor must fail the architecture check
        let mut pruned = outcome.store.clone();
        let meta = CheckpointMeta {
            config: cfg.clone(),
            vocab: text::vocab_to_string(&outcome.vocab),
        };
        let name: String = pruned.names().next().unwrap().to_string();
        pruned.remove(&name);
        let bad = dir.path().join("bad.ckpt");
        checkpoint::save_checkpoint(&bad, serde_json::to_value(&meta).unwrap(), &pruned).unwrap();
        assert!(matches!(
            load_outcome(&bad),
            Err(HarnessError::Checkpoint(CheckpointError::ArchMismatch { .. }))
        ));
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let (records, manifest) = generate_synthetic(&tiny_spec(24)).unwrap();
        let cfg = tiny_config();
        let a = train(&cfg, &records, &manifest).unwrap();
        let b = train(&cfg, &records, &manifest).unwrap();
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
        for (name, t) in a.store.iter() {
            let u = b.store.get(name);
            assert!(t.data.iter().zip(&u.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
    }

    #[test]
    fn evaluation_matches_with_parallelism_disabled() {
        let (records, manifest) = generate_synthetic(&tiny_spec(24)).unwrap();
        let cfg = tiny_config();
        let vocab = build_vocab(&records, &manifest, cfg.vocab_size).unwrap();
        let prepared = prepare_records(&records, &vocab, cfg.image_side);
        let set = split_refs(&prepared, &manifest, Split::Val);
        let store = init_params(&cfg, &vocab);
        let on = evaluate_prepared(&store, &cfg, &vocab, &set).unwrap();
        crate::parallel::set_enabled(false);
        let off = evaluate_prepared(&store, &cfg, &vocab, &set).unwrap();
        crate::parallel::set_enabled(true);
        assert_eq!(on.accuracy, off.accuracy);
        assert_eq!(on.mean_loss.to_bits(), off.mean_loss.to_bits());
    }

    #[test]
    fn modality_text_mode_ignores_the_image() {
        let (records, manifest) = generate_synthetic(&tiny_spec(12)).unwrap();
        let mut cfg = tiny_config();
        cfg.mode = Mode::ModalityText;
        let vocab = build_vocab(&records, &manifest, cfg.vocab_size).unwrap();
        let mut prepared = prepare_records(&records, &vocab, cfg.image_side);
        let templates = fusion::load_templates();
        let store = init_params(&cfg, &vocab);
        let (_, _, logits_a) =
            classification_graph(&store, &cfg, &vocab, &templates[0], &prepared[0], false).unwrap();
        prepared[0].image = Image::filled(cfg.image_side, cfg.image_side, 0.0);
        let (_, _, logits_b) =
            classification_graph(&store, &cfg, &vocab, &templates[0], &prepared[0], false).unwrap();
        assert_eq!(logits_a, logits_b);
    }
}

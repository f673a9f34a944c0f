//! Momentum-encoder contrastive objective: batch similarity matrices and
//! the InfoNCE loss producing L1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("batch size must be >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("feature row {row} has norm {norm}, expected unit")]
    NotNormalized { row: usize, norm: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Orientation of the summed similarity matrices. `SumTranspose` adds the
/// second matrix transposed so both addends put positive pairs on the
/// diagonal; `SumPlain` adds them as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SimilarityMode {
    #[default]
    SumTranspose,
    SumPlain,
}

fn check_unit_rows(g: &Graph, id: NodeId) -> Result<(), ContrastiveError> {
    let cols = *g.shape(id).last().unwrap();
    for (row, chunk) in g.data(id).chunks(cols).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ContrastiveError::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// S1[i,j] = qa_i·kb_j and S2[i,j] = qb_i·ka_j, combined per `mode`.
/// Online features (qa, qb) carry gradients; momentum features (kb, ka)
/// are expected to be detached inputs.
pub fn similarity_logits(
    g: &mut Graph,
    qa: NodeId,
    kb: NodeId,
    qb: NodeId,
    ka: NodeId,
    mode: SimilarityMode,
) -> Result<NodeId, ContrastiveError> {
    for id in [qa, kb, qb, ka] {
        check_unit_rows(g, id)?;
    }
    let kbt = g.transpose(kb);
    let s1 = g.matmul(qa, kbt)?;
    let kat = g.transpose(ka);
    let s2 = g.matmul(qb, kat)?;
    let s2 = match mode {
        SimilarityMode::SumTranspose => g.transpose(s2),
        SimilarityMode::SumPlain => s2,
    };
    Ok(g.add(s1, s2)?)
}

/// Per-row cross-entropy of softmax(logits/τ) against the diagonal,
/// averaged over rows.
pub fn info_nce(g: &mut Graph, logits: NodeId, tau: f64) -> Result<NodeId, ContrastiveError> {
    if tau <= 0.0 {
        return Err(ContrastiveError::BadTemperature(tau));
    }
    let b = g.shape(logits)[0];
    if b < 2 {
        return Err(ContrastiveError::BatchTooSmall(b));
    }
    let scaled = g.mul_const(logits, 1.0 / tau);
    let labels: Vec<usize> = (0..b).collect();
    Ok(g.cross_entropy(scaled, &labels)?)
}

/// Fraction of rows whose argmax sits on the diagonal — the in-batch
/// retrieval accuracy used by the contrastive sanity check.
pub fn diagonal_argmax_accuracy(logits: &[f64], batch: usize) -> f64 {
    let mut hits = 0;
    for i in 0..batch {
        let row = &logits[i * batch..(i + 1) * batch];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == i {
            hits += 1;
        }
    }
    hits as f64 / batch as f64
}

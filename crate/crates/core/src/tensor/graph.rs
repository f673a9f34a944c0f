use super::{Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, f64),
    AddBias(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    SumAll(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    CausalMask(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Recip(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic tape: ops append nodes, `backward` replays them in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

fn gelu_scalar(x: f64) -> f64 {
    x * phi(x)
}

/// Standard normal CDF via erf.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

const PAR_FLOP_THRESHOLD: usize = 64 * 1024;

/// c[m×n] = a[m×k] · b[k×n]
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let fill = |i: usize, orow: &mut [f64]| {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if crate::parallel::enabled() && m * k * n >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| fill(i, orow));
        return out;
    }
    for (i, orow) in out.chunks_mut(n).enumerate() {
        fill(i, orow);
    }
    out
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// c[k×n] = a[m×k]ᵀ · b[m×n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Named trainable leaf; `harvest` matches these back to a parameter
    /// store after backward.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let id = self.leaf(t);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn registered_params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    /// Copies a node out as a plain tensor (gradient slot included).
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: matches!(n.op, Op::Leaf { requires_grad: true }),
            grad: n.grad.clone(),
        }
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        if s.len() == 2 {
            (s[0], s[1])
        } else {
            (1, s[0])
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b)))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::MulConst(a, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.mul_const(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a length-c bias vector to every row of an [r×c] matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (_, cols) = self.rows_cols(x);
        if self.nodes[b.0].shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let bias = self.nodes[b.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, bv)| v + bv))
            .collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(vec![m, n], data, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], data, Op::Transpose(a))
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.rows_cols(a);
        let data = softmax_rows(&self.nodes[a.0].data, c);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Softmax(a))
    }

    /// Exact erf-based GELU, x·Φ(x).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu(a))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (_, d) = self.rows_cols(x);
        if d < 2 {
            return Err(TensorError::Contract(format!(
                "layer_norm needs row width >= 2, got {d}"
            )));
        }
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let g = self.nodes[gain.0].data.clone();
        let b = self.nodes[bias.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter()
                    .zip(g.iter().zip(&b))
                    .map(move |(v, (gi, bi))| (v - mean) * inv * gi + bi)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::LayerNorm { x, gain, bias },
        ))
    }

    /// Mean over the batch of −log softmax(logits)[label].
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (b, c) = self.rows_cols(logits);
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: c });
        }
        let probs = softmax_rows(&self.nodes[logits.0].data, c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(1e-300).ln())
            .sum::<f64>()
            / b as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    /// [r×c] → [c], mean over rows.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        let mut data = vec![0.0; c];
        for row in self.nodes[a.0].data.chunks(c) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.push(vec![c], data, Op::MeanRows(a))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.rows_cols(a);
        let data = self.nodes[a.0]
            .data
            .chunks(c)
            .flat_map(|row| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter().map(move |v| v / norm).collect::<Vec<_>>()
            })
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::L2NormalizeRows(a))
    }

    /// Row lookup from an embedding table; backward scatter-adds into the
    /// looked-up rows only.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (v, d) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: v });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks same-width matrices along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let (_, c0) = self.rows_cols(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != c0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(vec![rows, c0], data, Op::ConcatRows(parts.to_vec())))
    }

    /// Stacks same-height matrices along the column axis (head merge).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let (r0, _) = self.rows_cols(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        for &p in parts {
            let (r, _) = self.rows_cols(p);
            if r != r0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r0 * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r0 {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(vec![r0, total], data, Op::ConcatCols(parts.to_vec())))
    }

    /// Column slice [start, start+len) of every row (head split).
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.rows_cols(x);
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], data, Op::SliceCols { x, start, len }))
    }

    /// Replaces entries above the diagonal of a square score matrix with a
    /// large negative value so softmax zeroes them out.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.rows_cols(a);
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] = MASK_NEG;
            }
        }
        Ok(self.push(vec![r, c], data, Op::CausalMask(a)))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 30.0 { x } else { (1.0 + x.exp()).ln() })
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Softplus(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| 1.0 / x).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Recip(a))
    }

    /// Reverse pass from a scalar loss. Adjoints are computed fresh each
    /// call and added into each node's gradient slot, so repeated calls
    /// accumulate until `zero_all_grads`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            // persist into the node's grad slot
            let node = &mut self.nodes[i];
            let slot = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (s, v) in slot.iter_mut().zip(&g) {
                *s += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let bump = |adj: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]| {
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                bump(adj, *a, g);
                bump(adj, *b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(x, y)| x * y).collect();
                bump(adj, *a, &da);
                bump(adj, *b, &db);
            }
            Op::AddConst(a) => bump(adj, *a, g),
            Op::MulConst(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                bump(adj, *a, &da);
            }
            Op::AddBias(x, b) => {
                bump(adj, *x, g);
                let c = self.nodes[b.0].data.len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                bump(adj, *b, &db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let (_, n) = self.rows_cols(*b);
                let da = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn(&self.nodes[a.0].data, g, m, k, n);
                bump(adj, *a, &da);
                bump(adj, *b, &db);
            }
            Op::Transpose(a) => {
                let (c, r) = self.rows_cols(NodeId(i));
                let mut da = vec![0.0; g.len()];
                for x in 0..c {
                    for y in 0..r {
                        da[y * c + x] = g[x * r + y];
                    }
                }
                bump(adj, *a, &da);
            }
            Op::Softmax(a) => {
                let (_, c) = self.rows_cols(*a);
                let y = &node.data;
                let mut da = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                bump(adj, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gv * (phi(x) + x * phi_pdf(x)))
                    .collect();
                bump(adj, *a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (_, d) = self.rows_cols(*x);
                let gv = &self.nodes[gain.0].data;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row_idx, row) in self.nodes[x.0].data.chunks(d).enumerate() {
                    let gr = &g[row_idx * d..(row_idx + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[row_idx * d + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                bump(adj, *x, &dx);
                bump(adj, *gain, &dgain);
                bump(adj, *bias, &dbias);
            }
            Op::CrossEntropy { logits, labels } => {
                let (b, c) = self.rows_cols(*logits);
                let probs = softmax_rows(&self.nodes[logits.0].data, c);
                let scale = g[0] / b as f64;
                let mut da = probs;
                for (row_idx, &l) in labels.iter().enumerate() {
                    da[row_idx * c + l] -= 1.0;
                }
                da.iter_mut().for_each(|v| *v *= scale);
                bump(adj, *logits, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                bump(adj, *a, &da);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.rows_cols(*a);
                let scale = 1.0 / r as f64;
                let mut da = vec![0.0; r * c];
                for row in da.chunks_mut(c) {
                    for (o, v) in row.iter_mut().zip(g) {
                        *o = v * scale;
                    }
                }
                bump(adj, *a, &da);
            }
            Op::L2NormalizeRows(a) => {
                let (_, c) = self.rows_cols(*a);
                let mut da = vec![0.0; g.len()];
                for ((xr, gr), dr) in self.nodes[a.0]
                    .data
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(da.chunks_mut(c))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let y: Vec<f64> = xr.iter().map(|v| v / norm).collect();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(&y).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                bump(adj, *a, &da);
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.rows_cols(*table);
                let mut da = vec![0.0; v * d];
                for (row_idx, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        da[id * d + j] += g[row_idx * d + j];
                    }
                }
                bump(adj, *table, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    bump(adj, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = self.rows_cols(NodeId(i));
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.rows_cols(p);
                    let mut dp = vec![0.0; r * w];
                    for row_idx in 0..r {
                        dp[row_idx * w..(row_idx + 1) * w].copy_from_slice(
                            &g[row_idx * total + offset..row_idx * total + offset + w],
                        );
                    }
                    bump(adj, p, &dp);
                    offset += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.rows_cols(*x);
                let mut dx = vec![0.0; r * c];
                for row_idx in 0..r {
                    dx[row_idx * c + start..row_idx * c + start + len]
                        .copy_from_slice(&g[row_idx * len..(row_idx + 1) * len]);
                }
                bump(adj, *x, &dx);
            }
            Op::CausalMask(a) => {
                let (r, c) = self.rows_cols(*a);
                let mut da = g.to_vec();
                for x in 0..r {
                    for y in (x + 1)..c {
                        da[x * c + y] = 0.0;
                    }
                }
                bump(adj, *a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| gv / x)
                    .collect();
                bump(adj, *a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gv / (1.0 + (-x).exp()))
                    .collect();
                bump(adj, *a, &da);
            }
            Op::Recip(a) => {
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| -gv / (x * x))
                    .collect();
                bump(adj, *a, &da);
            }
        }
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x);
        let d = g.data(s);
        close(d[0], 0.0900, 5e-5);
        close(d[1], 0.2447, 5e-5);
        close(d[2], 0.6652, 5e-5);
        close(d.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1000.0, 0.0, -1000.0]));
        let s = g.softmax(x);
        assert!(g.data(s).iter().all(|v| v.is_finite()));
        close(g.data(s)[0], 1.0, 1e-12);
    }

    #[test]
    fn gelu_reference_values() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![0.0, 1.0, -1.0]));
        let y = g.gelu(x);
        let d = g.data(y);
        close(d[0], 0.0, 1e-15);
        close(d[1], 0.8413, 5e-5);
        close(d[2], -(1.0 - 0.8413447460685429), 5e-5);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut g = Graph::new();
        let logits = g.input(&Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        close(g.scalar_value(loss), 2.061e-9, 1e-11);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let logits = g.input(&Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        let loss = g.cross_entropy(logits, &[1, 3]).unwrap();
        close(g.scalar_value(loss), (4.0f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.input(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            g.cross_entropy(logits, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.input(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(a),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::scalar(3.0);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let sq = g.mul(xi, xi).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xi).unwrap(), &[12.0]);
        g.zero_all_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xi).unwrap(), &[6.0]);
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gain = g.input(&Tensor::vector(vec![1.0; 4]));
        let bias = g.input(&Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = g.data(y);
        close(d.iter().sum::<f64>(), 0.0, 1e-10);
        let var = d.iter().map(|v| v * v).sum::<f64>() / 4.0;
        close(var, 1.0, 1e-4);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let m = g.causal_mask(x).unwrap();
        let s = g.softmax(m);
        let d = g.data(s);
        close(d[0], 1.0, 1e-12);
        close(d[1], 0.0, 1e-12);
        close(d[3], 0.5, 1e-12);
        close(d[8], 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn transpose_round_trip() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = g.transpose(x);
        let tt = g.transpose(t);
        assert_eq!(g.data(tt), g.data(x));
        assert_eq!(g.shape(t), &[3, 2]);
    }

    #[test]
    fn parallel_matmul_matches_sequential() {
        // large enough to cross the parallel threshold
        let mut rng = crate::rng::stream(7, "test/matmul");
        let a = Tensor::randn(&mut rng, vec![64, 64], 1.0);
        let b = Tensor::randn(&mut rng, vec![64, 64], 1.0);
        crate::parallel::set_enabled(true);
        let mut g1 = Graph::new();
        let (a1, b1) = (g1.input(&a), g1.input(&b));
        let c1 = g1.matmul(a1, b1).unwrap();
        crate::parallel::set_enabled(false);
        let mut g2 = Graph::new();
        let (a2, b2) = (g2.input(&a), g2.input(&b));
        let c2 = g2.matmul(a2, b2).unwrap();
        crate::parallel::set_enabled(true);
        assert_eq!(g1.data(c1), g2.data(c2));
    }
}

//! Finite-difference gradient verification.

use super::{Graph, NodeId, Tensor};
use crate::params::{ParamGraph, ParamStore};
use crate::rng::stream;

/// Central-difference gradient of a scalar-valued builder at `points`.
///
/// `build` receives leaf ids in the same order as `points` and must return
/// the scalar output node.
pub fn numerical_grad<F>(build: &F, points: &[Tensor], eps: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |pts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &ids);
        g.scalar_value(out)
    };
    let mut grads = Vec::with_capacity(points.len());
    for pi in 0..points.len() {
        let mut grad = vec![0.0; points[pi].data.len()];
        for ci in 0..grad.len() {
            let mut plus = points.to_vec();
            plus[pi].data[ci] += eps;
            let mut minus = points.to_vec();
            minus[pi].data[ci] -= eps;
            grad[ci] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        grads.push(grad);
    }
    grads
}

/// Max over all coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(build: &F, points: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let numeric = numerical_grad(build, points, eps);

    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &ids);
    g.backward(out).expect("grad_check builder must return a scalar");

    let mut worst: f64 = 0.0;
    for (id, num) in ids.iter().zip(&numeric) {
        let analytic = g.grad(*id).expect("leaf gradient missing");
        for (&a, &n) in analytic.iter().zip(num) {
            let rel = (a - n).abs() / n.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Like [`grad_check`] but for builders wired through a parameter store:
/// every parameter coordinate is perturbed numerically and compared to the
/// gradients harvested from one analytic backward pass.
pub fn param_grad_check<F>(store: &ParamStore, build: &F, eps: f64) -> f64
where
    F: Fn(&mut ParamGraph) -> NodeId,
{
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, s, false);
        let out = build(&mut pg);
        g.scalar_value(out)
    };

    let mut g = Graph::new();
    let mut pg = ParamGraph::new(&mut g, store, true);
    let out = build(&mut pg);
    g.backward(out)
        .expect("param_grad_check builder must return a scalar");
    let analytic: Vec<(String, Vec<f64>)> = g
        .registered_params()
        .iter()
        .map(|(name, id)| (name.clone(), g.grad(*id).unwrap().to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        for ci in 0..grad.len() {
            let mut plus = store.clone();
            plus.get_mut(name).data[ci] += eps;
            let mut minus = store.clone();
            minus.get_mut(name).data[ci] -= eps;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (grad[ci] - num).abs() / num.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

const CHECK_POINTS: u64 = 10;

fn seeded_points(seed: u64, shapes: &[(usize, usize)]) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let mut rng = stream(seed, &format!("gradcheck/{i}"));
            if r == 0 {
                Tensor::randn(&mut rng, vec![c], 0.8)
            } else {
                Tensor::randn(&mut rng, vec![r, c], 0.8)
            }
        })
        .collect()
}

fn check_op<F>(shapes: &[(usize, usize)], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    (0..CHECK_POINTS)
        .map(|seed| grad_check(&build, &seeded_points(seed, shapes), 1e-5))
        .fold(0.0, f64::max)
}

fn check_module<B, F>(build_store: B, build: F) -> f64
where
    B: Fn(u64) -> ParamStore,
    F: Fn(&mut ParamGraph) -> NodeId,
{
    (0..CHECK_POINTS)
        .map(|seed| param_grad_check(&build_store(seed), &build, 1e-5))
        .fold(0.0, f64::max)
}

/// Gradient self-check for every differentiable op and composite module,
/// 10 seeded points each. Returns `(name, max rel err)` pairs.
pub fn self_check() -> Vec<(&'static str, f64)> {
    use crate::{fusion, nn, objective};

    let mut report = Vec::new();

    report.push((
        "matmul+bias",
        check_op(&[(2, 3), (3, 2), (0, 2)], |g, ids| {
            let p = g.matmul(ids[0], ids[1]).unwrap();
            let b = g.add_bias(p, ids[2]).unwrap();
            g.sum_all(b)
        }),
    ));
    report.push((
        "softmax",
        check_op(&[(2, 3), (2, 3)], |g, ids| {
            let s = g.softmax(ids[0]);
            let m = g.mul(s, ids[1]).unwrap();
            g.sum_all(m)
        }),
    ));
    report.push((
        "gelu",
        check_op(&[(0, 5)], |g, ids| {
            let y = g.gelu(ids[0]);
            g.sum_all(y)
        }),
    ));
    report.push((
        "layer_norm",
        check_op(&[(2, 4), (0, 4), (0, 4)], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        }),
    ));
    report.push((
        "cross_entropy",
        check_op(&[(2, 3)], |g, ids| g.cross_entropy(ids[0], &[2, 0]).unwrap()),
    ));
    report.push((
        "mean+l2norm",
        check_op(&[(3, 4), (0, 4)], |g, ids| {
            let m = g.mean_rows(ids[0]);
            let n = g.l2_normalize_rows(m);
            let w = g.mul(n, ids[1]).unwrap();
            g.sum_all(w)
        }),
    ));
    report.push((
        "gather+concat+slice",
        check_op(&[(3, 4)], |g, ids| {
            let a = g.gather(ids[0], &[2, 0, 2]).unwrap();
            let b = g.concat_rows(&[a, ids[0]]).unwrap();
            let c = g.concat_cols(&[b, b]).unwrap();
            let s = g.slice_cols(c, 1, 5).unwrap();
            let t = g.transpose(s);
            let sq = g.mul(t, t).unwrap();
            g.sum_all(sq)
        }),
    ));
    report.push((
        "ln+softplus+recip",
        check_op(&[(0, 4)], |g, ids| {
            let sp = g.softplus(ids[0]);
            let shifted = g.add_const(sp, 0.5);
            let l = g.ln(shifted);
            let r = g.recip(shifted);
            let sum = g.add(l, r).unwrap();
            let scaled = g.mul_const(sum, 0.7);
            g.sum_all(scaled)
        }),
    ));

    let dim = 8;
    let heads = 2;
    report.push((
        "attention-block",
        check_module(
            |seed| {
                let mut store = ParamStore::new();
                nn::init_block(&mut store, seed, "blk", dim, dim * 2);
                store.insert(
                    "x",
                    Tensor::randn(&mut stream(seed, "gradcheck/x"), vec![3, dim], 0.8),
                );
                store
            },
            |pg| {
                let x = pg.p("x");
                let y = nn::block(pg, x, "blk", heads, true).unwrap();
                let sq = pg.graph.mul(y, y).unwrap();
                pg.graph.sum_all(sq)
            },
        ),
    ));
    let fusion_cfg = fusion::FusionConfig {
        num_queries: 2,
        model_dim: dim,
        heads,
        lm_layers: 1,
        max_len: 16,
    };
    report.push((
        "query_fuse",
        check_module(
            |seed| {
                let mut store = ParamStore::new();
                fusion::init_fusion(&mut store, seed, &fusion_cfg);
                store.insert(
                    "patches",
                    Tensor::randn(&mut stream(seed, "gradcheck/p"), vec![3, dim], 0.8),
                );
                store
            },
            |pg| {
                let p = pg.p("patches");
                let y = fusion::query_fuse(pg, p, &fusion_cfg).unwrap();
                let sq = pg.graph.mul(y, y).unwrap();
                pg.graph.sum_all(sq)
            },
        ),
    ));
    report.push((
        "classify",
        check_module(
            |seed| {
                let mut store = ParamStore::new();
                objective::init_classifier(&mut store, seed, dim, 4);
                store.insert(
                    "h",
                    Tensor::randn(&mut stream(seed, "gradcheck/h"), vec![3, dim], 0.8),
                );
                store
            },
            |pg| {
                let h = pg.p("h");
                let logits = objective::classify(pg, h).unwrap();
                pg.graph.cross_entropy(logits, &[1]).unwrap()
            },
        ),
    ));
    report.push((
        "awl_combine",
        check_module(
            |seed| {
                let mut store = ParamStore::new();
                let mut rng = stream(seed, "gradcheck/awl");
                store.insert("awl.rho1", Tensor::randn(&mut rng, vec![1], 1.0));
                store.insert("awl.rho2", Tensor::randn(&mut rng, vec![1], 1.0));
                store
            },
            |pg| {
                let l1 = pg.graph.input(&Tensor::scalar(1.3));
                let l2 = pg.graph.input(&Tensor::scalar(0.4));
                objective::awl_combine(pg, l1, l2, false).unwrap()
            },
        ),
    ));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_linear() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let err = grad_check(&|g, ids| g.sum_all(ids[0]), &[x], 1e-5);
        assert!(err < 1e-10, "linear case should be near-exact, got {err}");
    }

    #[test]
    fn quadratic_grad() {
        // loss = x·x at x = 3 -> grad 6
        let x = Tensor::scalar(3.0);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let sq = g.mul(xi, xi).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xi).unwrap(), &[6.0]);
    }

    #[test]
    fn full_suite_under_tolerance() {
        for (name, err) in self_check() {
            assert!(err < 1e-4, "{name} gradient error {err}");
        }
    }
}

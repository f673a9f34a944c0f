//! Classification head and the automatic-weighted two-task loss.

use crate::nn;
use crate::params::{ParamGraph, ParamStore};
use crate::tensor::{NodeId, Tensor, TensorError};

pub const DEFAULT_CLS_HIDDEN: usize = 32;
const SIGMA_FLOOR: f64 = 1e-4;

/// Two linear layers with a GELU between, over the mean-pooled sequence.
/// Returns logits over {real, fake}.
pub fn classify(pg: &mut ParamGraph, hidden: NodeId) -> Result<NodeId, TensorError> {
    let pooled = pg.graph.mean_rows(hidden);
    let h = nn::linear(pg, pooled, "cls.fc1")?;
    let a = pg.graph.gelu(h);
    nn::linear(pg, a, "cls.fc2")
}

pub fn init_classifier(store: &mut ParamStore, seed: u64, model_dim: usize, hidden: usize) {
    nn::init_linear(store, seed, "cls.fc1", model_dim, hidden);
    nn::init_linear(store, seed, "cls.fc2", hidden, 2);
}

/// σ is parameterized as softplus(ρ) + 1e-4 so it stays strictly positive
/// no matter what the optimizer does to ρ.
pub fn sigma_from_rho(rho: f64) -> f64 {
    let sp = if rho > 30.0 { rho } else { (1.0 + rho.exp()).ln() };
    sp + SIGMA_FLOOR
}

/// Inverse of `sigma_from_rho`, used for initialization.
pub fn rho_from_sigma(sigma: f64) -> f64 {
    ((sigma - SIGMA_FLOOR).exp() - 1.0).ln()
}

/// Allocates the learnable uncertainty scalars, both starting at σ = 1.
pub fn init_awl(store: &mut ParamStore) {
    let rho = rho_from_sigma(1.0);
    store.insert("awl.rho1", Tensor::scalar(rho));
    store.insert("awl.rho2", Tensor::scalar(rho));
}

/// Combined loss: 1/(2σ₁²)·L1 + 1/σ₂²·L2 + log(1+σ₁) + log(1+σ₂),
/// keeping the asymmetric coefficients as printed. `symmetric` switches
/// the second coefficient to the canonical 1/(2σ₂²) for comparison.
pub fn awl_combine(
    pg: &mut ParamGraph,
    l1: NodeId,
    l2: NodeId,
    symmetric: bool,
) -> Result<NodeId, TensorError> {
    let rho1 = pg.p("awl.rho1");
    let rho2 = pg.p("awl.rho2");
    let sp1 = pg.graph.softplus(rho1);
    let s1 = pg.graph.add_const(sp1, SIGMA_FLOOR);
    let sp2 = pg.graph.softplus(rho2);
    let s2 = pg.graph.add_const(sp2, SIGMA_FLOOR);

    let s1sq = pg.graph.mul(s1, s1)?;
    let inv1 = pg.graph.recip(s1sq);
    let coef1 = pg.graph.mul_const(inv1, 0.5);
    let term1 = pg.graph.mul(coef1, l1)?;

    let s2sq = pg.graph.mul(s2, s2)?;
    let inv2 = pg.graph.recip(s2sq);
    let coef2 = if symmetric {
        pg.graph.mul_const(inv2, 0.5)
    } else {
        inv2
    };
    let term2 = pg.graph.mul(coef2, l2)?;

    let p1 = pg.graph.add_const(s1, 1.0);
    let log1 = pg.graph.ln(p1);
    let p2 = pg.graph.add_const(s2, 1.0);
    let log2 = pg.graph.ln(p2);

    let a = pg.graph.add(term1, term2)?;
    let b = pg.graph.add(log1, log2)?;
    pg.graph.add(a, b)
}

/// Current σ values for logging.
pub fn sigmas(store: &ParamStore) -> (f64, f64) {
    (
        sigma_from_rho(store.get("awl.rho1").data[0]),
        sigma_from_rho(store.get("awl.rho2").data[0]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGraph;
    use crate::tensor::Graph;

    fn awl_value(l1: f64, l2: f64, sigma1: f64, sigma2: f64, symmetric: bool) -> f64 {
        let mut store = ParamStore::new();
        store.insert("awl.rho1", Tensor::scalar(rho_from_sigma(sigma1)));
        store.insert("awl.rho2", Tensor::scalar(rho_from_sigma(sigma2)));
        let mut g = Graph::new();
        let l1n = g.input(&Tensor::scalar(l1));
        let l2n = g.input(&Tensor::scalar(l2));
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let total = awl_combine(&mut pg, l1n, l2n, symmetric).unwrap();
        g.scalar_value(total)
    }

    #[test]
    fn zero_losses_at_unit_sigma_give_two_ln_two() {
        let v = awl_value(0.0, 0.0, 1.0, 1.0, false);
        assert!((v - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reference_point_with_asymmetric_coefficients() {
        // sigma1 = 1, sigma2 = 2, L1 = 2, L2 = 4:
        // 2/(2*1) + 4/4 + ln 2 + ln 3 = 2 + ln 2 + ln 3
        let v = awl_value(2.0, 4.0, 1.0, 2.0, false);
        let expected = 2.0 + 2.0f64.ln() + 3.0f64.ln();
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
        assert!((v - 3.7917).abs() < 5e-4);
    }

    #[test]
    fn symmetric_switch_halves_the_second_coefficient() {
        let asym = awl_value(0.0, 4.0, 1.0, 1.0, false);
        let sym = awl_value(0.0, 4.0, 1.0, 1.0, true);
        assert!((asym - sym - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sigma_parameterization_round_trips_and_stays_positive() {
        for s in [0.01, 0.5, 1.0, 3.0] {
            assert!((sigma_from_rho(rho_from_sigma(s)) - s).abs() < 1e-9);
        }
        for rho in [-50.0, -5.0, 0.0, 5.0, 50.0] {
            assert!(sigma_from_rho(rho) > 0.0);
        }
    }

    #[test]
    fn init_awl_starts_at_unit_sigma() {
        let mut store = ParamStore::new();
        init_awl(&mut store);
        let (s1, s2) = sigmas(&store);
        assert!((s1 - 1.0).abs() < 1e-9);
        assert!((s2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_emits_two_logits() {
        let mut store = ParamStore::new();
        init_classifier(&mut store, 0, 16, 8);
        let mut g = Graph::new();
        let mut pg = ParamGraph::new(&mut g, &store, false);
        let h = pg.graph.input(&Tensor::matrix(5, 16, vec![0.1; 80]).unwrap());
        let logits = classify(&mut pg, h).unwrap();
        assert_eq!(g.shape(logits), &[1, 2]);
    }
}

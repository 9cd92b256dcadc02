//! Training criteria: semicircle cross entropy, folded-cosine regression and
//! the flip-consistency loss.

use crate::angle::{decompose, Orientation};
use crate::error::NnError;

use super::tape::{Graph, NodeId};

/// Mean cross entropy of `logits [N,2]` against logit indices in `{0, 1}`.
pub fn loss_ce(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
    if labels.iter().any(|&l| l > 1) {
        return Err(NnError::Shape(format!("semicircle labels must be 0 or 1: {labels:?}")));
    }
    graph.cross_entropy(logits, labels)
}

/// Mean squared error between `cos_pred [N,1]` and `cos φ(θ)`.
pub fn loss_mse_cos(graph: &mut Graph, cos_pred: NodeId, thetas: &[Orientation]) -> Result<NodeId, NnError> {
    let target: Vec<f64> = thetas.iter().map(|&t| decompose(t).cos_target).collect();
    graph.mse(cos_pred, &target)
}

/// Logit index a row votes for; ties go to index 0.
pub fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}

/// Pseudo-labels for the originals: the complement of each flipped row's vote.
pub fn complement_pseudo_labels(logits_flipped: &[f64]) -> Vec<usize> {
    logits_flipped.chunks(2).map(|r| 1 - argmax2(r)).collect()
}

/// Flip-consistency loss: cross entropy of the originals' logits against the
/// complemented argmax of the mirrored images' logits. The pseudo-labels are
/// constants, so no gradient reaches `logits_flipped`.
pub fn loss_unsupervised(
    graph: &mut Graph,
    logits_orig: NodeId,
    logits_flipped: NodeId,
) -> Result<NodeId, NnError> {
    let (a, b) = (graph.value(logits_orig).shape(), graph.value(logits_flipped).shape());
    if a != b || a.len() != 2 || a[1] != 2 {
        return Err(NnError::Shape(format!(
            "paired logits must both be [N,2], got {a:?} and {b:?}"
        )));
    }
    let labels = complement_pseudo_labels(graph.value(logits_flipped).data());
    graph.cross_entropy(logits_orig, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angle::wrap;
    use crate::nn::tape::Tensor;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn logits(g: &mut Graph, rows: &[[f64; 2]]) -> NodeId {
        let data = rows.iter().flatten().copied().collect();
        g.leaf(Tensor::new(vec![rows.len(), 2], data).unwrap(), true)
    }

    fn value(g: &Graph, id: NodeId) -> f64 {
        g.value(id).item().unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_ln2() {
        for label in [0, 1] {
            let mut g = Graph::new();
            let l = logits(&mut g, &[[0.0, 0.0]]);
            let ce = loss_ce(&mut g, l, &[label]).unwrap();
            assert!((value(&g, ce) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_saturated_logits_do_not_overflow() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[[1000.0, -1000.0]]);
        let ce = loss_ce(&mut g, l, &[0]).unwrap();
        assert!(value(&g, ce).abs() < 1e-12);
    }

    #[test]
    fn ce_reference_value() {
        // −ln(e^{−0.4} / (e^{0.2} + e^{−0.4})) = ln(1 + e^{0.6}), evaluated at 50 digits:
        // 1.0374879504858856...
        let mut g = Graph::new();
        let l = logits(&mut g, &[[0.2, -0.4]]);
        let ce = loss_ce(&mut g, l, &[1]).unwrap();
        assert!((value(&g, ce) - 1.037_487_950_485_885_6).abs() < 1e-14);
    }

    #[test]
    fn ce_rejects_non_binary_labels() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[[0.0, 0.0]]);
        assert!(loss_ce(&mut g, l, &[2]).is_err());
    }

    #[test]
    fn mse_examples() {
        let thetas = [wrap(FRAC_PI_2).unwrap()];
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap(), true);
        let l = loss_mse_cos(&mut g, p, &thetas).unwrap();
        assert!(value(&g, l) < 1e-30);

        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap(), true);
        let l = loss_mse_cos(&mut g, p, &[wrap(-FRAC_PI_4).unwrap()]).unwrap();
        // (0.3 + √2/2)² = 1.0142640687119285...
        assert!((value(&g, l) - 1.014_264_068_711_928_5).abs() < 1e-14);

        let thetas: Vec<_> = [0.3, -2.0, 2.9].iter().map(|&t| wrap(t).unwrap()).collect();
        let exact: Vec<f64> = thetas.iter().map(|&t| decompose(t).cos_target).collect();
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![3, 1], exact).unwrap(), true);
        let l = loss_mse_cos(&mut g, p, &thetas).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn unsupervised_examples() {
        // flipped votes index 0 → pseudo-label 1
        let mut g = Graph::new();
        let o = logits(&mut g, &[[0.3, -0.1]]);
        let f = logits(&mut g, &[[5.0, -5.0]]);
        let lu = loss_unsupervised(&mut g, o, f).unwrap();
        let mut g2 = Graph::new();
        let o2 = logits(&mut g2, &[[0.3, -0.1]]);
        let ce = loss_ce(&mut g2, o2, &[1]).unwrap();
        assert_eq!(value(&g, lu), value(&g2, ce));

        // consistent pair
        let mut g = Graph::new();
        let o = logits(&mut g, &[[-20.0, 20.0]]);
        let f = logits(&mut g, &[[20.0, -20.0]]);
        let lu = loss_unsupervised(&mut g, o, f).unwrap();
        assert!(value(&g, lu) < 1e-12);

        // tie goes to index 0, pseudo-label 1
        assert_eq!(complement_pseudo_labels(&[0.0, 0.0]), vec![1]);
    }

    #[test]
    fn unsupervised_stops_gradient_at_pseudo_labels() {
        let mut g = Graph::new();
        let o = logits(&mut g, &[[0.3, -0.1], [0.2, 0.9]]);
        let f = logits(&mut g, &[[1.0, -1.0], [-0.5, 0.5]]);
        let lu = loss_unsupervised(&mut g, o, f).unwrap();
        g.backward(lu).unwrap();
        assert!(g.grad(f).iter().all(|&v| v == 0.0));
        assert!(g.grad(o).iter().any(|&v| v != 0.0));
    }
}

//! Central-difference gradient verification.
//!
//! The checker never touches the backward pass of the graph it verifies: it
//! rebuilds the forward computation from scratch for every perturbed input, so
//! it is an independent oracle for [`Graph::backward`].

use super::{Graph, NodeId};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves registered in order; must be deterministic.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> NodeId;
}

impl<F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId> LossBuilder for F {
    fn build(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> NodeId {
        self(g, inputs)
    }
}

/// Outcome of one gradient check: worst relative error and where it occurred.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_element: usize,
}

fn eval(builder: &impl LossBuilder, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = builder.build(&mut g, &ids);
    g.value(loss)[0]
}

/// Compare analytic gradients against central finite differences with step `h`
/// for every element of every input. Relative error uses
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
pub fn check(builder: &impl LossBuilder, inputs: &[Tensor<f64>], h: f64) -> GradCheck {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = builder.build(&mut g, &ids);
    g.backward(loss).expect("gradcheck backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| {
            vec![0.0; g.value(id).len()]
        }))
        .collect();

    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] = orig + h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] = orig - h;
            let numeric = (eval(builder, &plus) - eval(builder, &minus)) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > result.max_rel_error {
                result = GradCheck {
                    max_rel_error: rel,
                    worst_input: ti,
                    worst_element: ei,
                };
            }
        }
    }
    result
}

/// Deterministic pseudo-random tensor in [-1, 1], for test inputs.
pub fn test_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

//! Minimal reverse-mode differentiation on a per-pass tape.
//!
//! A [`Graph`] records every primitive as it is evaluated. Gradients of a
//! scalar output with respect to the marked inputs come from a single reverse
//! sweep over the tape. The graph is rebuilt for every forward pass.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{
    check_graph, gradcheck, GradCheckOutcome, GradChecker, GradcheckReport, Primitive, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{DType, Scalar, Tensor, MAX_AXES};

pub(crate) use ops::sample_into;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffError {
    #[error("dims {dims:?} need {} elements, got {len}", dims.iter().product::<usize>())]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("tensors carry at most 4 axes, got {0}")]
    TooManyAxes(usize),
    #[error("node {node} ({op}): dimension mismatch: {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {node} has no value; evaluate the graph before backward")]
    NotEvaluated { node: usize },
    #[error("backward needs a scalar output, node {node} has dims {dims:?}")]
    NonScalarOutput { node: usize, dims: Vec<usize> },
    #[error("node {node} is not a marked input")]
    NotAnInput { node: usize },
    #[error("input node {node} has no binding")]
    MissingBinding { node: usize },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.1).collect();
        let x = g.input(t(&[4, 4, 1], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 0).unwrap();
        assert_eq!(g.value(y).unwrap().data(), data.as_slice());
    }

    #[test]
    fn softmax_cross_entropy_closed_form() {
        let mut g = Graph::new();
        let z = g.input(t(&[2], &[1.0, 0.0]));
        let l = g.softmax_cross_entropy(z, 0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).unwrap().item() - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[3.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn shared_subgraph_accumulates() {
        let build = |double: bool| {
            let mut g = Graph::new();
            let x = g.input(t(&[3], &[0.3, -1.2, 2.0]));
            let e = g.exp(x).unwrap();
            let sq = g.square(e).unwrap();
            let gx = g.sum(sq).unwrap();
            let out = if double { g.add(gx, gx).unwrap() } else { gx };
            let grads = g.backward(out).unwrap();
            grads.get(x).unwrap().clone()
        };
        let single = build(false);
        let double = build(true);
        for (a, b) in single.data().iter().zip(double.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_before_evaluate_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.placeholder(&[2]);
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(DiffError::NotEvaluated { .. })));
        g.evaluate(s, &[(x, t(&[2], &[1.0, 2.0]))]).unwrap();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn evaluate_reports_offending_node() {
        let mut g = Graph::<f64>::new();
        let a = g.placeholder(&[2, 3]);
        let b = g.placeholder(&[2, 3]);
        let m = g.matmul(a, b).unwrap();
        let err = g
            .evaluate(m, &[(a, Tensor::zeros(&[2, 3])), (b, Tensor::zeros(&[2, 3]))])
            .unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                node: m.index(),
                op: "matmul",
                detail: "[2, 3] x [2, 3]".into()
            }
        );
        let bad = g.evaluate(m, &[(a, Tensor::zeros(&[3, 2]))]).unwrap_err();
        assert!(matches!(bad, DiffError::Shape { node, .. } if node == a.index()));
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[-1.0]));
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "log", .. }));
    }

    #[test]
    fn evaluate_is_pure() {
        let mut g = Graph::<f64>::new();
        let x = g.placeholder(&[3]);
        let e = g.exp(x).unwrap();
        let n = g.l2_normalize(e, 1e-8).unwrap();
        let s = g.sum(n).unwrap();
        let bind = vec![(x, t(&[3], &[0.1, 0.7, -0.4]))];
        let a = g.evaluate(s, &bind).unwrap().item();
        let b = g.evaluate(s, &bind).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn clamp_blocks_gradient_outside_and_on_bounds() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], &[-2.0, -1.0, 0.5, 3.0]));
        let c = g.clamp(x, -1.0, 1.0).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}

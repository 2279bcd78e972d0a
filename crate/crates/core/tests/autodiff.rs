use gvcl::{verify, Graph, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    for (op, err) in verify::gradient_errors(20).unwrap() {
        assert!(err < 1e-4, "{op}: relative error {err:.2e}");
    }
}

#[test]
fn forward_is_deterministic() {
    verify::forward_determinism().unwrap();
}

#[test]
fn matmul_gradient_by_hand() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.param(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let ab = g.matmul(a, b).unwrap();
    let loss = g.sum(ab).unwrap();
    assert_eq!(g.value(loss).item(), 17.0 + 39.0);
    let grads = g.backward(loss).unwrap();
    // d/dA Σ(AB) = 1·Bᵀ per row, d/dB = column sums of A
    assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 3.0]));
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    assert!(grads.get(c).is_none());
}

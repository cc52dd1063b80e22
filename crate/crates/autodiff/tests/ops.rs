use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vega_autodiff::{Graph, Tensor, TensorError};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = g.matmul(i2, x).unwrap();
    assert_eq!(g.values(y), g.values(x));

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.values(c), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    for &v in g.values(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = g.constant(t(&[2], &[1.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.values(s)[0] - 0.7311).abs() < 1e-4);
    assert!((g.values(s)[1] - 0.2689).abs() < 1e-4);
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_on_inner_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.0, 5.0, 0.0, 5.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.values(s);
    assert!((v[0] - 0.7311).abs() < 1e-4 && (v[2] - 0.2689).abs() < 1e-4);
    assert!((v[1] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
}

#[test]
fn kl_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(t(&[2], &[0.3, 0.7]));
    let k = g.kl_div(p, p).unwrap();
    assert_eq!(g.values(k)[0], 0.0);

    let p = g.constant(t(&[2], &[1.0, 0.0]));
    let q = g.constant(t(&[2], &[0.5, 0.5]));
    let k = g.kl_div(p, q).unwrap();
    assert!((g.values(k)[0] - std::f64::consts::LN_2).abs() < 1e-4);

    let r = g.constant(t(&[3], &[0.2, 0.3, 0.5]));
    assert!(matches!(g.kl_div(p, r), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn cosine_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(t(&[3], &[0.3, -2.0, 1.5]));
    let s = g.cosine_sim(v, v).unwrap();
    assert!((g.values(s)[0] - 1.0).abs() < 1e-12);

    let a = g.constant(t(&[2], &[1.0, 0.0]));
    let b = g.constant(t(&[2], &[0.0, 1.0]));
    let s = g.cosine_sim(a, b).unwrap();
    assert_eq!(g.values(s)[0], 0.0);

    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[2.0, 1.0]));
    let s = g.cosine_sim(a, b).unwrap();
    assert!((g.values(s)[0] - 0.8).abs() < 1e-5);
    assert!(g.warnings().is_empty());
}

#[test]
fn cosine_of_zero_vector_is_zero_with_warning() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros([3]));
    let b = g.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.cosine_sim(z, b).unwrap();
    assert_eq!(g.values(s)[0], 0.0);
    assert_eq!(g.warnings().len(), 1);
}

#[test]
fn elementwise_fixed_points() {
    let mut g = Graph::<f64>::new();
    let zero = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(zero);
    let si = g.silu(zero);
    assert_eq!(g.values(s)[0], 0.5);
    assert_eq!(g.values(si)[0], 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
    let d = g.dropout(x, 0.0, &mut rng, true).unwrap();
    assert_eq!(g.values(d), g.values(x));
    let d = g.dropout(x, 0.9, &mut rng, false).unwrap();
    assert_eq!(g.values(d), g.values(x));
    assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    assert!(g.dropout(x, -0.1, &mut rng, true).is_err());
}

#[test]
fn dropout_scales_survivors() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = g.constant(Tensor::full([10_000], 1.0));
    let d = g.dropout(x, 0.25, &mut rng, true).unwrap();
    let vals = g.values(d);
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.75).abs() < 0.02, "kept fraction {kept}");
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
}

#[test]
fn broadcast_rules() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let bias = g.constant(t(&[3], &[10.0, 20.0, 30.0]));
    let y = g.add(x, bias).unwrap();
    assert_eq!(g.values(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = g.constant(t(&[2, 1], &[2.0, 3.0]));
    let y = g.mul(x, col).unwrap();
    assert_eq!(g.values(y), &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
    let s = g.constant(Tensor::scalar(2.0));
    let y = g.mul(x, s).unwrap();
    assert_eq!(g.values(y)[5], 12.0);
    let bad = g.constant(t(&[2], &[1.0, 1.0]));
    assert!(g.add(x, bad).is_err());
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);

    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, -2.0, 3.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_contract_errors() {
    let foreign = Graph::<f64>::new().constant(Tensor::scalar(1.0));
    let mut g = Graph::<f64>::new();
    assert_eq!(g.backward(foreign), Err(TensorError::EmptyTape));
    let w = g.param(t(&[2], &[1.0, 2.0]));
    assert_eq!(g.backward(w), Err(TensorError::NotScalar(vec![2])));
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    assert_eq!(g.backward(loss), Err(TensorError::BackwardAlreadyRun));
    g.reset_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
}

#[test]
fn unreachable_params_get_zero_grad_and_detach_blocks_flow() {
    let mut g = Graph::<f64>::new();
    let used = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[2], &[3.0, 4.0]));
    let stopped = g.detach(used);
    let prod = g.mul(used, stopped).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // d/du Σ u·stop(u) = stop(u)
    assert_eq!(g.grad(used).unwrap(), &[1.0, 2.0]);
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    assert!(g.grad(stopped).is_none());
}

#[test]
fn shift_rows_zero_pads() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let up = g.shift_rows(x, 1).unwrap();
    let down = g.shift_rows(x, -1).unwrap();
    assert_eq!(g.values(up), &[2.0, 3.0, 0.0]);
    assert_eq!(g.values(down), &[0.0, 1.0, 2.0]);
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0]));
    let y = g.layer_norm(x, 1, 1e-5).unwrap();
    for row in g.values(y).chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert!(g.layer_norm(x, 2, 1e-5).is_err());
}

#[test]
fn embedding_and_gather() {
    let mut g = Graph::<f64>::new();
    let table = g.param(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    let e = g.embedding(table, &[2, 0, 2]).unwrap();
    assert_eq!(g.values(e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    assert!(g.embedding(table, &[3]).is_err());
    let picked = g.gather(e, &[1, 0, 0]).unwrap();
    assert_eq!(g.values(picked), &[5.0, 0.0, 4.0]);
    let loss = g.sum(picked);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(table).unwrap(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

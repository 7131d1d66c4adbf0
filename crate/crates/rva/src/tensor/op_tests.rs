//! Finite-difference checks for every op's backward rule, plus the
//! softmax/l2 invariants.

use proptest::prelude::*;

use super::gradcheck::finite_diff_check;
use super::{GradMap, Graph, NodeId, ParamSet, Precision, Result, Rng, Tensor};

/// Builds a scalar loss from a single parameter vector "x" through `f`,
/// runs backward, and checks the gradient against central differences.
fn check_op<F>(x: Vec<f64>, f: F) -> f64
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId> + Copy,
{
    let mut params = ParamSet::new();
    params.insert("x", Tensor::vector(x));

    let run = |p: &ParamSet| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new(Precision::F64);
        let x = g.param("x", p.get("x")?.clone())?;
        let y = f(&mut g, x)?;
        // fold any output shape to a scalar with uneven weights so the
        // check exercises off-diagonal terms
        let n = g.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * i as f64).collect();
        let flat = g.flatten(y)?;
        let wn = g.constant(Tensor::vector(w))?;
        let l = g.dot(flat, wn)?;
        Ok((g, l))
    };

    let (mut g, l) = run(&params).unwrap();
    g.backward(l).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate_from(&g).unwrap();

    finite_diff_check(
        |p| {
            let (g, l) = run(p)?;
            Ok(g.value(l).data[0])
        },
        &params,
        &grads,
        1e-5,
    )
    .unwrap()
}

fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fd_tanh(x in small_vec(5)) {
        prop_assert!(check_op(x, |g, x| g.tanh(x)) < 1e-5);
    }

    #[test]
    fn fd_sigmoid(x in small_vec(5)) {
        prop_assert!(check_op(x, |g, x| g.sigmoid(x)) < 1e-5);
    }

    #[test]
    fn fd_exp(x in small_vec(5)) {
        prop_assert!(check_op(x, |g, x| g.exp(x)) < 1e-5);
    }

    #[test]
    fn fd_log(x in proptest::collection::vec(0.1..3.0f64, 5)) {
        prop_assert!(check_op(x, |g, x| g.log(x)) < 1e-5);
    }

    #[test]
    fn fd_softmax(x in small_vec(6)) {
        prop_assert!(check_op(x, |g, x| g.softmax(x)) < 1e-5);
    }

    #[test]
    fn fd_l2_normalize(x in proptest::collection::vec(0.5..2.0f64, 5)) {
        prop_assert!(check_op(x, |g, x| g.l2_normalize(x)) < 1e-5);
    }

    #[test]
    fn fd_hadamard_with_self(x in small_vec(4)) {
        prop_assert!(check_op(x, |g, x| g.hadamard(x, x)) < 1e-5);
    }

    #[test]
    fn fd_sum_mean(x in small_vec(7)) {
        prop_assert!(check_op(x.clone(), |g, x| g.sum(x)) < 1e-5);
        prop_assert!(check_op(x, |g, x| g.mean(x)) < 1e-5);
    }

    #[test]
    fn fd_slice_concat_index(x in small_vec(6)) {
        let err = check_op(x.clone(), |g, x| {
            let a = g.slice(x, 0, 3)?;
            let b = g.slice(x, 3, 3)?;
            let c = g.concat(&[b, a])?;
            let i = g.index(c, 2)?;
            let s = g.sum(c)?;
            g.add(i, s)
        });
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn fd_scale_by(x in small_vec(5)) {
        let err = check_op(x, |g, x| {
            let s = g.index(x, 0)?;
            let v = g.slice(x, 1, 4)?;
            g.scale_by(v, s)
        });
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn fd_two_layer_composition(x in small_vec(6)) {
        // random-ish 2-layer network folded through tanh and softmax
        let err = check_op(x, |g, x| {
            let w = g.constant(Tensor::new(vec![4, 6],
                (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect())?)?;
            let h = g.matvec(w, x)?;
            let h = g.tanh(h)?;
            let w2 = g.constant(Tensor::new(vec![3, 4],
                (0..12).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect())?)?;
            let o = g.matvec(w2, h)?;
            g.softmax(o)
        });
        prop_assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn softmax_simplex_and_shift_invariance(x in small_vec(6), shift in -5.0..5.0f64) {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::vector(x.clone())).unwrap();
        let sa = g.softmax(a).unwrap();
        let y = g.value(sa).data.clone();
        prop_assert!(y.iter().all(|&v| v > 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let b = g.constant(Tensor::vector(x.iter().map(|v| v + shift).collect())).unwrap();
        let sb = g.softmax(b).unwrap();
        for (p, q) in y.iter().zip(&g.value(sb).data) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_unit_norm(x in proptest::collection::vec(-3.0..3.0f64, 5)) {
        prop_assume!(x.iter().any(|&v| v.abs() > 1e-6));
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::vector(x)).unwrap();
        let n = g.l2_normalize(a).unwrap();
        let norm: f64 = g.value(n).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn fd_matvec_matmul_vecmat_params() {
    // gradient w.r.t. a matrix parameter through all three products
    let mut rng = Rng::new(11);
    let mut params = ParamSet::new();
    params.init_uniform("w", vec![3, 4], 1.0, &mut rng);

    let run = |p: &ParamSet| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new(Precision::F64);
        let w = g.param("w", p.get("w")?.clone())?;
        let v = g.constant(Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]))?;
        let mv = g.matvec(w, v)?; // [3]
        let m2 = g.constant(Tensor::new(vec![4, 2], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect())?)?;
        let mm = g.matmul(w, m2)?; // [3,2]
        let u = g.constant(Tensor::vector(vec![0.5, -0.2, 0.9]))?;
        let vm = g.vecmat(u, w)?; // [4]
        let s1 = g.sum(mv)?;
        let flat = g.flatten(mm)?;
        let s2 = g.sum(flat)?;
        let s3 = g.sum(vm)?;
        let t = g.add(s1, s2)?;
        let l = g.add(t, s3)?;
        Ok((g, l))
    };
    let (mut g, l) = run(&params).unwrap();
    g.backward(l).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate_from(&g).unwrap();
    let err = finite_diff_check(|p| run(p).map(|(g, l)| g.value(l).data[0]), &params, &grads, 1e-5).unwrap();
    assert!(err < 1e-7, "err = {err}");
}

#[test]
fn fd_embedding_rows_and_untouched_rows_zero() {
    let mut rng = Rng::new(13);
    let mut params = ParamSet::new();
    params.init_uniform("table", vec![5, 3], 1.0, &mut rng);

    let run = |p: &ParamSet| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new(Precision::F64);
        let t = g.param("table", p.get("table")?.clone())?;
        let rows = g.embedding_rows(t, &[1, 3, 1])?;
        let flat = g.flatten(rows)?;
        let w = g.constant(Tensor::vector((0..9).map(|i| 0.2 + i as f64 * 0.1).collect()))?;
        let l = g.dot(flat, w)?;
        Ok((g, l))
    };
    let (mut g, l) = run(&params).unwrap();
    g.backward(l).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate_from(&g).unwrap();

    let gt = grads.get("table").unwrap();
    for row in [0usize, 2, 4] {
        assert!(gt.data[row * 3..(row + 1) * 3].iter().all(|&x| x == 0.0));
    }
    let err = finite_diff_check(|p| run(p).map(|(g, l)| g.value(l).data[0]), &params, &grads, 1e-5).unwrap();
    assert!(err < 1e-7);
}

#[test]
fn fd_dropout_fixed_mask() {
    let mut rng = Rng::new(21);
    let mut params = ParamSet::new();
    params.init_uniform("x", vec![8], 1.0, &mut rng);

    // frozen dropout stream: clone the same rng state into each eval
    let base = Rng::new(99);
    let run = |p: &ParamSet| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new(Precision::F64);
        let mut dr = base.clone();
        let x = g.param("x", p.get("x")?.clone())?;
        let d = g.dropout(x, 0.5, &mut dr, true)?;
        let l = g.sum(d)?;
        Ok((g, l))
    };
    let (mut g, l) = run(&params).unwrap();
    g.backward(l).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate_from(&g).unwrap();
    let err = finite_diff_check(|p| run(p).map(|(g, l)| g.value(l).data[0]), &params, &grads, 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn backward_examples_from_contract() {
    // loss = sum(x) -> grad all ones
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true).unwrap();
    let f = g.flatten(x).unwrap();
    let l = g.sum(f).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data, vec![1.0; 6]);

    // loss = tanh(0) -> grad 1
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(Tensor::scalar(0.0), true).unwrap();
    let l = g.tanh(x).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data, vec![1.0]);
}

#[test]
fn repeated_backward_is_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
    let l = g.tanh(x).unwrap();
    g.backward(l).unwrap();
    assert!(g.backward(l).is_err());
}

#[test]
fn non_scalar_loss_is_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new(Precision::F64);
    let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"));
}

#[test]
fn matmul_identity_and_trivial_softmax() {
    let mut g = Graph::new(Precision::F64);
    let eye = g.constant(Tensor::new(vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let x = g.constant(Tensor::new(vec![3, 2], (0..6).map(|i| i as f64).collect()).unwrap()).unwrap();
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y).data, g.value(x).data);

    let z = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
    let s = g.softmax(z).unwrap();
    for v in &g.value(s).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    let v = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let n = g.l2_normalize(v).unwrap();
    assert!((g.value(n).data[0] - 0.6).abs() < 1e-12);
    assert!((g.value(n).data[1] - 0.8).abs() < 1e-12);

    let zero = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let nz = g.l2_normalize(zero).unwrap();
    assert_eq!(g.value(nz).data, vec![0.0, 0.0]);
}

#[test]
fn f32_precision_rounds_values() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::scalar(0.1)).unwrap();
    let y = g.exp(x).unwrap();
    let v = g.value(y).data[0];
    assert_eq!(v, v as f32 as f64);
}

#[test]
fn non_finite_output_is_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(g.exp(x).is_err());
}

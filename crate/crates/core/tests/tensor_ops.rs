mod common;

use common::*;
use nestnet_core::tensor::{ConvAlgorithm, Graph, NodeId, Tensor, TensorError};
use proptest::prelude::*;

fn t32(shape: &[usize], values: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

fn t64(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values).unwrap()
}

// ---- conv2d -----------------------------------------------------------------

#[test]
fn conv_all_ones_sums_nine() {
    for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Fft] {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let b = g.input(Tensor::zeros(vec![1]), false);
        let y = g.conv2d_with(x, w, b, 1, 0, algo).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert!((g.value(y).values()[0] - 9.0).abs() < 1e-5, "{algo:?}");
    }
}

#[test]
fn conv_identity_kernel_copies_input() {
    let mut r = rng(3);
    let input: Tensor<f32> = random_tensor(&mut r, &[2, 1, 4, 5]);
    for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Fft] {
        let mut g = Graph::<f32>::new();
        let x = g.input(input.clone(), false);
        let w = g.input(t32(&[1, 1, 1, 1], &[1.0]), false);
        let b = g.input(Tensor::zeros(vec![1]), false);
        let y = g.conv2d_with(x, w, b, 1, 0, algo).unwrap();
        for (a, e) in g.value(y).values().iter().zip(input.values()) {
            assert!((a - e).abs() < 1e-6);
        }
    }
}

fn conv_against_oracle(seed: u64, n: usize, c: usize, h: usize, w: usize, o: usize, k: usize, stride: usize, pad: usize) {
    let mut r = rng(seed);
    let x = random_values(&mut r, n * c * h * w);
    let kern = random_values(&mut r, o * c * k * k);
    let bias = random_values(&mut r, o);
    let (expect, ho, wo) = naive_conv2d(&x, (n, c, h, w), &kern, (o, k, k), &bias, stride, pad);
    for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Fft, ConvAlgorithm::Auto] {
        let mut g = Graph::<f32>::new();
        let xi = g.input(Tensor::<f64>::new(vec![n, c, h, w], x.clone()).unwrap().cast(), false);
        let wi = g.input(Tensor::<f64>::new(vec![o, c, k, k], kern.clone()).unwrap().cast(), false);
        let bi = g.input(Tensor::<f64>::new(vec![o], bias.clone()).unwrap().cast(), false);
        let y = g.conv2d_with(xi, wi, bi, stride, pad, algo).unwrap();
        assert_eq!(g.value(y).shape(), &[n, o, ho, wo]);
        for (a, e) in g.value(y).values().iter().zip(&expect) {
            assert!((*a as f64 - e).abs() < 1e-5, "{algo:?}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_random_matches_naive_loops() {
    // 1×2×5×5 input, three 2-channel 3×3 kernels
    conv_against_oracle(11, 1, 2, 5, 5, 3, 3, 1, 0);
    conv_against_oracle(12, 2, 3, 9, 7, 4, 5, 1, 2);
    conv_against_oracle(13, 1, 2, 12, 12, 2, 14, 1, 7);
    conv_against_oracle(14, 2, 2, 8, 11, 3, 3, 2, 1);
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![1, 2, 4, 4]), false);
    let w = g.input(Tensor::zeros(vec![1, 3, 3, 3]), false);
    let b = g.input(Tensor::zeros(vec![1]), false);
    assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(TensorError::ShapeMismatch { .. })));
    let w = g.input(Tensor::zeros(vec![1, 2, 7, 7]), false);
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::EmptyOutput { .. })));
}

// ---- group_norm -------------------------------------------------------------

fn group_norm_f32(values: &[f32], shape: &[usize], groups: usize, eps: f64) -> Vec<f32> {
    let c = shape[1];
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(shape, values), false);
    let gamma = g.input(Tensor::full(vec![c], 1.0), false);
    let beta = g.input(Tensor::zeros(vec![c]), false);
    let y = g.group_norm(x, groups, gamma, beta, eps).unwrap();
    g.value(y).values().to_vec()
}

#[test]
fn group_norm_constant_input_is_zero() {
    let out = group_norm_f32(&[3.5; 32], &[1, 4, 2, 4], 2, 1e-5);
    assert!(out.iter().all(|v| *v == 0.0));
}

#[test]
fn group_norm_hand_computed_values() {
    // mean 2.5, population variance 1.25
    let out = group_norm_f32(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], 1, 1e-12);
    let expect = [-1.341_640_8, -0.447_213_6, 0.447_213_6, 1.341_640_8];
    for (a, e) in out.iter().zip(expect) {
        assert!((a - e).abs() < 1e-5, "{a} vs {e}");
    }
}

#[test]
fn group_norm_groups_are_independent() {
    let mut r = rng(5);
    let base: Vec<f32> = random_values(&mut r, 32).into_iter().map(|v| v as f32).collect();
    let mut perturbed = base.clone();
    for v in &mut perturbed[16..] {
        *v = *v * 3.0 + 1.0;
    }
    let a = group_norm_f32(&base, &[1, 4, 2, 4], 2, 1e-5);
    let b = group_norm_f32(&perturbed, &[1, 4, 2, 4], 2, 1e-5);
    assert_eq!(a[..16], b[..16]);
}

#[test]
fn group_norm_rejects_bad_groups() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![1, 6, 2, 2]), false);
    let gamma = g.input(Tensor::full(vec![6], 1.0), false);
    let beta = g.input(Tensor::zeros(vec![6]), false);
    assert!(matches!(g.group_norm(x, 4, gamma, beta, 1e-5), Err(TensorError::InvalidGroups { .. })));
    assert!(matches!(g.group_norm(x, 12, gamma, beta, 1e-5), Err(TensorError::InvalidGroups { .. })));
}

#[test]
fn group_norm_output_statistics() {
    let mut r = rng(8);
    let values: Vec<f32> = random_values(&mut r, 2 * 8 * 5 * 5).into_iter().map(|v| (v * 4.0 + 2.0) as f32).collect();
    let out = group_norm_f32(&values, &[2, 8, 5, 5], 4, 1e-5);
    for group in out.chunks(2 * 25) {
        let mean = group.iter().map(|v| *v as f64).sum::<f64>() / group.len() as f64;
        let var = group.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / group.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

// ---- relu, max_pool2d, add ----------------------------------------------------

#[test]
fn relu_forward_and_subgradient() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[3], &[-1.0, 0.0, 2.0]), true);
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).values(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[4], &[-1.0, -0.5, -3.0, -1e-9]), false);
    let y = g.relu(x).unwrap();
    assert!(g.value(y).values().iter().all(|v| *v == 0.0));
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).values(), &[4.0]);

    let c = g.input(Tensor::full(vec![1, 2, 4, 4], 0.7), false);
    let y = g.max_pool2d(c, 2, 2).unwrap();
    assert!(g.value(y).values().iter().all(|v| *v == 0.7));

    let big = g.input(Tensor::zeros(vec![1, 1, 2, 2]), false);
    assert!(g.max_pool2d(big, 3, 1).is_err());
}

#[test]
fn max_pool_random_matches_naive_loops() {
    let mut r = rng(21);
    let x = random_values(&mut r, 36);
    let expect = naive_max_pool(&x, (1, 6, 6), 2, 2);
    let mut g = Graph::<f32>::new();
    let xi = g.input(t64(&[1, 1, 6, 6], x).cast(), false);
    let y = g.max_pool2d(xi, 2, 2).unwrap();
    for (a, e) in g.value(y).values().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() < 1e-7);
    }
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 1.0]), true);
    let y = g.max_pool2d(x, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn add_examples() {
    let mut r = rng(2);
    let a_t: Tensor<f32> = random_tensor(&mut r, &[2, 3]);
    let b_t: Tensor<f32> = random_tensor(&mut r, &[2, 3]);
    let mut g = Graph::<f32>::new();
    let a = g.input(a_t.clone(), true);
    let b = g.input(b_t, true);
    let z = g.input(Tensor::zeros(vec![2, 3]), false);
    let az = g.add(a, z).unwrap();
    assert_eq!(g.value(az).values(), a_t.values());
    let ab = g.add(a, b).unwrap();
    let ba = g.add(b, a).unwrap();
    assert_eq!(g.value(ab).values(), g.value(ba).values());
    let s = g.sum(ab).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
    assert_eq!(g.grad(b).unwrap(), &[1.0; 6]);

    let wrong = g.input(Tensor::zeros(vec![3, 2]), false);
    assert!(matches!(g.add(a, wrong), Err(TensorError::ShapeMismatch { .. })));
}

// ---- fully_connected, softmax, cross_entropy ------------------------------------

#[test]
fn fully_connected_examples() {
    let mut r = rng(4);
    let x_t: Tensor<f32> = random_tensor(&mut r, &[2, 3]);
    let mut g = Graph::<f32>::new();
    let x = g.input(x_t.clone(), false);
    let eye = g.input(t32(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), false);
    let zb = g.input(Tensor::zeros(vec![3]), false);
    let y = g.fully_connected(x, eye, zb).unwrap();
    assert_eq!(g.value(y).values(), x_t.values());

    let zw = g.input(Tensor::zeros(vec![2, 3]), false);
    let cb = g.input(t32(&[2], &[0.5, -2.0]), false);
    let y = g.fully_connected(x, zw, cb).unwrap();
    assert_eq!(g.value(y).values(), &[0.5, -2.0, 0.5, -2.0]);

    let bad = g.input(Tensor::zeros(vec![2, 4]), false);
    assert!(g.fully_connected(x, bad, cb).is_err());
}

#[test]
fn fully_connected_gradient_in_32_bit() {
    // central differences in f32 with a coarse step; rel. error < 1e-3
    let mut r = rng(31);
    let x: Tensor<f32> = random_tensor(&mut r, &[2, 3]);
    let w: Tensor<f32> = random_tensor(&mut r, &[4, 3]);
    let b: Tensor<f32> = random_tensor(&mut r, &[4]);
    let coeffs: Vec<f32> = random_values(&mut r, 8).into_iter().map(|v| v as f32).collect();
    let loss = |x: &Tensor<f32>| -> (f32, Option<Vec<f32>>) {
        let mut g = Graph::<f32>::new();
        let xi = g.input(x.clone(), true);
        let wi = g.input(w.clone(), false);
        let bi = g.input(b.clone(), false);
        let y = g.fully_connected(xi, wi, bi).unwrap();
        let l = g.weighted_sum(y, coeffs.clone()).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().unwrap(), g.grad(xi).map(|s| s.to_vec()))
    };
    let analytic = loss(&x).1.unwrap();
    for i in 0..x.len() {
        let h = 1e-2f32;
        let mut p = x.clone();
        p.values_mut()[i] += h;
        let mut m = x.clone();
        m.values_mut()[i] -= h;
        let numeric = ((loss(&p).0 - loss(&m).0) / (2.0 * h)) as f64;
        assert!(rel_err(analytic[i] as f64, numeric) < 1e-3, "coordinate {i}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let u = g.input(Tensor::full(vec![1, 4], 0.3), false);
    let p = g.softmax(u).unwrap();
    for v in g.value(p).values() {
        assert!((v - 0.25).abs() < 1e-7);
    }
    let l = g.input(t32(&[1, 2], &[0.0, std::f32::consts::LN_2]), false);
    let p = g.softmax(l).unwrap();
    assert!((g.value(p).values()[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!((g.value(p).values()[1] - 2.0 / 3.0).abs() < 1e-6);

    let mut r = rng(9);
    let x: Tensor<f32> = random_tensor(&mut r, &[3, 5]);
    let shifted = Tensor::new(vec![3, 5], x.values().iter().map(|v| v + 5.0).collect()).unwrap();
    let a = g.input(x, false);
    let b = g.input(shifted, false);
    let (pa, pb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
    for (x, y) in g.value(pa).values().iter().zip(g.value(pb).values()) {
        assert!((x - y).abs() < 1e-6);
    }
    for row in g.value(pa).values().chunks(5) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let confident = g.input(t64(&[1, 3], vec![0.0, 800.0, 0.0]), false);
    let l = g.cross_entropy(confident, &[1]).unwrap();
    assert!(g.value(l).item().unwrap().abs() < 1e-12);

    let uniform = g.input(Tensor::full(vec![2, 7], 1.5), false);
    let l = g.cross_entropy(uniform, &[0, 6]).unwrap();
    assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);

    assert!(matches!(g.cross_entropy(uniform, &[0, 7]), Err(TensorError::LabelOutOfRange { .. })));
}

// ---- backward ---------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(vec![2, 3], 0.4), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_accumulates_over_diamond() {
    // y = relu(x) + 3·x elementwise (via weighted_sum of both paths)
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3], vec![-1.0, 0.5, 2.0]), true);
    let f = g.relu(x).unwrap();
    let gx = g.add(x, x).unwrap();
    let y = g.add(f, gx).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 3.0, 3.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(vec![2], 1.0), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(x).unwrap();
    let mut other = Graph::<f32>::new();
    assert!(matches!(other.backward(s), Err(TensorError::UnknownNode(_))));
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::BackwardAlreadyRun)));
    g.reset_grads();
    g.backward(s).unwrap();
}

// ---- 64-bit finite-difference checks, every differentiable op -------------

const OP_TOL: f64 = 1e-6;
// at 1e-3 the O(h²) truncation term alone reaches ~2e-6 for group_norm
const REL_STEP: f64 = 1e-5;

fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
    for which in 0..inputs.len() {
        let worst = finite_difference_worst(&inputs, which, None, REL_STEP, build);
        assert!(worst < OP_TOL, "{name}: input {which} rel. error {worst:e}");
    }
}

fn probe(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let mut r = rng(seed);
    let coeffs = random_values(&mut r, g.value(y).len());
    g.weighted_sum(y, coeffs).unwrap()
}

#[test]
fn finite_differences_conv2d() {
    for (algo, stride, pad, k) in
        [(ConvAlgorithm::Direct, 1, 1, 3), (ConvAlgorithm::Direct, 2, 1, 3), (ConvAlgorithm::Fft, 1, 3, 7), (ConvAlgorithm::Fft, 2, 2, 5)]
    {
        let mut r = rng(40 + k as u64);
        let inputs = vec![random_tensor(&mut r, &[2, 2, 7, 6]), random_tensor(&mut r, &[3, 2, k, k]), random_tensor(&mut r, &[3])];
        check_op(&format!("conv2d {algo:?}"), inputs, &|g, ids| {
            let y = g.conv2d_with(ids[0], ids[1], ids[2], stride, pad, algo).unwrap();
            probe(g, y, 1)
        });
    }
}

#[test]
fn finite_differences_group_norm() {
    let mut r = rng(50);
    let mut gamma: Tensor<f64> = random_tensor(&mut r, &[4]);
    gamma.values_mut().iter_mut().for_each(|v| *v += 1.5);
    let inputs = vec![random_tensor(&mut r, &[2, 4, 3, 3]), gamma, random_tensor(&mut r, &[4])];
    check_op("group_norm", inputs, &|g, ids| {
        let y = g.group_norm(ids[0], 2, ids[1], ids[2], 1e-5).unwrap();
        probe(g, y, 2)
    });
}

#[test]
fn finite_differences_pointwise_and_pooling() {
    let mut r = rng(60);
    check_op("relu", vec![random_tensor(&mut r, &[2, 3, 4])], &|g, ids| {
        let y = g.relu(ids[0]).unwrap();
        probe(g, y, 3)
    });
    check_op("max_pool2d", vec![random_tensor(&mut r, &[1, 2, 6, 6])], &|g, ids| {
        let y = g.max_pool2d(ids[0], 2, 2).unwrap();
        probe(g, y, 4)
    });
    check_op("add", vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3, 4])], &|g, ids| {
        let y = g.add(ids[0], ids[1]).unwrap();
        probe(g, y, 5)
    });
}

#[test]
fn finite_differences_dense_ops() {
    let mut r = rng(70);
    check_op(
        "fully_connected",
        vec![random_tensor(&mut r, &[2, 3]), random_tensor(&mut r, &[4, 3]), random_tensor(&mut r, &[4])],
        &|g, ids| {
            let y = g.fully_connected(ids[0], ids[1], ids[2]).unwrap();
            probe(g, y, 6)
        },
    );
    check_op("softmax", vec![random_tensor(&mut r, &[3, 4])], &|g, ids| {
        let y = g.softmax(ids[0]).unwrap();
        probe(g, y, 7)
    });
    check_op("cross_entropy", vec![random_tensor(&mut r, &[4, 5])], &|g, ids| g.cross_entropy(ids[0], &[0, 4, 2, 2]).unwrap());
    check_op("l2_normalize", vec![random_tensor(&mut r, &[3, 6])], &|g, ids| {
        let y = g.l2_normalize(ids[0]).unwrap();
        probe(g, y, 8)
    });
    check_op("flatten", vec![random_tensor(&mut r, &[2, 3, 2])], &|g, ids| {
        let y = g.flatten(ids[0]).unwrap();
        probe(g, y, 9)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one_and_cross_entropy_nonnegative(
        logits in proptest::collection::vec(-30.0f32..30.0, 12),
        labels in proptest::collection::vec(0usize..4, 3),
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![3, 4], logits).unwrap(), false);
        let p = g.softmax(x).unwrap();
        for row in g.value(p).values().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let l = g.cross_entropy(x, &labels).unwrap();
        prop_assert!(g.value(l).item().unwrap() >= 0.0);
    }

    #[test]
    fn conv_paths_agree(n in 1usize..3, c in 1usize..3, h in 4usize..10, w in 4usize..10, k in 1usize..5, pad in 0usize..3, seed in 0u64..1000) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        conv_against_oracle(seed, n, c, h, w, 2, k, 1, pad);
    }
}

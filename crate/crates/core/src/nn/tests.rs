use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::reference::{self as oracle, RefArray};

fn t(shape: [usize; 4], data: &[f32]) -> Tensor {
    Tensor::new(Shape(shape), data.to_vec()).unwrap()
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let s = Shape(shape);
    Tensor::new(s, (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let mut k = Tensor::zeros(Shape::new(1, 1, 3, 3));
    k.set(0, 0, 1, 1, 1.0);
    let y = conv2d(&x, &k, &[0.0], 1, 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_scalar_kernel() {
    let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let k = t([1, 1, 1, 1], &[2.0]);
    let y = conv2d(&x, &k, &[1.0], 1, 0).unwrap();
    assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random([2, 3, 8, 8], &mut rng);
        let w = random([4, 3, 3, 3], &mut rng);
        let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d(&x, &w, &b, stride, padding).unwrap();
        let bias64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let want = oracle::conv2d(&RefArray::from_tensor(&x), &RefArray::from_tensor(&w), &bias64, stride, padding);
        assert_eq!(got.shape().0, want.dims);
        assert!(max_abs_diff(got.data(), &want.data) <= 1e-5);
    }
}

#[test]
fn conv_shape_errors_name_both_shapes() {
    let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
    let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
    let err = conv2d(&x, &w, &[0.0], 1, 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("1x2x4x4") && msg.contains("1x3x3x3"), "{msg}");
    let small = Tensor::zeros(Shape::new(1, 3, 2, 2));
    assert!(conv2d(&small, &w, &[0.0], 1, 0).is_err());
}

#[test]
fn relu_cases() {
    let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    let pos = t([1, 2, 1, 2], &[0.5, 1.0, 2.0, 3.0]);
    assert_eq!(relu(&pos), pos);
    let g = t([1, 1, 1, 3], &[5.0, 5.0, 5.0]);
    assert_eq!(ops::relu_backward(&x, &g).data(), &[0.0, 0.0, 5.0]);
}

#[test]
fn maxpool_cases() {
    let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
    let c = Tensor::full(Shape::new(2, 3, 4, 6), 0.7);
    assert_eq!(maxpool2d(&c).unwrap(), Tensor::full(Shape::new(2, 3, 2, 3), 0.7));
    assert!(matches!(maxpool2d(&Tensor::zeros(Shape::new(1, 1, 3, 4))), Err(NnError::OddPool(_))));
}

#[test]
fn maxpool_matches_window_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random([1, 2, 6, 6], &mut rng);
    let got = maxpool2d(&x).unwrap();
    let want = oracle::maxpool2(&RefArray::from_tensor(&x), &mut Default::default());
    let got64: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
    assert_eq!(got64, want.data);
}

#[test]
fn gap_cases() {
    let c = Tensor::full(Shape::new(1, 2, 3, 3), 0.25);
    assert_eq!(global_avg_pool(&c).unwrap().data(), &[0.25, 0.25]);
    let x = t([1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
    assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = random([3, 4, 7, 5], &mut rng);
    let got = global_avg_pool(&r).unwrap();
    let want = oracle::global_avg_pool(&RefArray::from_tensor(&r));
    for (g, w) in got.data().iter().zip(&want.data) {
        assert!(((*g as f64) - w).abs() <= 1e-6 * w.abs().max(1e-3), "{g} vs {w}");
    }
}

#[test]
fn linear_cases() {
    let x = t([1, 2, 1, 1], &[2.0, 3.0]);
    let eye = t([2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(linear(&x, &eye, &[0.0, 0.0]).unwrap(), x);
    let w = t([1, 2, 1, 1], &[1.0, 1.0]);
    assert_eq!(linear(&x, &w, &[1.0]).unwrap().data(), &[6.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = random([5, 16, 1, 1], &mut rng);
    let ws = random([3, 16, 1, 1], &mut rng);
    let bs: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let got = linear(&xs, &ws, &bs).unwrap();
    let b64: Vec<f64> = bs.iter().map(|&v| v as f64).collect();
    let want = oracle::linear(&RefArray::from_tensor(&xs), &RefArray::from_tensor(&ws), &b64);
    assert!(max_abs_diff(got.data(), &want.data) <= 1e-5);
    assert!(linear(&xs, &t([1, 3, 1, 1], &[0.0; 3]), &[0.0]).is_err());
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    let p = softmax(&[0.0, 3f32.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let x: Vec<f32> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let c: f32 = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f32> = x.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&x), softmax(&shifted));
        assert!((a.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6);
        }
    }
    assert!(softmax(&[1000.0, -1000.0]).iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_cases() {
    let eps = 1e-9f32;
    assert!(cross_entropy(&[1.0 - eps, eps], 0).unwrap() < 1e-8);
    for target in 0..2 {
        assert!((cross_entropy(&[0.5, 0.5], target).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
    }
    assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(NnError::ClassIndex { .. })));
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let logits = random([3, 2, 1, 1], &mut rng);
        let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
        let (_, _, grad) = ops::softmax_cross_entropy(&logits, &targets).unwrap();
        let base = RefArray::from_tensor(&logits);
        for i in 0..base.data.len() {
            let fd = oracle::central_difference(
                |v| {
                    let mut l = base.clone();
                    l.data[i] = v;
                    oracle::mean_softmax_cross_entropy(&l, &targets)
                },
                base.data[i],
                1e-3,
            );
            assert!(oracle::relative_error(grad.data()[i] as f64, fd) < 1e-3);
        }
    }
}

#[test]
fn forward_on_finite_inputs_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random([2, 3, 8, 8], &mut rng);
    let w = random([4, 3, 3, 3], &mut rng);
    let y = conv2d(&x, &w, &[0.0; 4], 1, 1).unwrap();
    let y = maxpool2d(&relu(&y)).unwrap();
    let y = global_avg_pool(&y).unwrap();
    assert!(y.is_finite());
}

#[test]
fn stack_and_item_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random([1, 3, 2, 2], &mut rng);
    let b = random([1, 3, 2, 2], &mut rng);
    let s = Tensor::stack(&[&a, &b]).unwrap();
    assert_eq!(s.shape(), Shape::new(2, 3, 2, 2));
    assert_eq!(s.item(1), b);
}

#[test]
fn layer_and_model_gradients_match_finite_differences() {
    for (name, report) in oracle::check_all(0..20) {
        eprintln!("{name}: {report:?}");
        assert!(report.passes(1e-3), "{name}: {report:?}");
    }
}

#[test]
fn zero_weight_model_gradients() {
    use crate::model::Model;
    let config = oracle::gradcheck_model_config(3);
    let mut model = Model::build(config.clone()).unwrap();
    for p in model.params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs: Vec<Tensor> = (0..2).map(|_| random([4, 3, 8, 8], &mut rng)).collect();
    let targets = [0, 1, 1, 1];
    model.accumulate_gradients(&inputs, &targets).unwrap();
    assert!(model.params().iter().all(|p| p.grad.is_finite()));

    let refs = oracle::RefParams::from_store(model.params());
    let ref_inputs: Vec<RefArray> = inputs.iter().map(RefArray::from_tensor).collect();
    for p in model.params().iter().filter(|p| p.name.ends_with(".bias")) {
        for i in 0..p.grad.len() {
            let fd = oracle::central_difference(
                |v| {
                    let mut probe = refs.clone();
                    probe.0.get_mut(&p.name).unwrap().data[i] = v;
                    let logits = oracle::model_logits(&config, &probe, &ref_inputs, &mut oracle::KinkTrace::default());
                    oracle::mean_softmax_cross_entropy(&logits, &targets)
                },
                0.0,
                1e-3,
            );
            assert!((p.grad.data()[i] as f64 - fd).abs() < 1e-6, "{}[{i}]: {} vs {fd}", p.name, p.grad.data()[i]);
        }
    }
    // head bias sees mean(p - onehot) with p = 0.5
    let head = model.params().find("head.bias").unwrap();
    assert!((head.grad.data()[0] - 0.25).abs() < 1e-6);
    assert!((head.grad.data()[1] + 0.25).abs() < 1e-6);
}

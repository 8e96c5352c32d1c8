mod common;

use common::{conv_oracle, conv_transposed_oracle, max_rel_diff, random_conv_case, rng, uniform};
use pcs::tensorcore::{conv2d, conv2d_transposed, ConvSpec, Tensor};

#[test]
fn conv_matches_loop_oracle_on_random_geometries() {
    let mut r = rng(100);
    for trial in 0..150 {
        let (spec, shape) = random_conv_case(&mut r);
        let x = uniform(&mut r, shape);
        let w = uniform(&mut r, spec.weight_shape().dims());
        let b = uniform(&mut r, [1, spec.out_channels, 1, 1]);
        let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let slow = conv_oracle(&x, &w, Some(b.data()), &spec);
        let d = max_rel_diff(&fast, &slow, 1e-12);
        assert!(d <= 1e-10, "trial {trial} {spec:?} {shape:?}: {d:e}");

        // single precision stays within 1e-5 of the O(1) values
        let fast32 = conv2d(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), &spec).unwrap();
        let d32 = max_rel_diff(&fast32.cast(), &slow, 1.0);
        assert!(d32 <= 1e-5, "trial {trial} f32: {d32:e}");
    }
}

#[test]
fn documented_strided_case() {
    let mut r = rng(7);
    let x = uniform(&mut r, [1, 2, 8, 8]);
    let w = uniform(&mut r, [3, 2, 4, 4]);
    let spec = ConvSpec::new(2, 3, 4, 2, 1);
    let fast = conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(fast.shape().dims(), [1, 3, 4, 4]);
    assert!(max_rel_diff(&fast, &conv_oracle(&x, &w, None, &spec), 1e-12) <= 1e-5);
}

#[test]
fn transposed_matches_scatter_oracle() {
    let mut r = rng(101);
    for trial in 0..60 {
        let (fwd, shape) = random_conv_case(&mut r);
        let spec = fwd.adjoint();
        let (oh, ow) = fwd.output_size(shape[2], shape[3]).unwrap();
        let y = uniform(&mut r, [shape[0], fwd.out_channels, oh, ow]);
        let w = uniform(&mut r, spec.weight_shape().dims());
        let b = uniform(&mut r, [1, spec.out_channels, 1, 1]);
        let fast = conv2d_transposed(&y, &w, Some(&b), &spec).unwrap();
        let slow = conv_transposed_oracle(&y, &w, Some(b.data()), &spec);
        assert_eq!(fast.shape().dims(), shape, "trial {trial}");
        let d = max_rel_diff(&fast, &slow, 1e-12);
        assert!(d <= 1e-10, "trial {trial} {spec:?}: {d:e}");
    }
}

/// <conv(x, W), y> and <x, conv_t(y, W)> by direct summation.
fn adjoint_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (spec, shape) = random_conv_case(&mut r);
    let x = uniform(&mut r, shape);
    let w = uniform(&mut r, spec.weight_shape().dims());
    let ax = conv2d(&x, &w, None, &spec).unwrap();
    let y = uniform(&mut r, ax.shape().dims());
    let aty = conv2d_transposed(&y, &w, None, &spec.adjoint()).unwrap();
    let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[test]
fn adjointness_in_double_precision() {
    for seed in 0..50 {
        let gap = adjoint_gap(1000 + seed);
        assert!(gap <= 1e-10, "seed {seed}: {gap:e}");
    }
}

#[test]
fn adjointness_in_single_precision() {
    let mut r = rng(5);
    let spec = ConvSpec::new(1, 3, 8, 4, 2);
    let x = uniform(&mut r, [1, 1, 16, 16]).cast::<f32>();
    let w = uniform(&mut r, [3, 1, 8, 8]).cast::<f32>();
    let ax = conv2d(&x, &w, None, &spec).unwrap();
    let y = uniform(&mut r, ax.shape().dims()).cast::<f32>();
    let aty = conv2d_transposed(&y, &w, None, &spec.adjoint()).unwrap();
    let lhs = ax.dot(&y).unwrap();
    let rhs = x.dot(&aty).unwrap();
    assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()));
}

#[test]
fn measurement_round_trip_restores_size() {
    let x = Tensor::<f64>::full([1, 1, 16, 16], 1.0).unwrap();
    let w = Tensor::<f64>::full([2, 1, 4, 4], 0.5).unwrap();
    let spec = ConvSpec::new(1, 2, 4, 2, 1);
    let y = conv2d(&x, &w, None, &spec).unwrap();
    let back = conv2d_transposed(&y, &w, None, &spec.adjoint()).unwrap();
    assert_eq!(back.shape().dims(), [1, 1, 16, 16]);
}

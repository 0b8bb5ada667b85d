//! Finite-difference checks of every differentiable op, on shapes where
//! row and column counts differ so transposition mistakes cannot hide.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tutorcount::gradcheck::finite_difference_check;
use tutorcount::nets::{forward, init_params, main_net_spec, tutornet_spec, MainKind, TutorDepth, Width};
use tutorcount::{Result, Tensor};

const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element matters.
fn probe(y: Tensor, seed: u64) -> Result<Tensor> {
    let r = random(y.shape(), seed);
    Ok(y.mul(&r)?.sum())
}

fn check(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor) {
    let r = finite_difference_check(f, x, 1e-6).unwrap();
    assert!(
        r.passed(TOL),
        "max rel error {} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst_index,
        r.analytic[r.worst_index],
        r.numeric[r.worst_index]
    );
}

// n, c, h, w, out, k, stride, padding
type Geometry = (usize, usize, usize, usize, usize, usize, usize, usize);

const GEOMETRIES: &[Geometry] = &[
    (1, 2, 5, 7, 3, 3, 1, 1),
    (2, 3, 6, 4, 2, 3, 2, 0),
    (1, 1, 7, 5, 4, 5, 2, 2),
    (2, 4, 3, 5, 5, 1, 1, 0),
    (1, 3, 6, 6, 2, 1, 2, 0),
];

#[test]
fn conv2d_input_kernel_and_bias() {
    for (i, &(n, c, h, w, o, k, s, p)) in GEOMETRIES.iter().enumerate() {
        let x = random(&[n, c, h, w], i as u64);
        let kern = random(&[o, c, k, k], 100 + i as u64);
        let bias = random(&[o], 200 + i as u64);
        check(|x| probe(x.conv2d(&kern, &bias, s, p)?, 7), &x);
        check(|kk| probe(x.conv2d(kk, &bias, s, p)?, 7), &kern);
        check(|b| probe(x.conv2d(&kern, b, s, p)?, 7), &bias);
    }
}

#[test]
fn pooling_upsampling_and_concat() {
    // Distinct values keep max pooling away from ties.
    let x = Tensor::new(&[1, 2, 5, 6], (0..60).map(|i| ((i * 37) % 61) as f64 * 0.1).collect()).unwrap();
    check(|x| probe(x.max_pool2d(2, 2)?, 1), &x);
    check(|x| probe(x.max_pool2d_padded(3, 2, 1)?, 2), &x);
    check(|x| probe(x.upsample_nearest(2)?, 3), &x);
    let other = random(&[1, 3, 5, 6], 4);
    check(|x| probe(Tensor::concat_channels(&[other.clone(), x.clone()])?, 5), &x);
}

#[test]
fn elementwise_and_reductions() {
    let x = random(&[2, 3], 9);
    let y = random(&[2, 3], 10);
    check(|x| probe(x.sigmoid(), 1), &x);
    check(|x| probe(x.square(), 1), &x);
    check(|x| probe(x.mul(&y)?, 1), &x);
    check(|x| probe(y.sub(x)?, 1), &x);
    check(|x| probe(x.add(&y)?.scale(-2.5).add_scalar(0.3), 1), &x);
    check(|x| Ok(x.square().mean()), &x);
}

#[test]
fn network_parameters() {
    let x = random(&[1, 3, 16, 16], 11);
    for spec in [
        main_net_spec(MainKind::DenseTiny, Width::DESK).unwrap(),
        main_net_spec(MainKind::UnetTiny, Width::DESK).unwrap(),
        tutornet_spec(TutorDepth::L15, Width::DESK).unwrap(),
    ] {
        let params = init_params(&spec, 5);
        let last = params.len() - 2;
        for idx in [0, 1, last] {
            let f = |p: &Tensor| {
                let mut tensors = params.tensors().to_vec();
                tensors[idx] = p.clone();
                let swapped = tutorcount::nets::NetworkParams::new(params.names().to_vec(), tensors)?;
                probe(forward(&spec, &swapped, &x)?, 13)
            };
            let r = finite_difference_check(f, &params.tensors()[idx], 1e-6).unwrap();
            // ReLU kinks make a few probes straddle a corner; demand agreement
            // on nearly all coordinates.
            let agree =
                r.analytic.iter().zip(&r.numeric).filter(|(a, n)| (*a - *n).abs() / n.abs().max(1.0) <= 1e-5).count();
            assert!(
                agree * 100 >= r.analytic.len() * 98,
                "{} param {}: only {agree}/{} coordinates agree",
                spec.name,
                params.names()[idx],
                r.analytic.len()
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_gradients_on_random_geometry(
        c in 1usize..4, h in 1usize..7, w in 1usize..7, o in 1usize..4,
        k in 1usize..4, s in 1usize..3, p in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let x = random(&[1, c, h, w], seed);
        let kern = random(&[o, c, k, k], seed + 1);
        let bias = random(&[o], seed + 2);
        for r in [
            finite_difference_check(|x| probe(x.conv2d(&kern, &bias, s, p)?, seed), &x, 1e-6).unwrap(),
            finite_difference_check(|kk| probe(x.conv2d(kk, &bias, s, p)?, seed), &kern, 1e-6).unwrap(),
        ] {
            prop_assert!(r.passed(TOL), "error {}", r.max_rel_error);
        }
    }
}

//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curriculum::{main_loss, tutor_loss, tutor_loss_grad, weight_activation, weight_map_from, ErrorMap};
use crate::density::DensityMap;
use crate::error::Result;
use crate::nets::{forward, init_params, main_net_spec, tutornet_spec, MainKind, NetworkParams, TutorDepth, Width};
use crate::tensor::Tensor;

/// Step used by [`standard_suite`].
pub const SUITE_EPS: f64 = 1e-5;
/// Largest relative error [`standard_suite`] accepts.
pub const SUITE_TOLERANCE: f64 = 1e-5;

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`; infinite when
    /// any evaluated quantity was non-finite.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Compares the reverse-mode gradient of a scalar function `f` at `x` with
/// central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
///
/// `f` receives a leaf tensor and must build its result from it so the
/// gradient can flow back.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let shape = x.shape().to_vec();
    let leaf = Tensor::param(&shape, x.values().to_vec())?;
    let out = f(&leaf)?;
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&Tensor::new(&shape, probe.clone())?)?.item();
        probe[i] = orig - eps;
        let minus = f(&Tensor::new(&shape, probe.clone())?)?.item();
        probe[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let mut max_rel_error = 0.0_f64;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = if a.is_finite() && n.is_finite() { (a - n).abs() / n.abs().max(1.0) } else { f64::INFINITY };
        if err > max_rel_error || (err.is_infinite() && max_rel_error.is_finite()) {
            max_rel_error = err;
            worst_index = i;
        }
    }
    if !out.item().is_finite() {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

/// One named entry of [`standard_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Applies fixed random weights to every output so no element is ignored.
fn contract(y: Tensor, rng_seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0)?;
    Ok(y.mul(&r)?.sum())
}

/// Finite-difference checks of every differentiable op, both losses, the
/// closed-form tutoring gradient, and a parameter of each network family.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push =
        |name: &str, r: GradCheck| out.push(SuiteEntry { name: name.to_string(), max_rel_error: r.max_rel_error });
    let x = uniform(&mut rng, &[1, 2, 6, 5], -1.0, 1.0)?;
    let y = uniform(&mut rng, &[1, 2, 6, 5], -1.0, 1.0)?;
    let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[3], -1.0, 1.0)?;

    push("add", finite_difference_check(|t| contract(t.add(&y)?, 1), &x, SUITE_EPS)?);
    push("sub", finite_difference_check(|t| contract(y.sub(t)?, 1), &x, SUITE_EPS)?);
    push("mul", finite_difference_check(|t| contract(t.mul(&y)?, 1), &x, SUITE_EPS)?);
    push("square", finite_difference_check(|t| contract(t.square(), 1), &x, SUITE_EPS)?);
    push("scale", finite_difference_check(|t| contract(t.scale(-3.0).add_scalar(0.5), 1), &x, SUITE_EPS)?);
    push("sigmoid", finite_difference_check(|t| contract(t.sigmoid(), 1), &x, SUITE_EPS)?);
    // Keep inputs away from the kinks of relu and max.
    let away = Tensor::new(x.shape(), x.values().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect())?;
    push("relu", finite_difference_check(|t| contract(t.relu(), 1), &away, SUITE_EPS)?);
    push("max_with", finite_difference_check(|t| contract(t.max_with(0.0), 1), &away, SUITE_EPS)?);
    push("sum", finite_difference_check(|t| Ok(t.square().sum()), &x, SUITE_EPS)?);
    push("mean", finite_difference_check(|t| Ok(t.square().mean()), &x, SUITE_EPS)?);
    push("reshape", finite_difference_check(|t| contract(t.reshape(&[2, 30])?, 1), &x, SUITE_EPS)?);
    push("conv2d.input", finite_difference_check(|t| contract(t.conv2d(&k, &b, 2, 1)?, 2), &x, SUITE_EPS)?);
    push("conv2d.kernel", finite_difference_check(|t| contract(x.conv2d(t, &b, 1, 1)?, 2), &k, SUITE_EPS)?);
    push("conv2d.bias", finite_difference_check(|t| contract(x.conv2d(&k, t, 1, 0)?, 2), &b, SUITE_EPS)?);
    // Distinct, well separated values keep max pooling off its ties.
    let distinct = Tensor::new(&[1, 2, 6, 5], (0..60).map(|i| ((i * 37) % 61) as f64 * 0.1).collect())?;
    push("max_pool2d", finite_difference_check(|t| contract(t.max_pool2d(2, 2)?, 3), &distinct, SUITE_EPS)?);
    push(
        "max_pool2d.padded",
        finite_difference_check(|t| contract(t.max_pool2d_padded(3, 2, 1)?, 3), &distinct, SUITE_EPS)?,
    );
    push("upsample_nearest", finite_difference_check(|t| contract(t.upsample_nearest(2)?, 4), &x, SUITE_EPS)?);
    push(
        "concat_channels",
        finite_difference_check(|t| contract(Tensor::concat_channels(&[y.clone(), t.clone()])?, 5), &x, SUITE_EPS)?,
    );
    let pre = Tensor::new(
        &[1, 1, 4, 4],
        (0..16).map(|_| rng.random_range(0.05..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )?;
    push(
        "weight_activation",
        finite_difference_check(|t| contract(weight_activation(t, 0.5).grid().clone(), 6), &pre, SUITE_EPS)?,
    );

    // Tutoring loss against both autodiff and its closed form.
    let margin = 0.8;
    let n = 64;
    let wv: Vec<f64> = (0..n).map(|_| rng.random_range(0.5 + 2.0 * SUITE_EPS..1.0 - 2.0 * SUITE_EPS)).collect();
    let ev: Vec<f64> = (0..n)
        .map(|_| loop {
            let e: f64 = rng.random_range(0.0..2.0 * margin);
            if (e - margin).abs() > 1e-3 {
                break e;
            }
        })
        .collect();
    let shape = [1, 1, 8, 8];
    let errors = ErrorMap::from_values(&shape, ev)?;
    let w = Tensor::new(&shape, wv)?;
    let tl = |t: &Tensor| tutor_loss(&weight_map_from(t.clone(), 0.5)?, &errors, margin);
    let r = finite_difference_check(tl, &w, SUITE_EPS)?;
    let closed = tutor_loss_grad(&weight_map_from(w.clone(), 0.5)?, &errors, margin)?;
    let closed_err = closed.iter().zip(&r.numeric).map(|(c, n)| (c - n).abs() / n.abs().max(1.0)).fold(0.0, f64::max);
    push("tutor_loss", r);
    push(
        "tutor_loss_grad.closed_form",
        GradCheck { max_rel_error: closed_err, worst_index: 0, analytic: closed, numeric: Vec::new() },
    );

    let gt = DensityMap::from_grid(uniform(&mut rng, &shape, 0.0, 5.0)?, 1000.0, 15.0, 8)?;
    let weights = weight_map_from(uniform(&mut rng, &shape, 0.5, 1.0)?, 0.5)?;
    let pred = uniform(&mut rng, &shape, 0.0, 5.0)?;
    push("main_loss", finite_difference_check(|t| main_loss(t, &gt, &weights), &pred, SUITE_EPS)?);

    let image = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0)?;
    for spec in [main_net_spec(MainKind::DenseTiny, Width::DESK)?, tutornet_spec(TutorDepth::L15, Width::DESK)?] {
        let params = init_params(&spec, seed);
        let idx = params.len() - 2;
        let f = |t: &Tensor| {
            let mut tensors = params.tensors().to_vec();
            tensors[idx] = t.clone();
            contract(forward(&spec, &NetworkParams::new(params.names().to_vec(), tensors)?, &image)?, 7)
        };
        push(
            &format!("{}.{}", spec.name, params.names()[idx]),
            finite_difference_check(f, &params.tensors()[idx], SUITE_EPS)?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = finite_difference_check(|t| Ok(t.square().sum()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert!((r.analytic[0] - 2.0).abs() < 1e-15 && (r.analytic[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = finite_difference_check(|t| Ok(t.scale(0.0).sum()), &x, 1e-5).unwrap();
        assert!(r.analytic.iter().all(|v| v.abs() < 1e-12));
        assert!(r.numeric.iter().all(|v| v.abs() < 1e-12));
        assert!(r.passed(1e-9));
    }

    #[test]
    fn non_finite_is_failure() {
        let x = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        let r = finite_difference_check(|t| Ok(t.square().sum()), &x, 1e-5).unwrap();
        assert!(!r.passed(1.0));
    }

    #[test]
    fn standard_suite_passes() {
        let suite = standard_suite(0).unwrap();
        assert!(suite.len() > 20);
        for e in &suite {
            assert!(e.passed(), "{}: {}", e.name, e.max_rel_error);
        }
    }
}

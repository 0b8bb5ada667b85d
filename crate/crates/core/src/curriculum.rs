//! The error-driven curriculum: weight activation, the tutoring loss and its
//! closed-form gradient, and the weighted regression loss of the main
//! network.
//!
//! The error map is always detached: it is produced by the main network but
//! only ever optimises the tutor. Symmetrically, the weight map is detached
//! inside [`main_loss`] so the main network cannot lower its own loss by
//! steering its curriculum.

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Hyperparameters of the curriculum and both optimisers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumParams {
    /// Floor weight `T` assigned to easy pixels, in `(0, 1)`.
    pub floor: f64,
    /// Margin `M` of the tutoring loss, in scaled density units squared.
    pub margin: f64,
    pub scale_factor: f64,
    pub alpha_tutor: f64,
    pub alpha_main: f64,
}

impl Default for CurriculumParams {
    fn default() -> Self {
        CurriculumParams {
            floor: 0.5,
            margin: 0.8,
            scale_factor: crate::density::DEFAULT_SCALE_FACTOR,
            alpha_tutor: 1e-3,
            alpha_main: 1e-2,
        }
    }
}

impl CurriculumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::invalid(format!("T must lie in (0, 1), got {}", self.floor)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::invalid(format!("scale factor must be positive, got {}", self.scale_factor)));
        }
        // Zero learning rates are allowed for frozen-network experiments.
        if !(self.alpha_tutor >= 0.0) || !(self.alpha_main >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Largest double below one; the open upper end of the weight range.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Per-pixel curriculum weights, each in `{T} ∪ (0.5, 1)`.
#[derive(Debug, Clone)]
pub struct WeightMap {
    grid: Tensor,
}

impl WeightMap {
    /// Unit weights, i.e. plain regression without a tutor.
    pub fn ones(shape: &[usize]) -> WeightMap {
        WeightMap { grid: Tensor::full(shape, 1.0) }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn mean(&self) -> f64 {
        self.values().iter().sum::<f64>() / self.values().len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Non-negative per-pixel squared error, never part of gradient flow.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    grid: Tensor,
}

impl ErrorMap {
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<ErrorMap> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("errors must be non-negative"));
        }
        Ok(ErrorMap { grid: Tensor::new(shape, values)? })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn mean(&self) -> f64 {
        self.values().iter().sum::<f64>() / self.values().len() as f64
    }
}

/// Scalar form of the activation: logistic above zero, the floor otherwise.
/// The logistic branch saturates at [`BELOW_ONE`] rather than rounding to 1.
pub fn activation(x: f64, floor: f64) -> f64 {
    if x > 0.0 {
        sigmoid(x).min(BELOW_ONE)
    } else {
        floor
    }
}

/// Maps the tutor's pre-activations to weights. The derivative is the
/// logistic derivative on `x > 0` and zero on the flat `x <= 0` branch.
pub fn weight_activation(x: &Tensor, floor: f64) -> WeightMap {
    WeightMap {
        grid: x.map(
            "weight_activation",
            |v| activation(v, floor),
            |v| {
                if v > 0.0 {
                    let s = sigmoid(v);
                    s * (1.0 - s)
                } else {
                    0.0
                }
            },
        ),
    }
}

/// Wraps an existing weight grid, checking it lies in `[min(T, 0.5), 1]`.
/// Unit weights are accepted so [`WeightMap::ones`] round-trips.
pub fn weight_map_from(grid: Tensor, floor: f64) -> Result<WeightMap> {
    let lo = floor.min(0.5);
    if let Some(v) = grid.values().iter().find(|v| !(**v >= lo && **v <= 1.0)) {
        return Err(Error::invalid(format!("weight {v} outside [{lo}, 1]")));
    }
    Ok(WeightMap { grid })
}

/// `(pred - gt)^2`, detached from `pred`'s graph.
pub fn error_map(pred: &Tensor, gt: &DensityMap) -> Result<ErrorMap> {
    if pred.shape() != gt.grid().shape() {
        return Err(Error::shape("error_map", pred.shape(), gt.grid().shape()));
    }
    let values = pred.values().iter().zip(gt.values()).map(|(p, g)| (p - g) * (p - g)).collect();
    Ok(ErrorMap { grid: Tensor::new(pred.shape(), values)? })
}

/// `sum((1 - w)·e + w·max(M - e, 0))`, differentiable with respect to `w`.
pub fn tutor_loss(w: &WeightMap, e: &ErrorMap, margin: f64) -> Result<Tensor> {
    let w = w.grid();
    let e = e.grid();
    if w.shape() != e.shape() {
        return Err(Error::shape("tutor_loss", w.shape(), e.shape()));
    }
    let hinge = e.scale(-1.0).add_scalar(margin).max_with(0.0);
    let keep_learning = w.scale(-1.0).add_scalar(1.0).mul(e)?;
    let ease_off = w.mul(&hinge)?;
    Ok(keep_learning.add(&ease_off)?.sum())
}

/// Closed-form `∂L/∂w`: `M - 2e` below the margin, `-e` at or above it.
pub fn tutor_loss_grad(w: &WeightMap, e: &ErrorMap, margin: f64) -> Result<Vec<f64>> {
    if w.grid().shape() != e.grid().shape() {
        return Err(Error::shape("tutor_loss_grad", w.grid().shape(), e.grid().shape()));
    }
    Ok(e.values().iter().map(|&e| pixel_grad(e, margin)).collect())
}

pub fn pixel_grad(e: f64, margin: f64) -> f64 {
    if e < margin {
        margin - 2.0 * e
    } else {
        -e
    }
}

/// Mean over pixels of `(pred - gt)^2 · w`, with `w` detached.
pub fn main_loss(pred: &Tensor, gt: &DensityMap, w: &WeightMap) -> Result<Tensor> {
    if pred.shape() != gt.grid().shape() {
        return Err(Error::shape("main_loss", pred.shape(), gt.grid().shape()));
    }
    if pred.shape() != w.grid().shape() {
        return Err(Error::shape("main_loss", pred.shape(), w.grid().shape()));
    }
    Ok(pred.sub(gt.grid())?.square().mul(&w.grid().detach())?.mean())
}

/// One scalar gradient step on a weight, clamped to `[T, 1)`.
pub fn descent_step_w(w: f64, e: f64, margin: f64, alpha: f64, floor: f64) -> f64 {
    (w - alpha * pixel_grad(e, margin)).clamp(floor, BELOW_ONE)
}

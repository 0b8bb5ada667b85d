//! Fixtures shared by the benchmarks.

use tutorcount::density::make_density_map;
use tutorcount::synth::generate_scene;
use tutorcount::{AnnotatedScene, DensityMap, SceneRecipe, Tensor};

/// A default-recipe scene of the given size with its density map at the
/// networks' output resolution.
pub fn scene(size: usize, scale_factor: f64) -> (AnnotatedScene, DensityMap) {
    let recipe = SceneRecipe { width: size, height: size, ..SceneRecipe::default() };
    let scene = generate_scene(&recipe, 0).expect("valid recipe");
    let gt = make_density_map(&scene, 15.0, 8, scale_factor).expect("valid scene");
    (scene, gt)
}

/// Deterministic pseudo-random tensor without pulling in an RNG.
pub fn ramp(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::param(shape, values).expect("shape matches data")
}

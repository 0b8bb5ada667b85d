//! The alternating two-network optimisation loop and count evaluation.
//!
//! Each step runs both networks once on the same image. The main network is
//! updated from the weighted regression loss with the weight map detached;
//! the tutor is updated from the tutoring loss with the error map detached.
//! Neither loss contributes gradient to the other network.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::curriculum::{error_map, main_loss, tutor_loss, weight_map_from, CurriculumParams, WeightMap};
use crate::density::{make_density_map, AnnotatedScene, DensityMap, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::nets::{
    forward, init_params, main_net_spec, tutornet_spec, write_checkpoint, MainKind, NetworkParams, NetworkSpec,
    TutorDepth, Width,
};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
const TUTOR_SEED_SALT: u64 = 0x0005_eed7 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Unscaled density maps, no tutor.
    Baseline,
    /// Scaled density maps, unit weights.
    SfOnly,
    /// Scaled density maps weighted by the tutor.
    SfPlusTutor,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::SfOnly, Mode::SfPlusTutor];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::SfOnly => "sf",
            Mode::SfPlusTutor => "sf-tn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "sf" | "sf-only" => Ok(Mode::SfOnly),
            "sf-tn" | "sf-plus-tutornet" => Ok(Mode::SfPlusTutor),
            _ => Err(Error::invalid(format!("unknown mode `{s}` (expected baseline, sf or sf-tn)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub curriculum: CurriculumParams,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub main_spec: NetworkSpec,
    pub tutor_spec: NetworkSpec,
    pub optimizer: Optimizer,
    pub sigma: f64,
    /// Write checkpoints every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(main: MainKind, tutor: TutorDepth, width: Width) -> Result<TrainConfig> {
        let curriculum = CurriculumParams::default();
        Ok(TrainConfig {
            curriculum,
            epochs: 1,
            seed: 0,
            mode: Mode::SfPlusTutor,
            main_spec: main_net_spec(main, width)?,
            tutor_spec: tutornet_spec(tutor, width)?.with_weight_floor(curriculum.floor),
            optimizer: Optimizer::Sgd,
            sigma: DEFAULT_SIGMA,
            checkpoint_every: 0,
            checkpoint_dir: None,
        })
    }

    /// Baseline trains on unscaled maps regardless of the configured factor.
    pub fn scale_factor(&self) -> f64 {
        match self.mode {
            Mode::Baseline => 1.0,
            Mode::SfOnly | Mode::SfPlusTutor => self.curriculum.scale_factor,
        }
    }

    pub fn uses_tutor(&self) -> bool {
        self.mode == Mode::SfPlusTutor
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if let Optimizer::Momentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::invalid(format!("momentum must lie in [0, 1), got {mu}")));
            }
        }
        if self.uses_tutor() && self.tutor_spec.weight_floor().is_none() {
            return Err(Error::invalid(format!("{} does not end in the weight activation", self.tutor_spec.name)));
        }
        let (m, t) = (self.main_spec.downsampling()?, self.tutor_spec.downsampling()?);
        if self.uses_tutor() && m != t {
            return Err(Error::invalid(format!("main downsamples by {m} but tutor by {t}")));
        }
        Ok(())
    }
}

/// Telemetry for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub main_loss: f64,
    pub tutor_loss: Option<f64>,
    pub mean_weight: Option<f64>,
    pub min_weight: Option<f64>,
    pub max_weight: Option<f64>,
    pub mean_error: f64,
}

/// Network parameters plus optimiser memory.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub main: NetworkParams,
    pub tutor: Option<NetworkParams>,
    main_velocity: Option<Vec<Vec<f64>>>,
    tutor_velocity: Option<Vec<Vec<f64>>>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> TrainState {
        TrainState::from_params(
            init_params(&cfg.main_spec, cfg.seed),
            cfg.uses_tutor().then(|| init_params(&cfg.tutor_spec, cfg.seed ^ TUTOR_SEED_SALT)),
        )
    }

    pub fn from_params(main: NetworkParams, tutor: Option<NetworkParams>) -> TrainState {
        TrainState { main, tutor, main_velocity: None, tutor_velocity: None }
    }
}

/// Per-parameter gradients from one step, before any update.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub main: Vec<Vec<f64>>,
    pub tutor: Option<Vec<Vec<f64>>>,
    pub record: StepRecord,
}

fn grads_of(params: &NetworkParams) -> Vec<Vec<f64>> {
    params.tensors().iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect()
}

fn guard(value: f64, quantity: &'static str, epoch: usize, step: usize) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { epoch, step, quantity, value });
    }
    Ok(())
}

/// Runs both forwards and both backwards for one scene without updating
/// anything.
pub fn step_gradients(
    scene: &AnnotatedScene,
    gt: &DensityMap,
    cfg: &TrainConfig,
    state: &TrainState,
    epoch: usize,
    step: usize,
) -> Result<StepGradients> {
    state.main.zero_grad();
    if let Some(t) = &state.tutor {
        t.zero_grad();
    }
    let pred = forward(&cfg.main_spec, &state.main, scene.image())?;
    let errors = error_map(&pred, gt)?;
    let weights = match (&state.tutor, cfg.uses_tutor()) {
        (Some(tutor), true) => {
            let grid = forward(&cfg.tutor_spec, tutor, scene.image())?;
            weight_map_from(grid, cfg.curriculum.floor)?
        }
        (None, true) => return Err(Error::invalid("sf-tn mode needs tutor parameters")),
        _ => WeightMap::ones(pred.shape()),
    };

    let main = main_loss(&pred, gt, &weights)?;
    guard(main.item(), "main_loss", epoch, step)?;
    let tutor = if cfg.uses_tutor() {
        let loss = tutor_loss(&weights, &errors, cfg.curriculum.margin)?;
        guard(loss.item(), "tutor_loss", epoch, step)?;
        loss.backward()?;
        if state.main.tensors().iter().any(|t| t.grad().is_some()) {
            return Err(Error::invalid("tutor loss leaked gradient into the main network"));
        }
        Some(loss.item())
    } else {
        None
    };
    let tutor_grads = state.tutor.as_ref().filter(|_| cfg.uses_tutor()).map(grads_of);
    main.backward()?;
    let main_grads = grads_of(&state.main);
    if let (Some(before), Some(params)) = (&tutor_grads, &state.tutor) {
        if &grads_of(params) != before {
            return Err(Error::invalid("main loss leaked gradient into the tutor"));
        }
    }
    for g in main_grads.iter().chain(tutor_grads.iter().flatten()) {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, step, quantity: "gradient", value: *bad });
        }
    }

    let tutored = cfg.uses_tutor();
    Ok(StepGradients {
        main: main_grads,
        tutor: tutor_grads,
        record: StepRecord {
            epoch,
            step,
            main_loss: main.item(),
            tutor_loss: tutor,
            mean_weight: tutored.then(|| weights.mean()),
            min_weight: tutored.then(|| weights.min()),
            max_weight: tutored.then(|| weights.max()),
            mean_error: errors.mean(),
        },
    })
}

fn apply_update(
    params: &NetworkParams,
    grads: &[Vec<f64>],
    lr: f64,
    optimizer: Optimizer,
    velocity: &mut Option<Vec<Vec<f64>>>,
) -> Result<NetworkParams> {
    let values = match optimizer {
        Optimizer::Sgd => params
            .tensors()
            .iter()
            .zip(grads)
            .map(|(t, g)| t.values().iter().zip(g).map(|(p, g)| p - lr * g).collect())
            .collect(),
        Optimizer::Momentum(mu) => {
            let vel = velocity.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
            params
                .tensors()
                .iter()
                .zip(grads)
                .zip(vel.iter_mut())
                .map(|((t, g), v)| {
                    t.values()
                        .iter()
                        .zip(g)
                        .zip(v.iter_mut())
                        .map(|((p, g), v)| {
                            *v = mu * *v + g;
                            p - lr * *v
                        })
                        .collect()
                })
                .collect()
        }
    };
    params.with_values(values)
}

/// One optimisation step on one scene: forward both networks, then descend
/// the main network on the weighted loss and the tutor on the tutoring loss.
pub fn train_step(
    scene: &AnnotatedScene,
    gt: &DensityMap,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch: usize,
    step: usize,
) -> Result<StepRecord> {
    let grads = step_gradients(scene, gt, cfg, state, epoch, step)?;
    state.main =
        apply_update(&state.main, &grads.main, cfg.curriculum.alpha_main, cfg.optimizer, &mut state.main_velocity)?;
    if let (Some(tutor), Some(tg)) = (&state.tutor, &grads.tutor) {
        state.tutor =
            Some(apply_update(tutor, tg, cfg.curriculum.alpha_tutor, cfg.optimizer, &mut state.tutor_velocity)?);
    }
    Ok(grads.record)
}

/// Ground truth for every scene at the main network's output resolution.
pub fn ground_truths(dataset: &[AnnotatedScene], cfg: &TrainConfig) -> Result<Vec<DensityMap>> {
    let rate = cfg.main_spec.downsampling()?;
    dataset.iter().map(|s| make_density_map(s, cfg.sigma, rate, cfg.scale_factor())).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    /// Set when training stopped early; `records` holds the steps completed.
    pub divergence: Option<Error>,
}

/// Trains for `cfg.epochs` epochs, visiting scenes in a seeded shuffle.
pub fn train(dataset: &[AnnotatedScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| {})
}

/// As [`train`], calling `on_step` after every completed step.
pub fn train_with(
    dataset: &[AnnotatedScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let gts = ground_truths(dataset, cfg)?;
    let mut state = TrainState::init(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs * dataset.len());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, &i) in order.iter().enumerate() {
            match train_step(&dataset[i], &gts[i], cfg, &mut state, epoch, step) {
                Ok(r) => {
                    on_step(&r);
                    records.push(r);
                }
                Err(e @ Error::Divergence { .. }) => return Ok(TrainOutcome { state, records, divergence: Some(e) }),
                Err(e) => return Err(e),
            }
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoints(dir, &format!("epoch{:04}", epoch + 1), cfg, &state)?;
            }
        }
    }
    Ok(TrainOutcome { state, records, divergence: None })
}

/// Writes `main_<tag>.ckpt` and, when present, `tutor_<tag>.ckpt`.
pub fn save_checkpoints(dir: &std::path::Path, tag: &str, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = cfg.scale_factor();
    write_atomic(&dir.join(format!("main_{tag}.ckpt")), |w| {
        write_checkpoint(w, &cfg.main_spec, cfg.seed, s, &state.main)
    })?;
    if let Some(tutor) = &state.tutor {
        write_atomic(&dir.join(format!("tutor_{tag}.ckpt")), |w| {
            write_checkpoint(w, &cfg.tutor_spec, cfg.seed ^ TUTOR_SEED_SALT, s, tutor)
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneCount {
    pub id: String,
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub scenes: Vec<SceneCount>,
}

/// Mean absolute error and root mean squared error of counts.
pub fn count_metrics(predicted: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predicted.is_empty() {
        return Err(Error::invalid("cannot score an empty set"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::shape("count_metrics", &[predicted.len()], &[truth.len()]));
    }
    let n = predicted.len() as f64;
    let mae = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = (predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

/// Predicted count is `sum(prediction) / scale_factor`; the true count is the
/// number of annotated points. Scenes are scored in parallel and reported in
/// input order.
pub fn evaluate(
    dataset: &[AnnotatedScene],
    spec: &NetworkSpec,
    params: &NetworkParams,
    scale_factor: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if !(scale_factor > 0.0) {
        return Err(Error::invalid("scale factor must be positive"));
    }
    let scenes = dataset
        .par_iter()
        .map(|scene| {
            let pred = forward(spec, params, &scene.image().detach())?;
            Ok(SceneCount {
                id: scene.id.clone(),
                predicted: pred.values().iter().sum::<f64>() / scale_factor,
                truth: scene.count() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<f64> = scenes.iter().map(|s| s.predicted).collect();
    let truth: Vec<f64> = scenes.iter().map(|s| s.truth).collect();
    let (mae, mse) = count_metrics(&predicted, &truth)?;
    Ok(EvalReport { mae, mse, scenes })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const RECORDS_HEADER: &str = "epoch,step,main_loss,tutor_loss,mean_weight,min_weight,max_weight,mean_error";

pub fn write_record_row(out: &mut impl Write, r: &StepRecord) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.epoch,
        r.step,
        r.main_loss,
        opt(r.tutor_loss),
        opt(r.mean_weight),
        opt(r.min_weight),
        opt(r.max_weight),
        r.mean_error
    )?;
    Ok(())
}

/// Telemetry CSV; absent quantities are empty fields.
pub fn write_records_csv(out: &mut impl Write, records: &[StepRecord]) -> Result<()> {
    writeln!(out, "{RECORDS_HEADER}")?;
    for r in records {
        write_record_row(out, r)?;
    }
    Ok(())
}

pub fn write_eval_csv(out: &mut impl Write, report: &EvalReport) -> Result<()> {
    writeln!(out, "scene_id,pred_count,gt_count")?;
    for s in &report.scenes {
        writeln!(out, "{},{},{}", s.id, s.predicted, s.truth)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::BELOW_ONE;
    use crate::synth::{generate_dataset, SceneRecipe};
    use crate::tensor::Tensor;

    fn small_cfg(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::new(MainKind::DenseTiny, TutorDepth::L15, Width::DESK).unwrap();
        cfg.mode = mode;
        cfg.epochs = 2;
        cfg.seed = 3;
        cfg.curriculum.alpha_main = 1e-7;
        cfg.curriculum.alpha_tutor = 1e-3;
        cfg
    }

    fn data(n: usize) -> Vec<AnnotatedScene> {
        let recipe = SceneRecipe { width: 32, height: 32, n_points: (2, 8), ..Default::default() };
        generate_dataset(&recipe, n).unwrap()
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sf".parse::<Mode>().unwrap(), Mode::SfOnly);
        assert_eq!("sf-plus-tutornet".parse::<Mode>().unwrap(), Mode::SfPlusTutor);
        assert!("tn".parse::<Mode>().is_err());
    }

    #[test]
    fn metrics_by_hand() {
        let (mae, mse) = count_metrics(&[3.0, 5.0], &[4.0, 4.0]).unwrap();
        assert_eq!((mae, mse), (1.0, 1.0));
        assert_eq!(count_metrics(&[2.0, 7.0], &[2.0, 7.0]).unwrap(), (0.0, 0.0));
        let (mae, mse) = count_metrics(&[2.5], &[4.0]).unwrap();
        assert_eq!((mae, mse), (1.5, 1.5));
        assert!(count_metrics(&[], &[]).is_err());
        assert!(count_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn baseline_forces_unit_scale_and_no_tutor() {
        let mut cfg = small_cfg(Mode::Baseline);
        cfg.curriculum.scale_factor = 1000.0;
        assert_eq!(cfg.scale_factor(), 1.0);
        assert!(TrainState::init(&cfg).tutor.is_none());
        let gts = ground_truths(&data(1), &cfg).unwrap();
        assert_eq!(gts[0].scale_factor, 1.0);
    }

    #[test]
    fn sf_only_step_equals_explicit_unit_weights() {
        let cfg = small_cfg(Mode::SfOnly);
        let scenes = data(1);
        let gt = &ground_truths(&scenes, &cfg).unwrap()[0];
        let state = TrainState::init(&cfg);
        let g = step_gradients(&scenes[0], gt, &cfg, &state, 0, 0).unwrap();
        assert!(g.record.tutor_loss.is_none() && g.record.mean_weight.is_none());

        state.main.zero_grad();
        let pred = forward(&cfg.main_spec, &state.main, scenes[0].image()).unwrap();
        let ones = WeightMap::ones(pred.shape());
        let loss = main_loss(&pred, gt, &ones).unwrap();
        loss.backward().unwrap();
        assert_eq!(loss.item(), g.record.main_loss);
        assert_eq!(grads_of(&state.main), g.main);
    }

    #[test]
    fn zero_main_rate_freezes_main_params() {
        let mut cfg = small_cfg(Mode::SfPlusTutor);
        cfg.curriculum.alpha_main = 0.0;
        let scenes = data(1);
        let gt = &ground_truths(&scenes, &cfg).unwrap()[0];
        let mut state = TrainState::init(&cfg);
        let before = state.main.flat_values();
        let tutor_before = state.tutor.as_ref().unwrap().flat_values();
        train_step(&scenes[0], gt, &cfg, &mut state, 0, 0).unwrap();
        let after = state.main.flat_values();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(state.tutor.as_ref().unwrap().flat_values(), tutor_before);
    }

    #[test]
    fn tutor_update_raises_weights_under_large_errors() {
        // A frozen main network that predicts nothing: every pixel's error is
        // the squared scaled density, far above M/2 for a crowded scene.
        let mut cfg = small_cfg(Mode::SfPlusTutor);
        cfg.curriculum.alpha_main = 0.0;
        cfg.curriculum.alpha_tutor = 1e-4;
        let recipe = SceneRecipe {
            width: 32,
            height: 32,
            n_points: (30, 30),
            clusters: (1, 1),
            cluster_spread: 30.0,
            ..Default::default()
        };
        let scene = crate::synth::generate_scene(&recipe, 0).unwrap();
        let gt = &ground_truths(std::slice::from_ref(&scene), &cfg).unwrap()[0];
        let mut state = TrainState::init(&cfg);
        let zero_main =
            state.main.with_values(state.main.tensors().iter().map(|t| vec![0.0; t.numel()]).collect()).unwrap();
        state.main = zero_main;
        let pred = forward(&cfg.main_spec, &state.main, scene.image()).unwrap();
        let e = error_map(&pred, gt).unwrap();
        assert!(e.values().iter().all(|&v| v > cfg.curriculum.margin / 2.0));

        let mean_w = |s: &TrainState| {
            let w = forward(&cfg.tutor_spec, s.tutor.as_ref().unwrap(), scene.image()).unwrap();
            w.values().iter().sum::<f64>() / w.numel() as f64
        };
        let mut prev = mean_w(&state);
        for step in 0..5 {
            let r = train_step(&scene, gt, &cfg, &mut state, 0, step).unwrap();
            let w = r.mean_weight.unwrap();
            assert!((0.5..=BELOW_ONE).contains(&w));
            let now = mean_w(&state);
            assert!(now >= prev, "step {step}: {now} < {prev}");
            prev = now;
        }
    }

    #[test]
    fn cross_gradients_are_isolated() {
        let cfg = small_cfg(Mode::SfPlusTutor);
        let scenes = data(1);
        let gt = &ground_truths(&scenes, &cfg).unwrap()[0];
        let state = TrainState::init(&cfg);
        let pred = forward(&cfg.main_spec, &state.main, scenes[0].image()).unwrap();
        let w =
            weight_map_from(forward(&cfg.tutor_spec, state.tutor.as_ref().unwrap(), scenes[0].image()).unwrap(), 0.5)
                .unwrap();
        let e = error_map(&pred, gt).unwrap();

        tutor_loss(&w, &e, 0.8).unwrap().backward().unwrap();
        assert!(state.main.tensors().iter().all(|t| t.grad().is_none()));
        state.tutor.as_ref().unwrap().zero_grad();
        main_loss(&pred, gt, &w).unwrap().backward().unwrap();
        assert!(state.tutor.as_ref().unwrap().tensors().iter().all(|t| t.grad().is_none()));
        assert!(state.main.tensors().iter().any(|t| t.grad().is_some()));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg(Mode::SfPlusTutor);
        let scenes = data(4);
        let a = train(&scenes, &cfg).unwrap();
        let b = train(&scenes, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 8);
        assert_eq!(a.state.main.flat_values(), b.state.main.flat_values());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_cfg(Mode::SfOnly);
        cfg.epochs = 0;
        assert!(train(&data(1), &cfg).is_err());
        let cfg = small_cfg(Mode::SfOnly);
        assert!(train(&[], &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported_with_records_so_far() {
        let mut cfg = small_cfg(Mode::SfOnly);
        cfg.curriculum.alpha_main = 1e-2;
        let out = train(&data(4), &cfg).unwrap();
        let err = out.divergence.expect("huge learning rate must diverge");
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(out.records.len() < 8);
    }

    #[test]
    fn momentum_accumulates() {
        let params = NetworkParams::new(vec!["p".into()], vec![Tensor::param(&[1], vec![1.0]).unwrap()]).unwrap();
        let mut vel = None;
        let p1 = apply_update(&params, &[vec![1.0]], 0.1, Optimizer::Momentum(0.9), &mut vel).unwrap();
        let p2 = apply_update(&p1, &[vec![1.0]], 0.1, Optimizer::Momentum(0.9), &mut vel).unwrap();
        assert!((p1.flat_values()[0] - 0.9).abs() < 1e-15);
        assert!((p2.flat_values()[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn evaluation_divides_by_scale_factor() {
        let cfg = small_cfg(Mode::SfOnly);
        let scenes = data(3);
        let params = init_params(&cfg.main_spec, 1);
        let r1 = evaluate(&scenes, &cfg.main_spec, &params, 1.0).unwrap();
        let r1000 = evaluate(&scenes, &cfg.main_spec, &params, 1000.0).unwrap();
        for (a, b) in r1.scenes.iter().zip(&r1000.scenes) {
            assert!((a.predicted / 1000.0 - b.predicted).abs() <= 1e-15 * a.predicted.abs().max(1.0));
            assert_eq!(a.truth, b.truth);
        }
        assert!(r1.mse >= r1.mae);
        assert!(evaluate(&[], &cfg.main_spec, &params, 1.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = StepRecord {
            epoch: 0,
            step: 1,
            main_loss: 2.5,
            tutor_loss: None,
            mean_weight: None,
            min_weight: None,
            max_weight: None,
            mean_error: 0.25,
        };
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[r]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{RECORDS_HEADER}\n0,1,2.5,,,,,0.25\n"));
    }
}

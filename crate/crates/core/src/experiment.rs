//! Three-way ablation on synthetic scenes: baseline, scale factor only, and
//! scale factor with the tutor, each trained from the same seeds.

use std::io::Write;

use crate::curriculum::CurriculumParams;
use crate::error::{Error, Result};
use crate::nets::{MainKind, TutorDepth, Width};
use crate::synth::{generate_dataset, SceneRecipe};
use crate::trainer::{evaluate, train, Mode, Optimizer, TrainConfig};

/// Training preset that is stable with `s = 1000` at batch size 1.
pub const DESK_ALPHA_MAIN: f64 = 3e-8;
pub const DESK_MOMENTUM: f64 = 0.9;
pub const DESK_EPOCHS: usize = 60;

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub recipe: SceneRecipe,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub seeds: Vec<u64>,
    pub main: MainKind,
    pub tutor: TutorDepth,
    pub width: Width,
    pub epochs: usize,
    pub curriculum: CurriculumParams,
    pub optimizer: Optimizer,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            recipe: SceneRecipe::default(),
            train_scenes: 200,
            test_scenes: 50,
            seeds: (0..5).collect(),
            main: MainKind::DenseTiny,
            tutor: TutorDepth::L15,
            width: Width::DESK,
            epochs: DESK_EPOCHS,
            curriculum: CurriculumParams { alpha_main: DESK_ALPHA_MAIN, ..CurriculumParams::default() },
            optimizer: Optimizer::Momentum(DESK_MOMENTUM),
        }
    }
}

impl AblationConfig {
    pub fn train_config(&self, mode: Mode, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.main, self.tutor, self.width)?;
        cfg.tutor_spec = cfg.tutor_spec.with_weight_floor(self.curriculum.floor);
        cfg.curriculum = self.curriculum;
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.epochs = self.epochs;
        cfg.optimizer = self.optimizer;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub mode: Mode,
    pub mae: f64,
    pub mse: f64,
    /// Diverged runs are scored with the parameters reached before stopping.
    pub diverged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn mae(&self, mode: Mode, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed).map(|r| r.mae)
    }

    pub fn median_mae(&self, mode: Mode) -> Option<f64> {
        let mut v: Vec<f64> = self.runs.iter().filter(|r| r.mode == mode).map(|r| r.mae).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    /// Seeds on which `a` scored no worse than `b`, and the number compared.
    pub fn wins(&self, a: Mode, b: Mode) -> (usize, usize) {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let pairs: Vec<(f64, f64)> = seeds.iter().filter_map(|&s| Some((self.mae(a, s)?, self.mae(b, s)?))).collect();
        (pairs.iter().filter(|(x, y)| x <= y).count(), pairs.len())
    }
}

/// Trains every mode on every seed and scores the held-out scenes. The
/// first `train_scenes` generated scenes train, the next `test_scenes` test.
pub fn run_ablation(cfg: &AblationConfig, mut on_run: impl FnMut(&AblationRun)) -> Result<AblationReport> {
    if cfg.train_scenes == 0 || cfg.test_scenes == 0 || cfg.seeds.is_empty() {
        return Err(Error::invalid("ablation needs training scenes, test scenes and at least one seed"));
    }
    let scenes = generate_dataset(&cfg.recipe, cfg.train_scenes + cfg.test_scenes)?;
    let (train_set, test_set) = scenes.split_at(cfg.train_scenes);
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        for mode in Mode::ALL {
            let tc = cfg.train_config(mode, seed)?;
            let out = train(train_set, &tc)?;
            let eval = evaluate(test_set, &tc.main_spec, &out.state.main, tc.scale_factor())?;
            let run = AblationRun { seed, mode, mae: eval.mae, mse: eval.mse, diverged: out.divergence.is_some() };
            on_run(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}

pub fn write_ablation_csv(out: &mut impl Write, report: &AblationReport) -> Result<()> {
    writeln!(out, "seed,mode,mae,mse,diverged")?;
    for r in &report.runs {
        writeln!(out, "{},{},{},{},{}", r.seed, r.mode, r.mae, r.mse, r.diverged)?;
    }
    Ok(())
}

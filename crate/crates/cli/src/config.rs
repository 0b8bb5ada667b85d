//! `key = value` configuration files. Blank lines and `#` comments are
//! ignored; unknown keys are errors.

use std::path::Path;

use tutorcount::experiment::AblationConfig;
use tutorcount::synth::Background;
use tutorcount::trainer::{Mode, Optimizer, TrainConfig};
use tutorcount::{Error, MainKind, Result, SceneRecipe, TutorDepth, Width};

pub const TRAIN_KEYS: &str = "\
Training config keys (key = value, # comments):
  main              main network: mcnn-tiny, vggish-tiny, unet-tiny, dense-tiny [dense-tiny]
  tutor             tutor depth: 15, 29, 43 or 94 [15]
  width             channel multiplier, e.g. 1/8 or 1 [1/8]
  mode              baseline, sf or sf-tn [sf-tn]
  epochs            passes over the training set [60]
  seed              initialisation and shuffling seed [0]
  t                 weight floor T for x <= 0 [0.5]
  margin            tutoring margin M [0.8]
  scale_factor      density scale factor s (forced to 1 in baseline) [1000]
  alpha_main        main network learning rate [3e-8]
  alpha_tutor       tutor learning rate [1e-3]
  optimizer         sgd or momentum [momentum]
  momentum          momentum coefficient [0.9]
  sigma             Gaussian kernel width in pixels [15]
  checkpoint_every  write checkpoints every N epochs, 0 = only final [0]";

pub const RECIPE_KEYS: &str = "\
Recipe keys (key = value, # comments):
  width, height     image size, multiples of 8 [64, 64]
  n_points          people per scene, min,max [10,40]
  clusters          cluster centres per scene, min,max [1,3]
  cluster_spread    std dev of offsets around a centre, pixels [6]
  blob_radius       person blob radius, min,max pixels [1.5,2.5]
  background        flat or noise:<sigma> [noise:0.03]
  seed              generator seed [2024]";

pub const ABLATION_KEYS: &str = "\
Ablation config keys: every training key except mode, seed, sigma and
checkpoint_every; every recipe key prefixed with `recipe.`; plus:
  train_scenes      training scenes [200]
  test_scenes       held-out scenes [50]
  seeds             comma-separated seeds [0,1,2,3,4]";

#[derive(Debug, Clone)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push(Entry { key: k.trim().to_string(), value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn bad(e: &Entry, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("line {}: `{}`: {msg}", e.line, e.key))
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| bad(e, err))
}

fn pair<T: std::str::FromStr>(e: &Entry) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = e.value.split_once(',').ok_or_else(|| bad(e, "expected `min,max`"))?;
    Ok((a.trim().parse().map_err(|err| bad(e, err))?, b.trim().parse().map_err(|err| bad(e, err))?))
}

/// Applies a recipe key; returns false if the key is not a recipe key.
fn apply_recipe(r: &mut SceneRecipe, key: &str, e: &Entry) -> Result<bool> {
    match key {
        "width" => r.width = num(e)?,
        "height" => r.height = num(e)?,
        "n_points" => r.n_points = pair(e)?,
        "clusters" => r.clusters = pair(e)?,
        "cluster_spread" => r.cluster_spread = num(e)?,
        "blob_radius" => r.blob_radius = pair(e)?,
        "seed" => r.seed = num(e)?,
        "background" => {
            r.background = match e.value.split_once(':') {
                None if e.value == "flat" => Background::Flat,
                Some(("noise", s)) => Background::Noise(s.trim().parse().map_err(|err| bad(e, err))?),
                _ => return Err(bad(e, "expected `flat` or `noise:<sigma>`")),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn recipe(entries: &[Entry]) -> Result<SceneRecipe> {
    let mut r = SceneRecipe::default();
    for e in entries {
        if !apply_recipe(&mut r, &e.key, e)? {
            return Err(bad(e, "unknown recipe key"));
        }
    }
    r.validate()?;
    Ok(r)
}

/// Shared training settings before networks are built.
#[derive(Debug, Clone)]
struct TrainKeys {
    main: MainKind,
    tutor: TutorDepth,
    width: Width,
    ablation: AblationConfig,
    mode: Mode,
    seed: u64,
    sigma: f64,
    checkpoint_every: usize,
    momentum: f64,
    optimizer_sgd: bool,
}

impl Default for TrainKeys {
    fn default() -> Self {
        let ablation = AblationConfig::default();
        let momentum = match ablation.optimizer {
            Optimizer::Momentum(m) => m,
            Optimizer::Sgd => 0.9,
        };
        TrainKeys {
            main: ablation.main,
            tutor: ablation.tutor,
            width: ablation.width,
            mode: Mode::SfPlusTutor,
            seed: 0,
            sigma: tutorcount::density::DEFAULT_SIGMA,
            checkpoint_every: 0,
            momentum,
            optimizer_sgd: matches!(ablation.optimizer, Optimizer::Sgd),
            ablation,
        }
    }
}

impl TrainKeys {
    fn apply(&mut self, e: &Entry, allow_run_keys: bool) -> Result<bool> {
        let c = &mut self.ablation.curriculum;
        match e.key.as_str() {
            "main" => self.main = e.value.parse()?,
            "tutor" => self.tutor = TutorDepth::try_from(num::<usize>(e)?)?,
            "width" => self.width = e.value.parse()?,
            "epochs" => self.ablation.epochs = num(e)?,
            "t" => c.floor = num(e)?,
            "margin" => c.margin = num(e)?,
            "scale_factor" => c.scale_factor = num(e)?,
            "alpha_main" => c.alpha_main = num(e)?,
            "alpha_tutor" => c.alpha_tutor = num(e)?,
            "momentum" => self.momentum = num(e)?,
            "optimizer" => {
                self.optimizer_sgd = match e.value.as_str() {
                    "sgd" => true,
                    "momentum" => false,
                    _ => return Err(bad(e, "expected `sgd` or `momentum`")),
                }
            }
            "sigma" if allow_run_keys => self.sigma = num(e)?,
            "mode" if allow_run_keys => self.mode = e.value.parse()?,
            "seed" if allow_run_keys => self.seed = num(e)?,
            "checkpoint_every" if allow_run_keys => self.checkpoint_every = num(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn finish(mut self) -> Result<AblationConfig> {
        self.ablation.main = self.main;
        self.ablation.tutor = self.tutor;
        self.ablation.width = self.width;
        self.ablation.optimizer = if self.optimizer_sgd { Optimizer::Sgd } else { Optimizer::Momentum(self.momentum) };
        self.ablation.curriculum.validate()?;
        Ok(self.ablation)
    }
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub t: Option<f64>,
    pub margin: Option<f64>,
    pub scale_factor: Option<f64>,
}

pub fn train_config(entries: &[Entry], over: &Overrides) -> Result<TrainConfig> {
    let mut keys = TrainKeys::default();
    for e in entries {
        if !keys.apply(e, true)? {
            return Err(bad(e, "unknown training key"));
        }
    }
    let c = &mut keys.ablation.curriculum;
    if let Some(t) = over.t {
        c.floor = t;
    }
    if let Some(m) = over.margin {
        c.margin = m;
    }
    if let Some(s) = over.scale_factor {
        c.scale_factor = s;
    }
    let mode = over.mode.unwrap_or(keys.mode);
    let (seed, sigma, every) = (keys.seed, keys.sigma, keys.checkpoint_every);
    let mut cfg = keys.finish()?.train_config(mode, seed)?;
    cfg.sigma = sigma;
    cfg.checkpoint_every = every;
    cfg.validate()?;
    Ok(cfg)
}

pub fn ablation_config(entries: &[Entry]) -> Result<AblationConfig> {
    let mut keys = TrainKeys::default();
    let mut recipe = SceneRecipe::default();
    let (mut train_scenes, mut test_scenes, mut seeds) = (None, None, None);
    for e in entries {
        if let Some(k) = e.key.strip_prefix("recipe.") {
            if !apply_recipe(&mut recipe, k, e)? {
                return Err(bad(e, "unknown recipe key"));
            }
            continue;
        }
        match e.key.as_str() {
            "train_scenes" => train_scenes = Some(num(e)?),
            "test_scenes" => test_scenes = Some(num(e)?),
            "seeds" => {
                seeds = Some(
                    e.value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|err| bad(e, err)))
                        .collect::<Result<Vec<u64>>>()?,
                )
            }
            _ if keys.apply(e, false)? => {}
            _ => return Err(bad(e, "unknown ablation key")),
        }
    }
    recipe.validate()?;
    let mut cfg = keys.finish()?;
    cfg.recipe = recipe;
    cfg.train_scenes = train_scenes.unwrap_or(cfg.train_scenes);
    cfg.test_scenes = test_scenes.unwrap_or(cfg.test_scenes);
    cfg.seeds = seeds.unwrap_or(cfg.seeds);
    Ok(cfg)
}

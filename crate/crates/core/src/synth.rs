//! Deterministic synthetic crowd scenes and their on-disk format.
//!
//! People are placed in a few Gaussian clusters and rendered as dark radial
//! blobs on a light background, so most of each image is empty background
//! and the foreground is concentrated: the imbalance the curriculum targets.
//!
//! On disk a scene is `<id>.ppm` (binary P6, or P5 for one channel) plus
//! `<id>.pts` in the annotation format of [`crate::density`]; a dataset
//! directory lists its scene ids in `manifest.txt`.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::density::{read_annotations, write_annotations, AnnotatedScene, Point};
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Flat,
    /// Per-pixel Gaussian noise with the given standard deviation.
    Noise(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub width: usize,
    pub height: usize,
    pub n_points: (usize, usize),
    pub clusters: (usize, usize),
    /// Standard deviation of point offsets around a cluster centre, pixels.
    pub cluster_spread: f64,
    pub blob_radius: (f64, f64),
    pub background: Background,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            width: 64,
            height: 64,
            n_points: (10, 40),
            clusters: (1, 3),
            cluster_spread: 6.0,
            blob_radius: (1.5, 2.5),
            background: Background::Noise(0.03),
            seed: 2024,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "scene size {}x{} must be positive and divisible by 8",
                self.width, self.height
            )));
        }
        if self.n_points.0 > self.n_points.1 {
            return Err(Error::invalid("n_points: min exceeds max"));
        }
        if self.clusters.0 > self.clusters.1 || self.clusters.1 == 0 {
            return Err(Error::invalid("clusters: need 1 <= max and min <= max"));
        }
        if !(self.blob_radius.0 > 0.0) || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::invalid("blob radius: need 0 < min <= max"));
        }
        if !(self.cluster_spread >= 0.0) {
            return Err(Error::invalid("cluster spread must be non-negative"));
        }
        if let Background::Noise(s) = self.background {
            if !(s >= 0.0) {
                return Err(Error::invalid("background noise must be non-negative"));
            }
        }
        Ok(())
    }
}

const BACKGROUND_LEVEL: f64 = 0.8;
const BLOB_DEPTH: f64 = 0.75;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Scene `index` of the recipe; a pure function of `(recipe, index)`.
pub fn generate_scene(recipe: &SceneRecipe, index: usize) -> Result<AnnotatedScene> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(index as u64);
    let (w, h) = (recipe.width as f64, recipe.height as f64);

    let n = rng.random_range(recipe.n_points.0..=recipe.n_points.1);
    let k = rng.random_range(recipe.clusters.0.max(1)..=recipe.clusters.1);
    let centres: Vec<(f64, f64)> = (0..k).map(|_| (rng.random::<f64>() * w, rng.random::<f64>() * h)).collect();
    let spread = Normal::new(0.0, recipe.cluster_spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let (cx, cy) = centres[rng.random_range(0..k)];
        let x = cx + spread.sample(&mut rng);
        let y = cy + spread.sample(&mut rng);
        if x > 0.0 && x < w && y > 0.0 && y < h {
            points.push(Point::new(x, y));
        }
    }

    let mut gray: Vec<f64> = match recipe.background {
        Background::Flat => vec![BACKGROUND_LEVEL; recipe.width * recipe.height],
        Background::Noise(sigma) => {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            (0..recipe.width * recipe.height).map(|_| BACKGROUND_LEVEL + noise.sample(&mut rng)).collect()
        }
    };
    for p in &points {
        let r = rng.random_range(recipe.blob_radius.0..=recipe.blob_radius.1);
        let x0 = (p.x - r).floor().max(0.0) as usize;
        let y0 = (p.y - r).floor().max(0.0) as usize;
        let x1 = ((p.x + r).ceil() as usize).min(recipe.width);
        let y1 = ((p.y + r).ceil() as usize).min(recipe.height);
        for py in y0..y1 {
            for px in x0..x1 {
                let dx = px as f64 + 0.5 - p.x;
                let dy = py as f64 + 0.5 - p.y;
                let t = 1.0 - (dx * dx + dy * dy) / (r * r);
                if t > 0.0 {
                    gray[py * recipe.width + px] *= 1.0 - BLOB_DEPTH * t;
                }
            }
        }
    }

    let plane: Vec<f64> = gray.into_iter().map(quantize).collect();
    let mut image = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        image.extend_from_slice(&plane);
    }
    let image = Tensor::new(&[1, 3, recipe.height, recipe.width], image)?;
    AnnotatedScene::new(format!("scene{index:05}"), image, points)
}

pub fn generate_dataset(recipe: &SceneRecipe, count: usize) -> Result<Vec<AnnotatedScene>> {
    (0..count).map(|i| generate_scene(recipe, i)).collect()
}

fn ppm_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ppm"))
}

fn pts_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pts"))
}

/// Writes `<id>.ppm` and `<id>.pts` into `dir`.
pub fn write_scene(dir: &Path, scene: &AnnotatedScene) -> Result<()> {
    let (c, h, w) = (scene.channels(), scene.height(), scene.width());
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("only 1- or 3-channel images can be stored, got {c}")));
    }
    let v = scene.image().values();
    let plane = h * w;
    let mut pixels = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            pixels.push((v[ch * plane + i] * 255.0).round() as u8);
        }
    }
    write_atomic(&ppm_path(dir, &scene.id), |out| {
        write!(out, "{}\n{w} {h}\n255\n", if c == 3 { "P6" } else { "P5" })?;
        out.write_all(&pixels)?;
        Ok(())
    })?;
    write_atomic(&pts_path(dir, &scene.id), |out| write_annotations(out, w, h, c, scene.points()))
}

struct Image {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

fn read_pnm(path: &Path) -> Result<Image> {
    let mut reader = BufReader::new(File::open(path)?);
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut tokens: Vec<String> = Vec::new();
    let mut line_no = 0;
    while tokens.len() < 4 {
        let mut line = Vec::new();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Err(err(line_no + 1, "truncated header".into()));
        }
        line_no += 1;
        let text = String::from_utf8_lossy(&line);
        let text = text.split('#').next().unwrap_or("");
        tokens.extend(text.split_whitespace().map(str::to_owned));
    }
    if tokens.len() > 4 {
        return Err(err(line_no, "pixel data must start on the line after maxval".into()));
    }
    let channels = match tokens[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(err(1, format!("unsupported magic `{other}` (expected P5 or P6)"))),
    };
    let dim = |t: &str| t.parse::<usize>().ok().filter(|&d| d > 0);
    let (Some(width), Some(height)) = (dim(&tokens[1]), dim(&tokens[2])) else {
        return Err(err(line_no, format!("bad dimensions `{} {}`", tokens[1], tokens[2])));
    };
    if tokens[3] != "255" {
        return Err(err(line_no, format!("maxval must be 255, got `{}`", tokens[3])));
    }
    let plane = width * height;
    let mut raw = vec![0u8; plane * channels];
    reader
        .read_exact(&mut raw)
        .map_err(|_| err(line_no + 1, format!("truncated pixel data, expected {} bytes", raw.len())))?;
    let mut values = vec![0.0; plane * channels];
    for i in 0..plane {
        for ch in 0..channels {
            values[ch * plane + i] = raw[i * channels + ch] as f64 / 255.0;
        }
    }
    Ok(Image { width, height, channels, values })
}

/// Reads `<id>.ppm` and `<id>.pts` from `dir`, checking they agree.
pub fn read_scene(dir: &Path, id: &str) -> Result<AnnotatedScene> {
    let img = read_pnm(&ppm_path(dir, id))?;
    let path = pts_path(dir, id);
    let ann = read_annotations(BufReader::new(File::open(&path)?), &path)?;
    if (ann.width, ann.height, ann.channels) != (img.width, img.height, img.channels) {
        return Err(Error::Parse {
            path,
            line: 1,
            msg: format!(
                "header {}x{}x{} does not match image {}x{}x{}",
                ann.width, ann.height, ann.channels, img.width, img.height, img.channels
            ),
        });
    }
    let image = Tensor::new(&[1, img.channels, img.height, img.width], img.values)?;
    AnnotatedScene::new(id, image, ann.points)
}

pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), |out| {
        for id in ids {
            writeln!(out, "{id}")?;
        }
        Ok(())
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let reader = BufReader::new(File::open(&path)?);
    let mut ids = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if id.contains(['/', '\\']) {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                msg: format!("scene id `{id}` must not contain path separators"),
            });
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// Writes every scene plus the manifest.
pub fn write_dataset(dir: &Path, scenes: &[AnnotatedScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in scenes {
        write_scene(dir, s)?;
    }
    write_manifest(dir, &scenes.iter().map(|s| s.id.clone()).collect::<Vec<_>>())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    read_manifest(dir)?.iter().map(|id| read_scene(dir, id)).collect()
}

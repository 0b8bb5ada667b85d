//! Ground-truth density maps from point annotations, the scale-factor
//! transform, and the value-distribution analyses used to motivate it.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 15.0;
pub const DEFAULT_SCALE_FACTOR: f64 = 1000.0;
/// Kernel support radius in units of the (grid-space) standard deviation.
pub const TRUNCATION_SIGMAS: f64 = 4.0;
pub const SUPPORTED_DOWNSAMPLE: [usize; 4] = [1, 2, 4, 8];

const DMAP_MAGIC: &[u8; 5] = b"DMAP1";

/// A head annotation in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// An image (`1×C×H×W`, values in `[0, 1]`) and its head annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedScene {
    pub id: String,
    image: Tensor,
    points: Vec<Point>,
}

impl PartialEq for AnnotatedScene {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.points == other.points
            && self.image.shape() == other.image.shape()
            && self.image.values() == other.image.values()
    }
}

impl AnnotatedScene {
    pub fn new(id: impl Into<String>, image: Tensor, points: Vec<Point>) -> Result<Self> {
        let (width, height) = match *image.shape() {
            [1, _, h, w] => (w, h),
            _ => {
                return Err(Error::InvalidShape {
                    op: "scene",
                    msg: format!("image must be 1xCxHxW, got {:?}", image.shape()),
                })
            }
        };
        if let Some(v) = image.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        for p in &points {
            check_point(*p, width, height)?;
        }
        Ok(AnnotatedScene { id: id.into(), image, points })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }
}

pub(crate) fn check_point(p: Point, width: usize, height: usize) -> Result<()> {
    let inside =
        p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
    if inside {
        Ok(())
    } else {
        Err(Error::PointOutOfBounds { x: p.x, y: p.y, width, height })
    }
}

/// A non-negative `1×1×h×w` grid whose integral divided by `scale_factor`
/// is the object count.
#[derive(Debug, Clone)]
pub struct DensityMap {
    grid: Tensor,
    pub scale_factor: f64,
    pub sigma: f64,
    pub downsample: usize,
}

impl DensityMap {
    pub fn from_grid(grid: Tensor, scale_factor: f64, sigma: f64, downsample: usize) -> Result<Self> {
        if !matches!(grid.shape(), [1, 1, _, _]) {
            return Err(Error::InvalidShape {
                op: "density map",
                msg: format!("grid must be 1x1xHxW, got {:?}", grid.shape()),
            });
        }
        if grid.values().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("density values must be non-negative"));
        }
        if !(scale_factor > 0.0) || !(sigma > 0.0) || downsample == 0 {
            return Err(Error::invalid("scale factor, sigma and downsample must be positive"));
        }
        Ok(DensityMap { grid: grid.detach(), scale_factor, sigma, downsample })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    /// `sum(grid) / scale_factor`.
    pub fn count(&self) -> f64 {
        self.total() / self.scale_factor
    }

    /// The same map multiplied by `factor`; the stored scale factor is
    /// multiplied too, so [`DensityMap::count`] is unchanged.
    pub fn rescaled(&self, factor: f64) -> Result<DensityMap> {
        DensityMap::from_grid(self.grid.scale(factor), self.scale_factor * factor, self.sigma, self.downsample)
    }
}

/// Accumulates a unit-mass Gaussian per point directly at grid resolution
/// `H/downsample × W/downsample`, then multiplies by `scale_factor`.
///
/// Each kernel has standard deviation `sigma / downsample` cells, is
/// evaluated at cell centres within `4·sigma/downsample` of the point, and is
/// renormalised over the cells that survive truncation and image borders.
pub fn make_density_map(
    scene: &AnnotatedScene,
    sigma: f64,
    downsample: usize,
    scale_factor: f64,
) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !SUPPORTED_DOWNSAMPLE.contains(&downsample) {
        return Err(Error::invalid(format!("downsample must be one of {SUPPORTED_DOWNSAMPLE:?}, got {downsample}")));
    }
    if !(scale_factor > 0.0) || !scale_factor.is_finite() {
        return Err(Error::invalid(format!("scale factor must be positive, got {scale_factor}")));
    }
    let (height, width) = (scene.height(), scene.width());
    if height % downsample != 0 || width % downsample != 0 {
        return Err(Error::Indivisible { height, width, rate: downsample });
    }
    let (gh, gw) = (height / downsample, width / downsample);
    let unit = accumulate_kernels(scene.points(), gh, gw, sigma / downsample as f64, downsample as f64);
    let grid = unit.into_iter().map(|v| v * scale_factor).collect();
    DensityMap::from_grid(Tensor::new(&[1, 1, gh, gw], grid)?, scale_factor, sigma, downsample)
}

fn accumulate_kernels(points: &[Point], gh: usize, gw: usize, sigma_cells: f64, downsample: f64) -> Vec<f64> {
    let mut grid = vec![0.0; gh * gw];
    let radius = TRUNCATION_SIGMAS * sigma_cells;
    let inv_two_var = 1.0 / (2.0 * sigma_cells * sigma_cells);
    let mut patch: Vec<(usize, f64)> = Vec::new();
    for p in points {
        let (cx, cy) = (p.x / downsample, p.y / downsample);
        let (home_x, home_y) = ((cx as usize).min(gw - 1), (cy as usize).min(gh - 1));
        let x0 = (cx - radius - 0.5).floor().max(0.0) as usize;
        let y0 = (cy - radius - 0.5).floor().max(0.0) as usize;
        let x1 = ((cx + radius + 0.5).ceil() as usize).min(gw);
        let y1 = ((cy + radius + 0.5).ceil() as usize).min(gh);
        patch.clear();
        let mut mass = 0.0;
        for gy in y0..y1 {
            let dy = gy as f64 + 0.5 - cy;
            for gx in x0..x1 {
                let dx = gx as f64 + 0.5 - cx;
                let d2 = dx * dx + dy * dy;
                let home = gx == home_x && gy == home_y;
                if d2 <= radius * radius || home {
                    let v = (-d2 * inv_two_var).exp();
                    mass += v;
                    patch.push((gy * gw + gx, v));
                }
            }
        }
        if mass > 0.0 {
            for &(i, v) in &patch {
                grid[i] += v / mass;
            }
        } else {
            // Kernel narrower than a cell: all mass lands on the home cell.
            grid[home_y * gw + home_x] += 1.0;
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over `[0, max]`. An all-zero map yields a single
/// degenerate `[0, 0]` bin holding every pixel.
pub fn value_histogram(map: &DensityMap, bins: usize) -> Result<Vec<HistogramBin>> {
    histogram_of(map.values(), bins)
}

pub fn histogram_of(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Ok(vec![HistogramBin { lower: 0.0, upper: 0.0, count: values.len() }]);
    }
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: i as f64 * width,
            upper: if i + 1 == bins { max } else { (i + 1) as f64 * width },
            count,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDistance {
    pub value: f64,
    pub distance: f64,
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Rounds every value to four decimals, treats each distinct rounded value
/// as a group, and reports each group's distance to the unweighted mean of
/// the group values. Sorted by group value.
pub fn cluster_distance_analysis(map: &DensityMap) -> Vec<GroupDistance> {
    cluster_distances(map.values())
}

pub fn cluster_distances(values: &[f64]) -> Vec<GroupDistance> {
    let mut keys: Vec<i64> = values.iter().map(|v| (v * 1e4).round() as i64).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.is_empty() {
        return Vec::new();
    }
    let groups: Vec<f64> = keys.iter().map(|&k| k as f64 / 1e4).collect();
    let mean = groups.iter().sum::<f64>() / groups.len() as f64;
    groups.into_iter().map(|value| GroupDistance { value, distance: (value - mean).abs() }).collect()
}

// ----- file formats ------------------------------------------------------

/// Writes the annotation text format: a `W H C` header line, then one
/// `x y` pair per line.
pub fn write_annotations(
    out: &mut impl Write,
    width: usize,
    height: usize,
    channels: usize,
    points: &[Point],
) -> Result<()> {
    writeln!(out, "{width} {height} {channels}")?;
    for p in points {
        writeln!(out, "{} {}", p.x, p.y)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub points: Vec<Point>,
}

/// Parses the annotation text format. `path` is only used in error messages.
pub fn read_annotations(input: impl BufRead, path: &Path) -> Result<Annotations> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = input.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
            None => return Err(err(1, "missing `W H C` header".into())),
        }
    };
    let fields: Vec<&str> = header.1.split_whitespace().collect();
    let dims: Vec<usize> = fields
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(header.0, format!("bad header `{}`: {e}", header.1)))?;
    let [width, height, channels] = dims[..] else {
        return Err(err(header.0, format!("header needs `W H C`, got `{}`", header.1)));
    };
    if width == 0 || height == 0 || channels == 0 {
        return Err(err(header.0, "dimensions must be positive".into()));
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(lineno, format!("bad point `{line}`: {e}")))?;
        let [x, y] = coords[..] else {
            return Err(err(lineno, format!("expected `x y`, got `{line}`")));
        };
        let p = Point::new(x, y);
        check_point(p, width, height).map_err(|e| err(lineno, e.to_string()))?;
        points.push(p);
    }
    Ok(Annotations { width, height, channels, points })
}

/// 16-bit binary PGM, normalised so the map maximum becomes 65535. The
/// header comment records the scale factor, sigma and the true maximum.
pub fn write_density_pgm(out: &mut impl Write, map: &DensityMap) -> Result<()> {
    let max = map.values().iter().copied().fold(0.0_f64, f64::max);
    writeln!(out, "P5")?;
    writeln!(out, "# scale_factor={} sigma={} max={}", map.scale_factor, map.sigma, max)?;
    writeln!(out, "{} {}", map.width(), map.height())?;
    writeln!(out, "65535")?;
    let mut buf = Vec::with_capacity(map.values().len() * 2);
    for &v in map.values() {
        let level = if max > 0.0 { (v / max * 65535.0).round() as u16 } else { 0 };
        buf.extend_from_slice(&level.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Raw binary: `DMAP1`, little-endian `u32 h, u32 w, f64 s, f64 sigma`, then
/// `h·w` little-endian `f64` values.
pub fn write_dmap(out: &mut impl Write, map: &DensityMap) -> Result<()> {
    out.write_all(DMAP_MAGIC)?;
    out.write_all(&(map.height() as u32).to_le_bytes())?;
    out.write_all(&(map.width() as u32).to_le_bytes())?;
    out.write_all(&map.scale_factor.to_le_bytes())?;
    out.write_all(&map.sigma.to_le_bytes())?;
    for v in map.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the `DMAP1` format. The format does not carry the downsampling
/// rate, so the caller supplies it.
pub fn read_dmap(input: &mut impl Read, downsample: usize) -> Result<DensityMap> {
    let fmt = |msg: String| Error::Format { what: "DMAP1", msg };
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic).map_err(|e| fmt(format!("header: {e}")))?;
    if &magic != DMAP_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let mut u = [0u8; 4];
    let mut f = [0u8; 8];
    input.read_exact(&mut u).map_err(|e| fmt(format!("header: {e}")))?;
    let h = u32::from_le_bytes(u) as usize;
    input.read_exact(&mut u).map_err(|e| fmt(format!("header: {e}")))?;
    let w = u32::from_le_bytes(u) as usize;
    input.read_exact(&mut f).map_err(|e| fmt(format!("header: {e}")))?;
    let s = f64::from_le_bytes(f);
    input.read_exact(&mut f).map_err(|e| fmt(format!("header: {e}")))?;
    let sigma = f64::from_le_bytes(f);
    if h == 0 || w == 0 {
        return Err(fmt(format!("empty grid {h}x{w}")));
    }
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h * w {
        input.read_exact(&mut f).map_err(|_| fmt(format!("truncated after {i} of {} values", h * w)))?;
        values.push(f64::from_le_bytes(f));
    }
    DensityMap::from_grid(Tensor::new(&[1, 1, h, w], values)?, s, sigma, downsample)
}

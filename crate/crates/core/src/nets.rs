//! Network descriptions, parameter initialisation and the forward pass.
//!
//! A [`NetworkSpec`] is a plain tree of [`Layer`]s with concrete channel
//! counts. Parameters live outside the spec in [`NetworkParams`], ordered by
//! a depth-first walk of the layer tree; [`forward`] consumes them in the same
//! order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curriculum::weight_activation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output resolution of every network is `1/DOWNSAMPLING` of its input.
pub const DOWNSAMPLING: usize = 8;
const CKPT_MAGIC: &[u8; 7] = b"TGCKPT1";

/// Rational channel multiplier applied to the reference channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Width {
    pub num: u32,
    pub den: u32,
}

impl Width {
    pub const FULL: Width = Width { num: 1, den: 1 };
    pub const DESK: Width = Width { num: 1, den: 8 };

    pub fn new(num: u32, den: u32) -> Result<Width> {
        if num == 0 || den == 0 {
            return Err(Error::invalid(format!("width multiplier {num}/{den} must be positive")));
        }
        Ok(Width { num, den })
    }

    /// Scales a reference channel count; the result must be a positive integer.
    pub fn channels(&self, reference: usize) -> Result<usize> {
        let scaled = reference * self.num as usize;
        if !scaled.is_multiple_of(self.den as usize) || scaled == 0 {
            return Err(Error::invalid(format!(
                "width {self} does not map {reference} channels to a positive integer"
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Width {
    type Err = Error;

    fn from_str(s: &str) -> Result<Width> {
        let bad = || Error::invalid(format!("width multiplier `{s}` is not of the form N or N/D"));
        match s.trim().split_once('/') {
            Some((n, d)) => Width::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Width::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FinalActivation {
    /// The curriculum weight activation with floor `T`.
    Weight {
        floor: f64,
    },
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Two 3×3 convolutions per repeat; the first repeat carries the stride.
    ResidualBasic {
        channels: usize,
        repeats: usize,
        stride: usize,
    },
    /// 1×1 (`reduce`) → 3×3 (`mid`) → 1×1 (`out`) per repeat; the first 1×1 of
    /// the first repeat carries the stride.
    ResidualBottleneck {
        reduce: usize,
        mid: usize,
        out: usize,
        repeats: usize,
        stride: usize,
    },
    /// Runs every branch on the same input and concatenates channels. An
    /// empty branch passes its input through.
    Concat(Vec<Vec<Layer>>),
    Upsample {
        factor: usize,
    },
    Final(FinalActivation),
}

fn conv(out_channels: usize, kernel: usize, stride: usize) -> Layer {
    Layer::Conv { out_channels, kernel, stride, padding: kernel / 2 }
}

fn pool2() -> Layer {
    Layer::MaxPool { kernel: 2, stride: 2, padding: 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TutorDepth {
    L15,
    L29,
    L43,
    L94,
}

impl TutorDepth {
    pub const ALL: [TutorDepth; 4] = [TutorDepth::L15, TutorDepth::L29, TutorDepth::L43, TutorDepth::L94];

    pub fn layers(self) -> usize {
        match self {
            TutorDepth::L15 => 15,
            TutorDepth::L29 => 29,
            TutorDepth::L43 => 43,
            TutorDepth::L94 => 94,
        }
    }
}

impl TryFrom<usize> for TutorDepth {
    type Error = Error;

    fn try_from(depth: usize) -> Result<TutorDepth> {
        TutorDepth::ALL
            .into_iter()
            .find(|d| d.layers() == depth)
            .ok_or_else(|| Error::invalid(format!("TutorNet depth must be 15, 29, 43 or 94, got {depth}")))
    }
}

/// Desk-scale stand-ins for the four main-network families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainKind {
    /// Three columns with 9/7/5 first-layer kernels.
    McnnTiny,
    /// Deep single column of 3×3 convolutions.
    VggishTiny,
    /// Encoder with a skip across a lower-resolution bottleneck.
    UnetTiny,
    /// Densely concatenated 3×3 blocks.
    DenseTiny,
}

impl MainKind {
    pub const ALL: [MainKind; 4] = [MainKind::McnnTiny, MainKind::VggishTiny, MainKind::UnetTiny, MainKind::DenseTiny];

    pub fn name(self) -> &'static str {
        match self {
            MainKind::McnnTiny => "mcnn-tiny",
            MainKind::VggishTiny => "vggish-tiny",
            MainKind::UnetTiny => "unet-tiny",
            MainKind::DenseTiny => "dense-tiny",
        }
    }
}

impl FromStr for MainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<MainKind> {
        MainKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown main network `{s}` (expected mcnn-tiny, vggish-tiny, unet-tiny or dense-tiny)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub width: Width,
    pub layers: Vec<Layer>,
}

/// Builds a TutorNet from the ResNet-style configuration table: a 7×7/2 stem,
/// 3×3/2 max pool, three residual stages (the second downsampling by 2) and a
/// 1×1 head ending in the weight activation.
pub fn tutornet_spec(depth: TutorDepth, width: Width) -> Result<NetworkSpec> {
    let c = |n: usize| width.channels(n);
    let basic = |ch: usize, repeats: usize, stride: usize| -> Result<Layer> {
        Ok(Layer::ResidualBasic { channels: c(ch)?, repeats, stride })
    };
    let bottleneck = |reduce: usize, mid: usize, out: usize, repeats: usize, stride: usize| -> Result<Layer> {
        Ok(Layer::ResidualBottleneck { reduce: c(reduce)?, mid: c(mid)?, out: c(out)?, repeats, stride })
    };
    let mut layers = vec![conv(c(64)?, 7, 2), Layer::Relu, Layer::MaxPool { kernel: 3, stride: 2, padding: 1 }];
    match depth {
        TutorDepth::L15 => layers.extend([basic(64, 2, 1)?, basic(128, 2, 2)?, basic(256, 2, 1)?]),
        TutorDepth::L29 => layers.extend([basic(64, 3, 1)?, basic(128, 4, 2)?, basic(256, 6, 1)?]),
        TutorDepth::L43 => layers.extend([
            bottleneck(64, 64, 256, 3, 1)?,
            bottleneck(128, 128, 512, 4, 2)?,
            bottleneck(256, 256, 1024, 6, 1)?,
        ]),
        // The configuration table lists a 64-channel middle convolution in
        // this stage of the deepest variant; it is reproduced as written.
        TutorDepth::L94 => layers.extend([
            bottleneck(64, 64, 256, 3, 1)?,
            bottleneck(128, 64, 512, 4, 2)?,
            bottleneck(256, 256, 1024, 23, 1)?,
        ]),
    }
    match depth {
        TutorDepth::L15 | TutorDepth::L29 => layers.push(conv(1, 1, 1)),
        TutorDepth::L43 | TutorDepth::L94 => layers.extend([conv(c(128)?, 1, 1), Layer::Relu, conv(1, 1, 1)]),
    }
    layers.push(Layer::Final(FinalActivation::Weight { floor: 0.5 }));
    let spec = NetworkSpec { name: format!("tutornet-{}", depth.layers()), in_channels: 3, width, layers };
    spec.check_downsampling()?;
    Ok(spec)
}

/// Builds one of the desk-scale main networks. All end in a ReLU so the
/// predicted density is non-negative, at `1/8` input resolution.
pub fn main_net_spec(kind: MainKind, width: Width) -> Result<NetworkSpec> {
    let c = |n: usize| width.channels(n);
    let layers = match kind {
        MainKind::McnnTiny => {
            let column = |kernels: [usize; 4], chans: [usize; 4]| -> Result<Vec<Layer>> {
                Ok(vec![
                    conv(c(chans[0])?, kernels[0], 1),
                    Layer::Relu,
                    pool2(),
                    conv(c(chans[1])?, kernels[1], 1),
                    Layer::Relu,
                    pool2(),
                    conv(c(chans[2])?, kernels[2], 1),
                    Layer::Relu,
                    pool2(),
                    conv(c(chans[3])?, kernels[3], 1),
                    Layer::Relu,
                ])
            };
            vec![
                Layer::Concat(vec![
                    column([9, 7, 7, 7], [16, 32, 16, 8])?,
                    column([7, 5, 5, 5], [24, 48, 24, 16])?,
                    column([5, 3, 3, 3], [32, 64, 32, 16])?,
                ]),
                conv(1, 1, 1),
                Layer::Final(FinalActivation::Relu),
            ]
        }
        MainKind::VggishTiny => vec![
            conv(c(64)?, 3, 1),
            Layer::Relu,
            conv(c(64)?, 3, 1),
            Layer::Relu,
            pool2(),
            conv(c(128)?, 3, 1),
            Layer::Relu,
            conv(c(128)?, 3, 1),
            Layer::Relu,
            pool2(),
            conv(c(256)?, 3, 1),
            Layer::Relu,
            conv(c(256)?, 3, 1),
            Layer::Relu,
            pool2(),
            conv(c(256)?, 3, 1),
            Layer::Relu,
            conv(c(128)?, 3, 1),
            Layer::Relu,
            conv(c(64)?, 3, 1),
            Layer::Relu,
            conv(1, 1, 1),
            Layer::Final(FinalActivation::Relu),
        ],
        // The skip spans the quarter-resolution level so any input divisible
        // by 8 keeps even sizes inside the bottleneck branch.
        MainKind::UnetTiny => vec![
            conv(c(32)?, 3, 1),
            Layer::Relu,
            pool2(),
            conv(c(64)?, 3, 1),
            Layer::Relu,
            pool2(),
            Layer::Concat(vec![
                vec![],
                vec![
                    pool2(),
                    conv(c(128)?, 3, 1),
                    Layer::Relu,
                    conv(c(256)?, 3, 1),
                    Layer::Relu,
                    Layer::Upsample { factor: 2 },
                    conv(c(64)?, 3, 1),
                    Layer::Relu,
                ],
            ]),
            conv(c(128)?, 3, 1),
            Layer::Relu,
            pool2(),
            conv(c(128)?, 3, 1),
            Layer::Relu,
            conv(1, 1, 1),
            Layer::Final(FinalActivation::Relu),
        ],
        MainKind::DenseTiny => {
            let dense_layer = |growth: usize| -> Result<Layer> {
                Ok(Layer::Concat(vec![vec![], vec![conv(c(growth)?, 3, 1), Layer::Relu]]))
            };
            let mut layers = vec![conv(c(64)?, 3, 2), Layer::Relu, pool2()];
            for _ in 0..4 {
                layers.push(dense_layer(32)?);
            }
            layers.extend([conv(c(64)?, 1, 1), Layer::Relu, pool2()]);
            for _ in 0..4 {
                layers.push(dense_layer(32)?);
            }
            layers.extend([conv(c(64)?, 1, 1), Layer::Relu, conv(1, 1, 1), Layer::Final(FinalActivation::Relu)]);
            layers
        }
    };
    let spec = NetworkSpec { name: kind.name().to_string(), in_channels: 3, width, layers };
    spec.check_downsampling()?;
    Ok(spec)
}

/// Where a parameter tensor sits and how it is initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Zero-mean normal with standard deviation `gain / sqrt(fan_in)`.
    Normal {
        gain: f64,
        fan_in: usize,
    },
    Constant(f64),
}

/// Per-walk bookkeeping shared by shape enumeration.
struct Enumerator {
    out: Vec<ParamInfo>,
    residual_gain: f64,
}

impl Enumerator {
    fn conv(&mut self, path: &str, in_c: usize, out_c: usize, k: usize, gain: f64) {
        self.out.push(ParamInfo {
            name: format!("{path}.weight"),
            shape: vec![out_c, in_c, k, k],
            init: ParamInit::Normal { gain, fan_in: in_c * k * k },
        });
        self.out.push(ParamInfo { name: format!("{path}.bias"), shape: vec![out_c], init: ParamInit::Constant(0.0) });
    }

    fn walk(&mut self, layers: &[Layer], mut in_c: usize, prefix: &str) -> usize {
        let relu_gain = 2f64.sqrt();
        for (i, layer) in layers.iter().enumerate() {
            let path = format!("{prefix}{i}");
            match layer {
                Layer::Conv { out_channels, kernel, .. } => {
                    let gain = if matches!(layers.get(i + 1), Some(Layer::Relu)) { relu_gain } else { 1.0 };
                    self.conv(&path, in_c, *out_channels, *kernel, gain);
                    in_c = *out_channels;
                }
                Layer::ResidualBasic { channels, repeats, stride } => {
                    for r in 0..*repeats {
                        let s = if r == 0 { *stride } else { 1 };
                        self.conv(&format!("{path}.{r}.a"), in_c, *channels, 3, relu_gain);
                        self.conv(&format!("{path}.{r}.b"), *channels, *channels, 3, self.residual_gain);
                        if in_c != *channels || s != 1 {
                            self.conv(&format!("{path}.{r}.proj"), in_c, *channels, 1, 1.0);
                        }
                        in_c = *channels;
                    }
                }
                Layer::ResidualBottleneck { reduce, mid, out, repeats, stride } => {
                    for r in 0..*repeats {
                        let s = if r == 0 { *stride } else { 1 };
                        self.conv(&format!("{path}.{r}.a"), in_c, *reduce, 1, relu_gain);
                        self.conv(&format!("{path}.{r}.b"), *reduce, *mid, 3, relu_gain);
                        self.conv(&format!("{path}.{r}.c"), *mid, *out, 1, self.residual_gain);
                        if in_c != *out || s != 1 {
                            self.conv(&format!("{path}.{r}.proj"), in_c, *out, 1, 1.0);
                        }
                        in_c = *out;
                    }
                }
                Layer::Concat(branches) => {
                    let mut total = 0;
                    for (b, branch) in branches.iter().enumerate() {
                        total += self.walk(branch, in_c, &format!("{path}.{b}."));
                    }
                    in_c = total;
                }
                Layer::MaxPool { .. } | Layer::Relu | Layer::Upsample { .. } | Layer::Final(_) => {}
            }
        }
        in_c
    }
}

fn count_residual_blocks(layers: &[Layer]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            Layer::ResidualBasic { repeats, .. } | Layer::ResidualBottleneck { repeats, .. } => *repeats,
            Layer::Concat(branches) => branches.iter().map(|b| count_residual_blocks(b)).sum(),
            _ => 0,
        })
        .sum()
}

/// Returns `(numerator, denominator)` of the cumulative stride.
fn stride_ratio(layers: &[Layer]) -> Result<(usize, usize)> {
    let (mut down, mut up) = (1usize, 1usize);
    for layer in layers {
        match layer {
            Layer::Conv { stride, .. }
            | Layer::MaxPool { stride, .. }
            | Layer::ResidualBasic { stride, .. }
            | Layer::ResidualBottleneck { stride, .. } => down *= stride,
            Layer::Upsample { factor } => up *= factor,
            Layer::Concat(branches) => {
                let ratios = branches.iter().map(|b| stride_ratio(b)).collect::<Result<Vec<_>>>()?;
                let reduce = |(d, u): (usize, usize)| {
                    let g = gcd(d, u);
                    (d / g, u / g)
                };
                let first = reduce(ratios.first().copied().unwrap_or((1, 1)));
                if ratios.iter().any(|r| reduce(*r) != first) {
                    return Err(Error::invalid("concatenated branches must share a resolution"));
                }
                down *= first.0;
                up *= first.1;
            }
            Layer::Relu | Layer::Final(_) => {}
        }
    }
    Ok((down, up))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl NetworkSpec {
    /// Reconstructs a spec from its name (`tutornet-<depth>` or a main kind).
    pub fn by_name(name: &str, width: Width) -> Result<NetworkSpec> {
        if let Some(depth) = name.strip_prefix("tutornet-") {
            let depth: usize = depth.parse().map_err(|_| Error::invalid(format!("bad TutorNet name `{name}`")))?;
            tutornet_spec(TutorDepth::try_from(depth)?, width)
        } else {
            main_net_spec(name.parse()?, width)
        }
    }

    /// Cumulative stride; errors unless it is a whole number.
    pub fn downsampling(&self) -> Result<usize> {
        let (down, up) = stride_ratio(&self.layers)?;
        if down % up != 0 {
            return Err(Error::invalid(format!("{}: cumulative stride {down}/{up} is not integral", self.name)));
        }
        Ok(down / up)
    }

    fn check_downsampling(&self) -> Result<()> {
        let rate = self.downsampling()?;
        if rate != DOWNSAMPLING {
            return Err(Error::invalid(format!("{}: downsampling {rate}, expected {DOWNSAMPLING}", self.name)));
        }
        Ok(())
    }

    pub fn final_activation(&self) -> Option<FinalActivation> {
        match self.layers.last() {
            Some(Layer::Final(act)) => Some(*act),
            _ => None,
        }
    }

    /// Floor `T` of the weight activation, when the network ends in one.
    pub fn weight_floor(&self) -> Option<f64> {
        match self.final_activation() {
            Some(FinalActivation::Weight { floor }) => Some(floor),
            _ => None,
        }
    }

    pub fn with_weight_floor(mut self, floor: f64) -> NetworkSpec {
        if let Some(Layer::Final(act @ FinalActivation::Weight { .. })) = self.layers.last_mut() {
            *act = FinalActivation::Weight { floor };
        }
        self
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let blocks = count_residual_blocks(&self.layers).max(1);
        let mut e = Enumerator { out: Vec::new(), residual_gain: 1.0 / (blocks as f64).sqrt() };
        e.walk(&self.layers, self.in_channels, "");
        if self.weight_floor().is_some() {
            // Start permissive: sigmoid(1) ≈ 0.73 on an uninformative input.
            if let Some(bias) = e.out.last_mut() {
                bias.init = ParamInit::Constant(1.0);
            }
        } else if self.final_activation() == Some(FinalActivation::Relu) {
            // A random last layer leaves whole output maps at zero behind the
            // ReLU, where they never recover. Start flat and positive instead.
            let n = e.out.len();
            if n >= 2 {
                e.out[n - 2].init = ParamInit::Constant(0.0);
                e.out[n - 1].init = ParamInit::Constant(0.1);
            }
        }
        e.out
    }

    pub fn param_count(&self) -> usize {
        self.param_infos().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn conv_count(&self) -> usize {
        self.param_infos().len() / 2
    }

    /// Channel widths of each top-level branch of the first concat layer.
    pub fn column_kernels(&self) -> Vec<usize> {
        for layer in &self.layers {
            if let Layer::Concat(branches) = layer {
                return branches
                    .iter()
                    .filter_map(|b| match b.first() {
                        Some(Layer::Conv { kernel, .. }) => Some(*kernel),
                        _ => None,
                    })
                    .collect();
            }
        }
        Vec::new()
    }
}

/// Trainable tensors of a network, in walk order.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<NetworkParams> {
        if names.len() != tensors.len() {
            return Err(Error::invalid("parameter names and tensors differ in length"));
        }
        Ok(NetworkParams { names, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with a fresh leaf holding `values[i]`.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<NetworkParams> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        let tensors =
            self.tensors.iter().zip(values).map(|(t, v)| Tensor::param(t.shape(), v)).collect::<Result<_>>()?;
        Ok(NetworkParams { names: self.names.clone(), tensors })
    }

    /// Values of every tensor, flattened in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }

    fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let infos = spec.param_infos();
        if infos.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "{} expects {} parameter tensors, got {}",
                spec.name,
                infos.len(),
                self.tensors.len()
            )));
        }
        for (info, t) in infos.iter().zip(&self.tensors) {
            if info.shape != t.shape() {
                return Err(Error::shape("network params", &info.shape, t.shape()));
            }
        }
        Ok(())
    }
}

/// Deterministic initialisation from `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for info in spec.param_infos() {
        let n: usize = info.shape.iter().product();
        let values: Vec<f64> = match info.init {
            ParamInit::Normal { gain, fan_in } => {
                let std = gain / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            }
            ParamInit::Constant(c) => vec![c; n],
        };
        names.push(info.name);
        tensors.push(Tensor::param(&info.shape, values).expect("shape from spec"));
    }
    NetworkParams { names, tensors }
}

/// Runs the network on an NCHW input whose spatial dims are divisible by the
/// spec's downsampling rate.
pub fn forward(spec: &NetworkSpec, params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = match *x.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::InvalidShape { op: "forward", msg: format!("expected NCHW input, got {:?}", x.shape()) })
        }
    };
    if c != spec.in_channels {
        return Err(Error::InvalidShape {
            op: "forward",
            msg: format!("{} expects {} input channels, got {c}", spec.name, spec.in_channels),
        });
    }
    let rate = spec.downsampling()?;
    if h % rate != 0 || w % rate != 0 {
        return Err(Error::Indivisible { height: h, width: w, rate });
    }
    let mut cursor = params.tensors.iter();
    let out = run(&spec.layers, x.clone(), &mut cursor)?;
    if cursor.next().is_some() {
        return Err(Error::invalid(format!("{}: more parameters than layers use", spec.name)));
    }
    Ok(out)
}

fn take<'a>(cursor: &mut std::slice::Iter<'a, Tensor>) -> Result<(&'a Tensor, &'a Tensor)> {
    match (cursor.next(), cursor.next()) {
        (Some(k), Some(b)) => Ok((k, b)),
        _ => Err(Error::invalid("network has fewer parameters than layers need")),
    }
}

fn conv_with(x: &Tensor, cursor: &mut std::slice::Iter<'_, Tensor>, stride: usize) -> Result<Tensor> {
    let (k, b) = take(cursor)?;
    let kernel = k.shape()[2];
    x.conv2d(k, b, stride, kernel / 2)
}

fn run(layers: &[Layer], mut x: Tensor, cursor: &mut std::slice::Iter<'_, Tensor>) -> Result<Tensor> {
    for layer in layers {
        x = match layer {
            Layer::Conv { stride, padding, .. } => {
                let (k, b) = take(cursor)?;
                x.conv2d(k, b, *stride, *padding)?
            }
            Layer::MaxPool { kernel, stride, padding } => x.max_pool2d_padded(*kernel, *stride, *padding)?,
            Layer::Relu => x.relu(),
            Layer::ResidualBasic { channels, repeats, stride } => {
                for r in 0..*repeats {
                    let s = if r == 0 { *stride } else { 1 };
                    let in_c = x.shape()[1];
                    let branch = conv_with(&x, cursor, s)?.relu();
                    let branch = conv_with(&branch, cursor, 1)?;
                    let shortcut = if in_c != *channels || s != 1 { conv_with(&x, cursor, s)? } else { x.clone() };
                    x = branch.add(&shortcut)?.relu();
                }
                x
            }
            Layer::ResidualBottleneck { out, repeats, stride, .. } => {
                for r in 0..*repeats {
                    let s = if r == 0 { *stride } else { 1 };
                    let in_c = x.shape()[1];
                    let branch = conv_with(&x, cursor, s)?.relu();
                    let branch = conv_with(&branch, cursor, 1)?.relu();
                    let branch = conv_with(&branch, cursor, 1)?;
                    let shortcut = if in_c != *out || s != 1 { conv_with(&x, cursor, s)? } else { x.clone() };
                    x = branch.add(&shortcut)?.relu();
                }
                x
            }
            Layer::Concat(branches) => {
                let outs = branches.iter().map(|b| run(b, x.clone(), cursor)).collect::<Result<Vec<_>>>()?;
                Tensor::concat_channels(&outs)?
            }
            Layer::Upsample { factor } => x.upsample_nearest(*factor)?,
            Layer::Final(FinalActivation::Relu) => x.relu(),
            Layer::Final(FinalActivation::Identity) => x,
            Layer::Final(FinalActivation::Weight { floor }) => weight_activation(&x, *floor).grid().clone(),
        };
    }
    Ok(x)
}

/// A network restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub scale_factor: f64,
    pub params: NetworkParams,
}

/// `TGCKPT1`, then little-endian: `u32` name length + UTF-8 name, `u32` width
/// numerator and denominator, `u64` seed, `f64` scale factor, `u32` tensor
/// count, and per tensor `u32` rank, `u32` dims, `f64` values.
pub fn write_checkpoint(
    out: &mut impl Write,
    spec: &NetworkSpec,
    seed: u64,
    scale_factor: f64,
    params: &NetworkParams,
) -> Result<()> {
    params.check_against(spec)?;
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&(spec.name.len() as u32).to_le_bytes())?;
    out.write_all(spec.name.as_bytes())?;
    out.write_all(&spec.width.num.to_le_bytes())?;
    out.write_all(&spec.width.den.to_le_bytes())?;
    out.write_all(&seed.to_le_bytes())?;
    out.write_all(&scale_factor.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint> {
    let fmt = |msg: String| Error::Format { what: "checkpoint", msg };
    let mut read = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        input.read_exact(&mut buf).map_err(|_| fmt(format!("truncated while reading {what}")))?;
        Ok(buf)
    };
    if read(7, "magic")? != CKPT_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    let name_len = u32_at(read(4, "name length")?) as usize;
    if name_len > 256 {
        return Err(fmt(format!("implausible name length {name_len}")));
    }
    let name = String::from_utf8(read(name_len, "name")?).map_err(|_| fmt("name is not UTF-8".into()))?;
    let num = u32_at(read(4, "width")?);
    let den = u32_at(read(4, "width")?);
    let seed = u64::from_le_bytes(read(8, "seed")?.try_into().unwrap());
    let scale_factor = f64::from_le_bytes(read(8, "scale factor")?.try_into().unwrap());
    let spec = NetworkSpec::by_name(&name, Width::new(num, den)?)?;
    let infos = spec.param_infos();
    let count = u32_at(read(4, "tensor count")?) as usize;
    if count != infos.len() {
        return Err(fmt(format!("{name} expects {} tensors, file has {count}", infos.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for info in infos {
        let rank = u32_at(read(4, "rank")?) as usize;
        if rank != info.shape.len() {
            return Err(fmt(format!("{}: rank {rank}, expected {}", info.name, info.shape.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(read(4, "dims")?) as usize);
        }
        if shape != info.shape {
            return Err(fmt(format!("{}: shape {shape:?}, expected {:?}", info.name, info.shape)));
        }
        let n: usize = shape.iter().product();
        let bytes = read(n * 8, &info.name)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::param(&shape, values)?);
        names.push(info.name);
    }
    Ok(Checkpoint { spec, seed, scale_factor, params: NetworkParams { names, tensors } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..3 * h * w).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        Tensor::new(&[1, 3, h, w], v).unwrap()
    }

    #[test]
    fn width_parsing_and_scaling() {
        assert_eq!("1/8".parse::<Width>().unwrap(), Width::DESK);
        assert_eq!("1".parse::<Width>().unwrap(), Width::FULL);
        assert!("0/8".parse::<Width>().is_err());
        assert!("x".parse::<Width>().is_err());
        assert_eq!(Width::DESK.channels(64).unwrap(), 8);
        assert!(Width::new(1, 3).unwrap().channels(64).is_err());
        assert_eq!(Width::DESK.to_string(), "1/8");
    }

    #[test]
    fn tutornet_channel_scaling() {
        let spec = tutornet_spec(TutorDepth::L15, Width::DESK).unwrap();
        let stages: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::ResidualBasic { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect();
        assert_eq!(stages, vec![8, 16, 32]);
        assert!(TutorDepth::try_from(50).is_err());
    }

    #[test]
    fn tutornet_43_full_width_on_64() {
        let spec = tutornet_spec(TutorDepth::L43, Width::FULL).unwrap();
        let params = init_params(&spec, 1);
        let y = forward(&spec, &params, &input(64, 64, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert!(y.values().iter().all(|v| (0.5..1.0).contains(v)));
    }

    #[test]
    fn every_tutornet_maps_32_to_4_inside_weight_range() {
        for depth in TutorDepth::ALL {
            let spec = tutornet_spec(depth, Width::DESK).unwrap();
            let y = forward(&spec, &init_params(&spec, 3), &input(32, 32, 4)).unwrap();
            assert_eq!(y.shape(), &[1, 1, 4, 4], "{depth:?}");
            assert!(y.values().iter().all(|v| (0.5..1.0).contains(v)), "{depth:?}");
        }
    }

    #[test]
    fn tutornet_starts_at_sigmoid_one_on_zero_input() {
        let spec = tutornet_spec(TutorDepth::L29, Width::DESK).unwrap();
        let y = forward(&spec, &init_params(&spec, 9), &Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(y.values().iter().all(|v| (v - s1).abs() < 1e-15));
    }

    #[test]
    fn parameter_count_grows_with_depth() {
        let counts: Vec<usize> = [TutorDepth::L15, TutorDepth::L29, TutorDepth::L43]
            .into_iter()
            .map(|d| tutornet_spec(d, Width::FULL).unwrap().param_count())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn conv_counts_per_depth() {
        let convs = |d| tutornet_spec(d, Width::FULL).unwrap().conv_count();
        // stem + block convs + projections + head
        assert_eq!(convs(TutorDepth::L15), 1 + 12 + 2 + 1);
        assert_eq!(convs(TutorDepth::L29), 1 + 26 + 2 + 1);
        assert_eq!(convs(TutorDepth::L43), 1 + 39 + 3 + 2);
        assert_eq!(convs(TutorDepth::L94), 1 + 90 + 3 + 2);
    }

    #[test]
    fn main_nets_output_eighth_resolution_non_negative() {
        for kind in MainKind::ALL {
            let spec = main_net_spec(kind, Width::DESK).unwrap();
            assert_eq!(spec.downsampling().unwrap(), 8);
            let y = forward(&spec, &init_params(&spec, 5), &input(64, 48, 6)).unwrap();
            assert_eq!(y.shape(), &[1, 1, 8, 6], "{kind:?}");
            assert!(y.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn mcnn_has_three_distinct_columns() {
        let spec = main_net_spec(MainKind::McnnTiny, Width::DESK).unwrap();
        let mut kernels = spec.column_kernels();
        assert!(kernels.len() >= 3);
        kernels.sort_unstable();
        kernels.dedup();
        assert_eq!(kernels, vec![5, 7, 9]);
    }

    #[test]
    fn zero_image_gives_bias_determined_constant() {
        let spec = main_net_spec(MainKind::DenseTiny, Width::DESK).unwrap();
        let y = forward(&spec, &init_params(&spec, 0), &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.1));
    }

    #[test]
    fn relu_heads_start_alive() {
        for kind in MainKind::ALL {
            let spec = main_net_spec(kind, Width::DESK).unwrap();
            let y = forward(&spec, &init_params(&spec, 4), &input(32, 32, 1)).unwrap();
            assert!(y.values().iter().all(|v| *v > 0.0), "{kind:?}");
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = main_net_spec(MainKind::VggishTiny, Width::DESK).unwrap();
        let a = init_params(&spec, 11).flat_values();
        let b = init_params(&spec, 11).flat_values();
        let c = init_params(&spec, 12).flat_values();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_is_pure_and_checks_divisibility() {
        let spec = main_net_spec(MainKind::UnetTiny, Width::DESK).unwrap();
        let params = init_params(&spec, 2);
        let x = input(32, 32, 1);
        let a = forward(&spec, &params, &x).unwrap();
        let b = forward(&spec, &params, &x).unwrap();
        assert_eq!(a.values(), b.values());
        let err = forward(&spec, &params, &input(36, 32, 1)).unwrap_err();
        assert!(matches!(err, Error::Indivisible { rate: 8, .. }), "{err}");
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = tutornet_spec(TutorDepth::L15, Width::DESK).unwrap();
        let params = init_params(&spec, 42);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, 42, 1000.0, &params).unwrap();
        assert_eq!(&buf[..7], b"TGCKPT1");
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.spec, spec);
        assert_eq!(ck.seed, 42);
        assert_eq!(ck.scale_factor, 1000.0);
        assert_eq!(ck.params.flat_values(), params.flat_values());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }
}

//! Layer descriptions, network topology and the flat parameter vector.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pathway {
    NormalRes,
    LowRes,
}

/// What a layer computes. Convolutions use stride 1 and zero "same" padding with odd kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize },
    Conv3d { in_ch: usize, out_ch: usize, kernel: usize },
    Relu,
    Sigmoid,
    DownsampleAvg { factor: usize },
    UpsampleNearest { factor: usize },
    Concat,
}

impl LayerKind {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, outputs } => outputs * inputs + outputs,
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerKind::Conv3d {
                in_ch,
                out_ch,
                kernel,
            } => out_ch * in_ch * kernel * kernel * kernel + out_ch,
            _ => 0,
        }
    }

    /// Checkpoint code of the kind.
    pub fn code(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv2d { .. } => 1,
            LayerKind::Conv3d { .. } => 2,
            LayerKind::Relu => 3,
            LayerKind::Sigmoid => 4,
            LayerKind::DownsampleAvg { .. } => 5,
            LayerKind::UpsampleNearest { .. } => 6,
            LayerKind::Concat => 7,
        }
    }

    pub fn dims(&self) -> Vec<u32> {
        let d = |v: usize| v as u32;
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![d(inputs), d(outputs)],
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
            }
            | LayerKind::Conv3d {
                in_ch,
                out_ch,
                kernel,
            } => vec![d(in_ch), d(out_ch), d(kernel)],
            LayerKind::DownsampleAvg { factor } | LayerKind::UpsampleNearest { factor } => {
                vec![d(factor)]
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Concat => vec![],
        }
    }

    /// Number of `u32` dims stored for a kind code.
    pub fn dim_count(code: u8) -> Option<usize> {
        match code {
            0 => Some(2),
            1 | 2 => Some(3),
            3 | 4 | 7 => Some(0),
            5 | 6 => Some(1),
            _ => None,
        }
    }

    pub fn from_code(code: u8, dims: &[u32]) -> Result<Self> {
        let u = |i: usize| dims[i] as usize;
        let expected = Self::dim_count(code)
            .ok_or_else(|| Error::Topology(format!("unknown layer code {code}")))?;
        check_len(expected, dims.len())?;
        Ok(match code {
            0 => LayerKind::Dense {
                inputs: u(0),
                outputs: u(1),
            },
            1 => LayerKind::Conv2d {
                in_ch: u(0),
                out_ch: u(1),
                kernel: u(2),
            },
            2 => LayerKind::Conv3d {
                in_ch: u(0),
                out_ch: u(1),
                kernel: u(2),
            },
            3 => LayerKind::Relu,
            4 => LayerKind::Sigmoid,
            5 => LayerKind::DownsampleAvg { factor: u(0) },
            6 => LayerKind::UpsampleNearest { factor: u(0) },
            _ => LayerKind::Concat,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub pathway: Pathway,
}

impl LayerSpec {
    pub fn normal(kind: LayerKind) -> Self {
        Self {
            kind,
            pathway: Pathway::NormalRes,
        }
    }

    pub fn low(kind: LayerKind) -> Self {
        Self {
            kind,
            pathway: Pathway::LowRes,
        }
    }
}

/// Execution order derived from a layer list.
///
/// Without a concat layer the list is one chain. With one, the layers before it split by pathway
/// into two chains that both read the network input; their outputs are concatenated
/// (normal-res channels first) and fed through the remaining layers.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub normal: Vec<usize>,
    pub low: Vec<usize>,
    pub fused: Vec<usize>,
    pub offsets: Vec<usize>,
    pub param_count: usize,
}

impl Plan {
    pub fn build(layers: &[LayerSpec]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Topology("empty layer list".into()));
        }
        let sigmoids = layers
            .iter()
            .filter(|l| l.kind == LayerKind::Sigmoid)
            .count();
        if sigmoids != 1 || layers.last().map(|l| l.kind) != Some(LayerKind::Sigmoid) {
            return Err(Error::Topology(
                "exactly one sigmoid, as the terminal layer".into(),
            ));
        }
        for l in layers {
            let bad = match l.kind {
                LayerKind::Dense { inputs, outputs } => inputs == 0 || outputs == 0,
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                }
                | LayerKind::Conv3d {
                    in_ch,
                    out_ch,
                    kernel,
                } => in_ch == 0 || out_ch == 0 || kernel % 2 == 0,
                LayerKind::DownsampleAvg { factor } | LayerKind::UpsampleNearest { factor } => {
                    factor == 0
                }
                _ => false,
            };
            if bad {
                return Err(Error::Topology(format!("invalid layer {l:?}")));
            }
        }
        let concats: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Concat)
            .map(|(i, _)| i)
            .collect();
        let (normal, low, fused) = match concats.as_slice() {
            [] => {
                if layers.iter().any(|l| l.pathway == Pathway::LowRes) {
                    return Err(Error::Topology("low-res layers need a concat".into()));
                }
                ((0..layers.len()).collect(), vec![], vec![])
            }
            &[ci] => {
                let normal: Vec<usize> = (0..ci)
                    .filter(|&i| layers[i].pathway == Pathway::NormalRes)
                    .collect();
                let low: Vec<usize> = (0..ci)
                    .filter(|&i| layers[i].pathway == Pathway::LowRes)
                    .collect();
                if normal.is_empty() || low.is_empty() {
                    return Err(Error::Topology("concat needs both pathways".into()));
                }
                if layers[ci + 1..]
                    .iter()
                    .any(|l| l.pathway == Pathway::LowRes)
                {
                    return Err(Error::Topology("low-res layer after concat".into()));
                }
                (normal, low, (ci + 1..layers.len()).collect())
            }
            _ => return Err(Error::Topology("more than one concat".into())),
        };
        let mut offsets = Vec::with_capacity(layers.len());
        let mut acc = 0;
        for l in layers {
            offsets.push(acc);
            acc += l.kind.param_count();
        }
        Ok(Self {
            normal,
            low,
            fused,
            offsets,
            param_count: acc,
        })
    }
}

/// Flat parameters plus the layer list they belong to. This is what travels between centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    layers: Vec<LayerSpec>,
    theta: Vec<T>,
    version: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(layers: Vec<LayerSpec>, theta: Vec<T>) -> Result<Self> {
        let plan = Plan::build(&layers)?;
        check_len(plan.param_count, theta.len())?;
        Ok(Self {
            layers,
            theta,
            version: 0,
        })
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let n = Plan::build(&layers)?.param_count;
        Self::new(layers, vec![T::zero(); n])
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut theta = Vec::new();
        for l in &layers {
            let (fan_in, weights, biases) = match l.kind {
                LayerKind::Dense { inputs, outputs } => (inputs, inputs * outputs, outputs),
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    let f = in_ch * kernel * kernel;
                    (f, f * out_ch, out_ch)
                }
                LayerKind::Conv3d {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    let f = in_ch * kernel * kernel * kernel;
                    (f, f * out_ch, out_ch)
                }
                _ => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            theta.extend((0..weights).map(|_| T::lit(rng.gen_range(-limit..limit))));
            theta.extend((0..biases).map(|_| T::zero()));
        }
        Self::new(layers, theta)
    }

    /// Sets the bias of the last parametric layer to `logit(prior)`, so an untrained network
    /// starts out predicting background almost everywhere.
    pub fn set_output_prior(&mut self, prior: f64) -> Result<()> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::Config(format!("output prior must lie in (0, 1), got {prior}")));
        }
        let offsets = self.plan().offsets;
        let Some(i) = self.layers.iter().rposition(|l| l.kind.param_count() > 0) else {
            return Err(Error::Topology("network has no parameters".into()));
        };
        let out = match self.layers[i].kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d { out_ch, .. } | LayerKind::Conv3d { out_ch, .. } => out_ch,
            _ => unreachable!("parametric layers are dense or conv"),
        };
        let end = offsets[i] + self.layers[i].kind.param_count();
        let logit = T::lit((prior / (1.0 - prior)).ln());
        for b in &mut self.theta[end - out..end] {
            *b = logit;
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            layers: self.layers.clone(),
            theta: self
                .theta
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            version: self.version,
        }
    }

    pub(crate) fn plan(&self) -> Plan {
        Plan::build(&self.layers).expect("validated at construction")
    }
}

/// Shape of the default segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// 2 or 3 spatial dimensions.
    pub ndim: usize,
    pub kernel: usize,
    pub normal_channels: Vec<usize>,
    /// Downsampling factor of the low-res pathway; 0 disables it.
    pub low_factor: usize,
    pub low_channels: Vec<usize>,
    /// Hidden channels of the fused layers; a 1x1 head to one channel always follows.
    pub fused_channels: Vec<usize>,
    /// Foreground probability the freshly initialized network predicts.
    pub output_prior: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            ndim: 2,
            kernel: 3,
            normal_channels: vec![8, 8, 16, 16],
            low_factor: 3,
            low_channels: vec![8, 8, 16, 16],
            fused_channels: vec![16],
            output_prior: 0.01,
        }
    }
}

impl ArchConfig {
    fn conv(&self, in_ch: usize, out_ch: usize, kernel: usize) -> Result<LayerKind> {
        match self.ndim {
            2 => Ok(LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
            }),
            3 => Ok(LayerKind::Conv3d {
                in_ch,
                out_ch,
                kernel,
            }),
            n => Err(Error::Config(format!("ndim must be 2 or 3, got {n}"))),
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.normal_channels.is_empty() {
            return Err(Error::Config("normal pathway needs a layer".into()));
        }
        let mut out = Vec::new();
        let mut c = 1;
        for &ch in &self.normal_channels {
            out.push(LayerSpec::normal(self.conv(c, ch, self.kernel)?));
            out.push(LayerSpec::normal(LayerKind::Relu));
            c = ch;
        }
        let mut fused_in = c;
        if self.low_factor > 0 {
            if self.low_channels.is_empty() {
                return Err(Error::Config("low-res pathway needs a layer".into()));
            }
            out.push(LayerSpec::low(LayerKind::DownsampleAvg {
                factor: self.low_factor,
            }));
            let mut lc = 1;
            for &ch in &self.low_channels {
                out.push(LayerSpec::low(self.conv(lc, ch, self.kernel)?));
                out.push(LayerSpec::low(LayerKind::Relu));
                lc = ch;
            }
            out.push(LayerSpec::low(LayerKind::UpsampleNearest {
                factor: self.low_factor,
            }));
            out.push(LayerSpec::normal(LayerKind::Concat));
            fused_in += lc;
        }
        let mut c = fused_in;
        for &ch in &self.fused_channels {
            out.push(LayerSpec::normal(self.conv(c, ch, self.kernel)?));
            out.push(LayerSpec::normal(LayerKind::Relu));
            c = ch;
        }
        out.push(LayerSpec::normal(self.conv(c, 1, 1)?));
        out.push(LayerSpec::normal(LayerKind::Sigmoid));
        Ok(out)
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.low_factor.max(1)
    }
}

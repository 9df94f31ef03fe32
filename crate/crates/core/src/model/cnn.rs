use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::vision::conv::ConvGeometry;

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Shape of the base feature extractor: a chain of 3×3 conv + ReLU stages
/// followed by global average pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseCnnConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl BaseCnnConfig {
    pub fn new(in_channels: usize, channels: &[usize], strides: &[usize]) -> Result<Self> {
        if channels.is_empty() || channels.len() != strides.len() {
            return Err(Error::Config(format!(
                "need one stride per stage, got {} channel counts and {} strides",
                channels.len(),
                strides.len()
            )));
        }
        if in_channels == 0 || channels.iter().chain(strides).any(|&v| v == 0) {
            return Err(Error::Config("channel counts and strides must be positive".into()));
        }
        Ok(Self {
            in_channels,
            stages: channels
                .iter()
                .zip(strides)
                .map(|(&channels, &stride)| StageSpec { channels, stride })
                .collect(),
        })
    }

    /// Four stride-2 stages, 16→32→64→128 channels.
    pub fn standard(in_channels: usize) -> Self {
        Self::new(in_channels, &[16, 32, 64, 128], &[2, 2, 2, 2]).expect("valid literal config")
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Smallest admissible input side: the product of the stage strides.
    pub fn min_input(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.stride).collect()
    }

    /// Multiply-accumulates of one forward pass over a single `h×w` image.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (mut c, mut h, mut w) = (self.in_channels, h, w);
        let mut total = 0;
        for s in &self.stages {
            let g = ConvGeometry::new(&[1, c, h, w], &[s.channels, c, KERNEL, KERNEL], s.stride, PADDING)?;
            total += g.macs();
            (c, h, w) = (s.channels, g.out_h, g.out_w);
        }
        Ok(total)
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let min = self.min_input();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] < min || shape[3] < min {
            return Err(Error::dims(
                "cnn_features",
                shape,
                &[shape.first().copied().unwrap_or(1), self.in_channels, min, min],
            ));
        }
        Ok(())
    }
}

/// Parameters of the base CNN `C_NN`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseCnn {
    pub config: BaseCnnConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BaseCnn {
    /// He-normal weights (std √(2/fan_in)), zero biases.
    pub fn init<R: Rng + ?Sized>(config: BaseCnnConfig, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = config.in_channels;
        for s in &config.stages {
            let fan_in = (c_in * KERNEL * KERNEL) as f64;
            weights.push(Tensor::randn(
                &[s.channels, c_in, KERNEL, KERNEL],
                (2.0 / fan_in).sqrt(),
                rng,
            ));
            biases.push(Tensor::zeros(&[s.channels]));
            c_in = s.channels;
        }
        Self {
            config,
            weights,
            biases,
        }
    }

    pub fn stage_names(i: usize) -> (String, String) {
        (format!("cnn.stage{i}.weight"), format!("cnn.stage{i}.bias"))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wn, bn) = Self::stage_names(i);
            out.push((wn, w));
            out.push((bn, b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> CnnVars {
        CnnVars {
            config: self.config.clone(),
            stages: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| (g.param(w.clone()), g.param(b.clone())))
                .collect(),
        }
    }
}

/// A [`BaseCnn`] bound onto a graph.
#[derive(Clone, Debug)]
pub struct CnnVars {
    config: BaseCnnConfig,
    stages: Vec<(Var, Var)>,
}

impl CnnVars {
    pub fn params(&self) -> Vec<Var> {
        self.stages.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// `C_NN(x)`: `B×C×H×W → B×D`. The last stage ends in ReLU, so the
    /// pooled features are elementwise non-negative.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.config.check_input(g.value(x).shape())?;
        let mut h = x;
        for (&(w, b), spec) in self.stages.iter().zip(&self.config.stages) {
            let pre = g.conv2d(h, w, b, spec.stride, PADDING)?;
            h = g.relu(pre);
        }
        g.global_avg_pool(h)
    }
}

/// Fully connected classifier `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> (Var, Var) {
        (g.param(self.weight.clone()), g.param(self.bias.clone()))
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

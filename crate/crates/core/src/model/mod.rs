//! Base CNN and the classifier heads built on it.
//!
//! All heads share one feature extractor `C_NN` ending in global average
//! pooling, so every pyramid level maps to a `D`-vector regardless of its
//! size. Batched tensors are laid out `B×…`; hidden states are rows, so the
//! transition `U·h` appears as `h·Uᵀ`.

mod cnn;

pub use cnn::{BaseCnn, BaseCnnConfig, CnnVars, Linear, StageSpec, KERNEL, PADDING};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Graph, Tensor, Var};
use crate::vision::{bicubic_resize, Image, Pyramid};

/// Raw pixels in [0, 1] are mapped to `(p − PIXEL_MEAN) / PIXEL_STD` on input.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks equally sized images into a normalized `B×C×H×W` network input.
pub fn batch_input(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::dims(
                "batch_input",
                &[c, h, w],
                &[img.channels(), img.height(), img.width()],
            ));
        }
        data.extend(img.pixels().iter().map(|p| (p - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// One batched input tensor per pyramid level.
pub fn pyramid_batch(pyramids: &[&Pyramid]) -> Result<Vec<Tensor>> {
    let first = pyramids.first().ok_or_else(|| Error::contract("empty pyramid batch"))?;
    if pyramids.iter().any(|p| p.scales() != first.scales()) {
        return Err(Error::contract("pyramids in one batch must share their scales"));
    }
    (0..first.len())
        .map(|s| {
            let level: Vec<&Image> = pyramids.iter().map(|p| &p.levels()[s]).collect();
            batch_input(&level)
        })
        .collect()
}

/// Which classifier produces the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Single,
    EnsLogit,
    EnsProb,
    SrnnVanilla,
    SrnnHalfGru,
}

impl Head {
    pub const ALL: [Head; 5] = [
        Head::Single,
        Head::EnsLogit,
        Head::EnsProb,
        Head::SrnnVanilla,
        Head::SrnnHalfGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::Single => "single",
            Head::EnsLogit => "ens_logit",
            Head::EnsProb => "ens_prob",
            Head::SrnnVanilla => "srnn_vanilla",
            Head::SrnnHalfGru => "srnn_halfgru",
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Head::EnsLogit | Head::EnsProb)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Mean of per-scale logits.
    LogitMean,
    /// Mean of per-scale softmax probabilities.
    ProbMean,
}

/// Named parameter access shared by every trainable model.
///
/// `named_params` and `params_mut` list tensors in the same order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Output of a differentiable forward pass: logits plus the bound parameter
/// leaves, in `named_params` order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// A model that maps batched pyramid levels to class logits on a graph.
pub trait ScaleClassifier: Parameterized + Sync + Send {
    fn forward(&self, g: &mut Graph, levels: &[Var]) -> Result<Forward>;

    /// Logits without gradient tracking.
    fn infer(&self, levels: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = levels.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &vars)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Base CNN plus classifier: the single-scale model that the ensembles wrap
/// and the recurrent heads are initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleScale {
    pub cnn: BaseCnn,
    pub fc: Linear,
}

impl SingleScale {
    pub fn init<R: Rng + ?Sized>(config: BaseCnnConfig, classes: usize, rng: &mut R) -> Self {
        let d = config.feature_dim();
        let cnn = BaseCnn::init(config, rng);
        Self {
            cnn,
            fc: Linear::init(d, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.cnn.config.feature_dim()
    }

    fn bind(&self, g: &mut Graph) -> (CnnVars, (Var, Var)) {
        (self.cnn.bind(g), self.fc.bind(g))
    }

    fn params_of(cnn: &CnnVars, fc: (Var, Var)) -> Vec<Var> {
        let mut p = cnn.params();
        p.extend([fc.0, fc.1]);
        p
    }

    /// Per-level logits `F(C_NN(x_s))` without gradient tracking.
    pub fn per_scale_logits(&self, levels: &[Tensor]) -> Result<Vec<Tensor>> {
        levels.iter().map(|x| self.infer(std::slice::from_ref(x))).collect()
    }
}

impl Parameterized for SingleScale {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.cnn.named_params();
        out.push(("fc.weight".into(), &self.fc.weight));
        out.push(("fc.bias".into(), &self.fc.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.cnn.params_mut();
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }
}

impl ScaleClassifier for SingleScale {
    fn forward(&self, g: &mut Graph, levels: &[Var]) -> Result<Forward> {
        let [x] = levels else {
            return Err(Error::contract(format!(
                "single-scale model takes exactly one level, got {}",
                levels.len()
            )));
        };
        let (cnn, fc) = self.bind(g);
        let f = cnn.features(g, *x)?;
        let logits = g.linear(f, fc.0, fc.1)?;
        Ok(Forward {
            logits,
            params: Self::params_of(&cnn, fc),
        })
    }
}

/// `C_NN(x)` for a prepared batch, without gradient tracking.
pub fn cnn_features(cnn: &BaseCnn, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let vars = cnn.bind(&mut g);
    let xv = g.constant(x.clone());
    let f = vars.features(&mut g, xv)?;
    Ok(g.value(f).clone())
}

/// Resizes `img` to `size` (untouched when already that size) and classifies it.
pub fn single_scale_forward(model: &SingleScale, img: &Image, size: (usize, usize)) -> Result<Tensor> {
    let resized;
    let input = if img.size() == size {
        img
    } else {
        resized = bicubic_resize(img, size.0, size.1)?;
        &resized
    };
    model.infer(&[batch_input(&[input])?])
}

/// Scale-ensemble prediction over the levels of a batched pyramid.
///
/// `LogitMean` returns averaged logits; `ProbMean` returns averaged
/// probabilities, whose rows sum to one.
pub fn ensemble_forward(model: &SingleScale, levels: &[Tensor], mode: EnsembleMode) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::contract("ensemble over an empty pyramid"));
    }
    let n = levels.len() as f64;
    let mut acc: Option<Tensor> = None;
    for logits in model.per_scale_logits(levels)? {
        let term = match mode {
            EnsembleMode::LogitMean => logits,
            EnsembleMode::ProbMean => softmax(&logits)?,
        };
        match acc.as_mut() {
            Some(a) => a.add_assign(&term)?,
            None => acc = Some(term),
        }
    }
    Ok(acc.expect("non-empty").map(|v| v / n))
}

/// Intermediate values of one recurrent forward pass.
#[derive(Clone, Debug)]
pub struct SrnnTrace {
    pub logits: Var,
    /// `C_NN(x_s)` per level.
    pub features: Vec<Var>,
    /// `h_s` per level.
    pub hidden: Vec<Var>,
    /// `z_s` per level; empty for the vanilla recurrence.
    pub gates: Vec<Var>,
    pub params: Vec<Var>,
}

/// Vanilla scale recurrence: `h_s = ReLU(C_NN(x_s) + U·h_{s−1})`, logits `F(h_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrnnVanilla {
    pub base: SingleScale,
    /// State transition `U: D×D`.
    pub transition: Tensor,
}

impl SrnnVanilla {
    /// Starts from a trained single-scale model with `U = I`.
    pub fn from_pretrained(base: &SingleScale) -> Self {
        Self {
            transition: Tensor::eye(base.feature_dim()),
            base: base.clone(),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph, levels: &[Var]) -> Result<SrnnTrace> {
        if levels.is_empty() {
            return Err(Error::contract("scale recurrence over an empty pyramid"));
        }
        let (cnn, fc) = self.base.bind(g);
        let u = g.param(self.transition.clone());
        let batch = g.value(levels[0]).shape()[0];
        let mut h = g.constant(Tensor::zeros(&[batch, self.base.feature_dim()]));
        let mut features = Vec::with_capacity(levels.len());
        let mut hidden = Vec::with_capacity(levels.len());
        for &x in levels {
            let f = cnn.features(g, x)?;
            let uh = g.matmul_t(h, u)?;
            let pre = g.add(f, uh)?;
            h = g.relu(pre);
            features.push(f);
            hidden.push(h);
        }
        let logits = g.linear(h, fc.0, fc.1)?;
        let mut params = SingleScale::params_of(&cnn, fc);
        params.push(u);
        Ok(SrnnTrace {
            logits,
            features,
            hidden,
            gates: Vec::new(),
            params,
        })
    }
}

impl Parameterized for SrnnVanilla {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.base.named_params();
        out.push(("srnn.U".into(), &self.transition));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.base.params_mut();
        out.push(&mut self.transition);
        out
    }
}

impl ScaleClassifier for SrnnVanilla {
    fn forward(&self, g: &mut Graph, levels: &[Var]) -> Result<Forward> {
        let t = self.forward_traced(g, levels)?;
        Ok(Forward {
            logits: t.logits,
            params: t.params,
        })
    }
}

/// Half-GRU scale recurrence with one update gate:
///
/// ```text
/// h'_s = ReLU(C_NN(x_s) + U·h_{s−1})
/// z_s  = σ(W_z·C_NN(x_s) + U_z·h_{s−1} + b_z)
/// h_s  = (1 − z_s)⊙h_{s−1} + z_s⊙h'_s
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SrnnHalfGru {
    pub base: SingleScale,
    pub transition: Tensor,
    /// `W_z: D×D`, applied to the level features.
    pub gate_input: Tensor,
    /// `U_z: D×D`, applied to the previous state.
    pub gate_state: Tensor,
    pub gate_bias: Tensor,
}

impl SrnnHalfGru {
    /// Starts from a trained single-scale model with `U = I` and all gate
    /// parameters zero, so every gate opens at exactly 0.5.
    pub fn from_pretrained(base: &SingleScale) -> Self {
        let d = base.feature_dim();
        Self {
            transition: Tensor::eye(d),
            gate_input: Tensor::zeros(&[d, d]),
            gate_state: Tensor::zeros(&[d, d]),
            gate_bias: Tensor::zeros(&[d]),
            base: base.clone(),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph, levels: &[Var]) -> Result<SrnnTrace> {
        if levels.is_empty() {
            return Err(Error::contract("scale recurrence over an empty pyramid"));
        }
        let (cnn, fc) = self.base.bind(g);
        let u = g.param(self.transition.clone());
        let wz = g.param(self.gate_input.clone());
        let uz = g.param(self.gate_state.clone());
        let bz = g.param(self.gate_bias.clone());
        let batch = g.value(levels[0]).shape()[0];
        let mut h = g.constant(Tensor::zeros(&[batch, self.base.feature_dim()]));
        let mut features = Vec::with_capacity(levels.len());
        let mut hidden = Vec::with_capacity(levels.len());
        let mut gates = Vec::with_capacity(levels.len());
        for &x in levels {
            let f = cnn.features(g, x)?;
            let uh = g.matmul_t(h, u)?;
            let pre = g.add(f, uh)?;
            let candidate = g.relu(pre);
            let zf = g.matmul_t(f, wz)?;
            let zh = g.matmul_t(h, uz)?;
            let zsum = g.add(zf, zh)?;
            let zpre = g.add_row_bias(zsum, bz)?;
            let z = g.sigmoid(zpre);
            h = g.affine_combine(z, h, candidate)?;
            features.push(f);
            hidden.push(h);
            gates.push(z);
        }
        let logits = g.linear(h, fc.0, fc.1)?;
        let mut params = SingleScale::params_of(&cnn, fc);
        params.extend([u, wz, uz, bz]);
        Ok(SrnnTrace {
            logits,
            features,
            hidden,
            gates,
            params,
        })
    }
}

impl Parameterized for SrnnHalfGru {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.base.named_params();
        out.push(("srnn.U".into(), &self.transition));
        out.push(("gate.Wz".into(), &self.gate_input));
        out.push(("gate.Uz".into(), &self.gate_state));
        out.push(("gate.bias".into(), &self.gate_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.base.params_mut();
        out.push(&mut self.transition);
        out.push(&mut self.gate_input);
        out.push(&mut self.gate_state);
        out.push(&mut self.gate_bias);
        out
    }
}

impl ScaleClassifier for SrnnHalfGru {
    fn forward(&self, g: &mut Graph, levels: &[Var]) -> Result<Forward> {
        let t = self.forward_traced(g, levels)?;
        Ok(Forward {
            logits: t.logits,
            params: t.params,
        })
    }
}

/// Weight decay applies to weights and kernels, never to biases.
pub fn decays(name: &str) -> bool {
    !name.ends_with("bias")
}

/// Any persisted model.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Single(SingleScale),
    Vanilla(SrnnVanilla),
    HalfGru(SrnnHalfGru),
}

impl AnyModel {
    /// The wrapped base CNN and classifier.
    pub fn base(&self) -> &SingleScale {
        match self {
            AnyModel::Single(m) => m,
            AnyModel::Vanilla(m) => &m.base,
            AnyModel::HalfGru(m) => &m.base,
        }
    }

    /// The recurrent head stored in this model, if any.
    pub fn srnn_head(&self) -> Option<Head> {
        match self {
            AnyModel::Single(_) => None,
            AnyModel::Vanilla(_) => Some(Head::SrnnVanilla),
            AnyModel::HalfGru(_) => Some(Head::SrnnHalfGru),
        }
    }

    /// Prediction of `head` over batched pyramid levels. `Single` needs
    /// exactly one level; the recurrent heads need a matching model.
    pub fn predict(&self, head: Head, levels: &[Tensor]) -> Result<Tensor> {
        match (head, self) {
            (Head::Single, _) => self.base().infer(levels),
            (Head::EnsLogit, _) => ensemble_forward(self.base(), levels, EnsembleMode::LogitMean),
            (Head::EnsProb, _) => ensemble_forward(self.base(), levels, EnsembleMode::ProbMean),
            (Head::SrnnVanilla, AnyModel::Vanilla(m)) => m.infer(levels),
            (Head::SrnnHalfGru, AnyModel::HalfGru(m)) => m.infer(levels),
            (head, _) => Err(Error::contract(format!("model has no `{head}` head"))),
        }
    }
}

impl Parameterized for AnyModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            AnyModel::Single(m) => m.named_params(),
            AnyModel::Vanilla(m) => m.named_params(),
            AnyModel::HalfGru(m) => m.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AnyModel::Single(m) => m.params_mut(),
            AnyModel::Vanilla(m) => m.params_mut(),
            AnyModel::HalfGru(m) => m.params_mut(),
        }
    }
}

/// Cumulative multiply-accumulates per image for using the first `k`
/// pyramid levels, k = 1..n: CNN and recurrence for each level, plus one
/// classifier evaluation.
pub fn prefix_macs(config: &BaseCnnConfig, classes: usize, head: Head, scales: &[(usize, usize)]) -> Result<Vec<u64>> {
    let d = config.feature_dim() as u64;
    let per_step = match head {
        Head::SrnnVanilla => d * d,
        Head::SrnnHalfGru => 3 * d * d,
        _ => 0,
    };
    let classifier = d * classes as u64;
    let mut running = 0;
    scales
        .iter()
        .map(|&(h, w)| {
            running += config.macs(h, w)? + per_step;
            Ok(running + classifier)
        })
        .collect()
}

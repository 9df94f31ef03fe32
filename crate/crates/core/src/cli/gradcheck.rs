//! Reverse-mode gradients of both recurrent heads against central finite
//! differences on a micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{batch_input, BaseCnnConfig, Head, ScaleClassifier, SingleScale, SrnnHalfGru, SrnnVanilla};
use crate::numerics::{finite_diff_gradient, transpose, Graph, Tensor, Var};
use crate::vision::{bicubic_resize, Image};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Draws with any ReLU input closer than this to zero are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 200;
const SAMPLES: usize = 3;
const CLASSES: usize = 2;
const SIZES: [(usize, usize); 2] = [(4, 4), (8, 8)];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub head: Head,
    pub param: String,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < GRADCHECK_TOL)
    }
}

fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let diff = analytic.zip_map(numeric, "gradcheck", |a, b| a - b)?.max_abs();
    Ok(diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8))
}

/// 2×2 random images upscaled to each level of the micro pyramid.
fn micro_inputs(rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let images: Vec<Image> = (0..SAMPLES)
        .map(|_| Image::new(Tensor::uniform(&[1, 2, 2], 0.0, 1.0, rng)))
        .collect::<Result<_>>()?;
    let levels = SIZES
        .iter()
        .map(|&(h, w)| {
            let resized = images
                .iter()
                .map(|i| bicubic_resize(i, h, w))
                .collect::<Result<Vec<_>>>()?;
            batch_input(&resized.iter().collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..SAMPLES).map(|_| rng.gen_range(0..CLASSES)).collect();
    Ok((levels, labels))
}

fn micro_base(rng: &mut ChaCha8Rng) -> Result<SingleScale> {
    let mut base = SingleScale::init(BaseCnnConfig::new(1, &[3, 6], &[1, 2])?, CLASSES, rng);
    for b in base.cnn.biases.iter_mut().chain([&mut base.fc.bias]) {
        *b = Tensor::uniform(b.shape(), -0.2, 0.2, rng);
    }
    Ok(base)
}

type Taped = (Graph, f64, Vec<Var>, Var);

/// Mean cross-entropy of the micro batch: tape, value, parameter leaves, loss node.
fn loss_of<M: ScaleClassifier>(model: &M, levels: &[Tensor], labels: &[usize], track: bool) -> Result<Taped> {
    let mut g = if track { Graph::new() } else { Graph::inference() };
    let vars: Vec<_> = levels.iter().map(|t| g.constant(t.clone())).collect();
    let out = model.forward(&mut g, &vars)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).item();
    Ok((g, value, out.params, loss))
}

fn check_model<M: ScaleClassifier + Clone>(
    head: Head,
    model: &M,
    levels: &[Tensor],
    labels: &[usize],
    corrupt: Option<&str>,
) -> Result<Vec<GradcheckEntry>> {
    let (g, _, params, loss) = loss_of(model, levels, labels, true)?;
    let grads = g.backward(loss)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let values: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let mut analytic = grads
            .get(params[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(values[k].shape()));
        if corrupt == Some(name.as_str()) {
            // a backward rule that forgot its transpose
            analytic = if analytic.rank() == 2 && analytic.shape()[0] == analytic.shape()[1] {
                transpose(&analytic)?
            } else {
                analytic.map(|v| 2.0 * v)
            };
        }
        let numeric = finite_diff_gradient(
            |x| {
                let mut m = model.clone();
                *m.params_mut()[k] = x.clone();
                Ok(loss_of(&m, levels, labels, false)?.1)
            },
            &values[k],
            GRADCHECK_EPS,
        )?;
        out.push(GradcheckEntry {
            head,
            param: name.clone(),
            rel_error: relative_error(&analytic, &numeric)?,
        });
    }
    Ok(out)
}

/// Redraws until no ReLU input on the tape lies within the kink margin.
fn draw_clear<M: ScaleClassifier>(
    rng: &mut ChaCha8Rng,
    mut build: impl FnMut(&mut ChaCha8Rng) -> Result<M>,
) -> Result<(M, Vec<Tensor>, Vec<usize>)> {
    for _ in 0..MAX_DRAWS {
        let model = build(rng)?;
        let (levels, labels) = micro_inputs(rng)?;
        let (g, ..) = loss_of(&model, &levels, &labels, true)?;
        if g.min_relu_margin().is_none_or(|m| m >= KINK_MARGIN) {
            return Ok((model, levels, labels));
        }
    }
    Err(Error::contract(format!("no kink-free draw in {MAX_DRAWS} attempts")))
}

/// Checks every parameter tensor of both recurrent heads. `corrupt` names a
/// parameter whose analytic gradient is deliberately damaged, for testing
/// the checker itself.
pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    let (vanilla, levels, labels) = draw_clear(&mut rng, |rng| {
        let mut m = SrnnVanilla::from_pretrained(&micro_base(rng)?);
        m.transition = Tensor::randn(m.transition.shape(), 0.4, rng);
        Ok(m)
    })?;
    entries.extend(check_model(Head::SrnnVanilla, &vanilla, &levels, &labels, corrupt)?);

    let (gru, levels, labels) = draw_clear(&mut rng, |rng| {
        let mut m = SrnnHalfGru::from_pretrained(&micro_base(rng)?);
        let d = m.transition.shape()[0];
        m.transition = Tensor::randn(&[d, d], 0.4, rng);
        m.gate_input = Tensor::randn(&[d, d], 0.4, rng);
        m.gate_state = Tensor::randn(&[d, d], 0.4, rng);
        m.gate_bias = Tensor::randn(&[d], 0.2, rng);
        Ok(m)
    })?;
    entries.extend(check_model(Head::SrnnHalfGru, &gru, &levels, &labels, corrupt)?);
    Ok(GradcheckReport { entries })
}

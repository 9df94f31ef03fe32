//! Synthetic classification task whose label needs two scales.
//!
//! Each image is a large silhouette (coarse factor `g`) filled with a
//! period-2 texture (fine factor `t`); the label is `g·T + t`. All textures
//! are zero-mean over their 2×2 cell, so the half-pixel bicubic reduction
//! at 2× or 4× averages them away and only the silhouette survives, while
//! at full resolution the silhouette is larger than the base CNN's
//! receptive field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vision::{bicubic_resize, Image};

pub const MAX_SHAPES: usize = 4;
pub const MAX_TEXTURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Coarse silhouette count `G`.
    pub shapes: usize,
    /// Fine texture count `T`.
    pub textures: usize,
    /// Side of the square single-channel canvas.
    pub canvas: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Half-width of the uniform additive pixel noise.
    pub noise: f64,
    /// Mean intensity inside the silhouette.
    pub foreground: f64,
    /// Intensity outside the silhouette.
    pub background: f64,
    /// Texture contrast around the foreground mean.
    pub texture_amplitude: f64,
    /// Maximum centre displacement, in pixels.
    pub jitter: usize,
    /// Width in pixels of the linear ramp across the silhouette boundary;
    /// 0 gives hard edges.
    pub edge_width: f64,
    /// Silhouettes are rotated by a uniform angle in ±`max_rotation` degrees.
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: 4,
            textures: 4,
            canvas: 64,
            train_per_class: 200,
            val_per_class: 50,
            noise: 0.5,
            foreground: 0.55,
            background: 0.25,
            texture_amplitude: 0.25,
            jitter: 4,
            edge_width: 6.0,
            max_rotation: 15.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn classes(&self) -> usize {
        self.shapes * self.textures
    }

    /// `(g, t)` factors of a label.
    pub fn factors(&self, label: usize) -> (usize, usize) {
        (label / self.textures, label % self.textures)
    }

    fn validate(&self) -> Result<()> {
        if self.shapes < 2 || self.textures < 2 {
            return Err(Error::Config(format!(
                "scale task needs at least 2 shapes and 2 textures, got {}×{}",
                self.shapes, self.textures
            )));
        }
        if self.shapes > MAX_SHAPES || self.textures > MAX_TEXTURES {
            return Err(Error::Config(format!(
                "scale task has {MAX_SHAPES} shapes and {MAX_TEXTURES} textures available, asked for {}×{}",
                self.shapes, self.textures
            )));
        }
        if self.canvas < 16 {
            return Err(Error::Config(format!("canvas {} is too small", self.canvas)));
        }
        Ok(())
    }

    fn sample_rng(&self, split: Split, label: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let split_tag = match split {
            Split::Train => 1u64,
            Split::Val => 2u64,
        };
        rng.set_stream((split_tag << 48) | ((label as u64) << 24) | index as u64);
        rng
    }

    fn render(&self, g: usize, t: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
        let n = self.canvas;
        let nf = n as f64;
        let radius = nf * rng.gen_range(0.31..0.375);
        let j = self.jitter as f64;
        let cy = (nf - 1.0) / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        let cx = (nf - 1.0) / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        let r = self.max_rotation.to_radians();
        let angle = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let (sin, cos) = angle.sin_cos();
        let (py, px) = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
        let outline = outline(g);
        let mut pixels = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let (ry, rx) = ((cos * dy - sin * dx) / radius, (sin * dy + cos * dx) / radius);
                let dist = radius * outline.signed_distance(ry, rx);
                let alpha = if self.edge_width > 0.0 {
                    (0.5 - dist / self.edge_width).clamp(0.0, 1.0)
                } else if dist <= 0.0 {
                    1.0
                } else {
                    0.0
                };
                let fill = self.foreground + self.texture_amplitude * texture(t, y + py, x + px);
                let mut v = self.background + alpha * (fill - self.background);
                if self.noise > 0.0 {
                    v += rng.gen_range(-self.noise..=self.noise);
                }
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        Image::new(Tensor::new(vec![1, n, n], pixels)?)
    }
}

/// Silhouette boundary in radius-normalized `(y, x)` coordinates.
enum Outline {
    Disk,
    Polygon(Vec<(f64, f64)>),
}

impl Outline {
    /// Distance to the boundary, negative inside.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        match self {
            Outline::Disk => (y * y + x * x).sqrt() - 1.0,
            Outline::Polygon(v) => {
                let mut inside = false;
                let mut best = f64::INFINITY;
                for i in 0..v.len() {
                    let (ay, ax) = v[i];
                    let (by, bx) = v[(i + 1) % v.len()];
                    if (ay > y) != (by > y) && x < ax + (y - ay) / (by - ay) * (bx - ax) {
                        inside = !inside;
                    }
                    let (ey, ex) = (by - ay, bx - ax);
                    let s = (((y - ay) * ey + (x - ax) * ex) / (ey * ey + ex * ex)).clamp(0.0, 1.0);
                    let (qy, qx) = (y - ay - s * ey, x - ax - s * ex);
                    best = best.min((qy * qy + qx * qx).sqrt());
                }
                if inside {
                    -best
                } else {
                    best
                }
            }
        }
    }
}

fn outline(shape: usize) -> Outline {
    match shape {
        0 => Outline::Disk,
        1 => Outline::Polygon(vec![(-0.85, -0.85), (-0.85, 0.85), (0.85, 0.85), (0.85, -0.85)]),
        // apex up, base at y = 0.6
        2 => Outline::Polygon(vec![(-1.0, 0.0), (0.6, 1.0), (0.6, -1.0)]),
        3 => {
            let (a, b) = (0.35, 1.0);
            Outline::Polygon(vec![
                (-b, -a),
                (-b, a),
                (-a, a),
                (-a, b),
                (a, b),
                (a, a),
                (b, a),
                (b, -a),
                (a, -a),
                (a, -b),
                (-a, -b),
                (-a, -a),
            ])
        }
        _ => unreachable!("shape index checked by validate"),
    }
}

/// Zero-mean period-2 patterns.
fn texture(kind: usize, y: usize, x: usize) -> f64 {
    let (oy, ox) = (y.is_multiple_of(2), x.is_multiple_of(2));
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    match kind {
        0 => sign(ox),
        1 => sign(oy),
        2 => sign(oy == ox),
        3 => {
            if oy && ox {
                1.5
            } else {
                -0.5
            }
        }
        _ => unreachable!("texture index checked by validate"),
    }
}

/// Deterministic train and validation splits for `spec`.
pub fn generate_scale_task(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let make = |split: Split, per_class: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * spec.classes());
        for i in 0..per_class {
            for label in 0..spec.classes() {
                let (g, t) = spec.factors(label);
                let mut rng = spec.sample_rng(split, label, i);
                samples.push(Sample {
                    image: spec.render(g, t, &mut rng)?,
                    label,
                });
            }
        }
        Dataset::new(samples, spec.classes(), split)
    };
    Ok((
        make(Split::Train, spec.train_per_class)?,
        make(Split::Val, spec.val_per_class)?,
    ))
}

/// Nearest-centroid accuracies on 4×-reduced images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    /// Accuracy at predicting the silhouette `g`.
    pub coarse: f64,
    /// Accuracy at predicting the texture `t`.
    pub fine: f64,
}

/// Fits per-factor pixel centroids on `train` after a 4× bicubic reduction and
/// scores nearest-centroid prediction of each factor on `val`.
pub fn separability(spec: &SyntheticSpec, train: &Dataset, val: &Dataset) -> Result<Separability> {
    let side = spec.canvas / 4;
    let reduce = |ds: &Dataset| -> Result<Vec<(Vec<f64>, usize)>> {
        ds.samples()
            .iter()
            .map(|s| Ok((bicubic_resize(&s.image, side, side)?.pixels().to_vec(), s.label)))
            .collect()
    };
    let tr = reduce(train)?;
    let va = reduce(val)?;
    let accuracy = |factor: &dyn Fn(usize) -> usize, count: usize| {
        let dim = side * side;
        let mut centroids = vec![vec![0.0; dim]; count];
        let mut counts = vec![0usize; count];
        for (px, label) in &tr {
            let k = factor(*label);
            counts[k] += 1;
            for (c, p) in centroids[k].iter_mut().zip(px) {
                *c += p;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        let correct = va
            .iter()
            .filter(|(px, label)| {
                let dist = |c: &Vec<f64>| c.iter().zip(px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..count)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .expect("at least two centroids");
                best == factor(*label)
            })
            .count();
        correct as f64 / va.len().max(1) as f64
    };
    Ok(Separability {
        coarse: accuracy(&|l| spec.factors(l).0, spec.shapes),
        fine: accuracy(&|l| spec.factors(l).1, spec.textures),
    })
}

/// Self-test: silhouettes must survive the 4× reduction (≥ 80% centroid
/// accuracy) and textures must not (≤ 35%).
pub fn validate_scale_task(spec: &SyntheticSpec, train: &Dataset, val: &Dataset) -> Result<Separability> {
    let s = separability(spec, train, val)?;
    if s.coarse < 0.80 || s.fine > 0.35 {
        return Err(Error::contract(format!(
            "scale task fails separability: coarse {:.3} (need ≥ 0.80), fine {:.3} (need ≤ 0.35)",
            s.coarse, s.fine
        )));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 3,
            val_per_class: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_spec_same_bytes() {
        let a = generate_scale_task(&small()).unwrap();
        let b = generate_scale_task(&small()).unwrap();
        assert_eq!(a, b);
        let other = generate_scale_task(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn noiseless_single_sample_gives_distinct_classes() {
        let spec = SyntheticSpec {
            noise: 0.0,
            train_per_class: 1,
            val_per_class: 1,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_scale_task(&spec).unwrap();
        assert_eq!(train.len(), 16);
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(train.samples()[i].image, train.samples()[j].image);
            }
        }
    }

    #[test]
    fn images_have_canvas_shape_and_unit_range() {
        let (train, val) = generate_scale_task(&small()).unwrap();
        for s in train.samples().iter().chain(val.samples()) {
            assert_eq!(s.image.tensor().shape(), &[1, 64, 64]);
            assert!(s.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(train.missing_classes().is_empty());
    }

    #[test]
    fn labels_encode_factors() {
        let spec = SyntheticSpec {
            shapes: 3,
            textures: 2,
            ..small()
        };
        assert_eq!(spec.classes(), 6);
        assert_eq!(spec.factors(5), (2, 1));
        let (train, _) = generate_scale_task(&spec).unwrap();
        assert!(train.samples().iter().all(|s| s.label < 6));
    }

    #[test]
    fn factor_counts_are_checked() {
        for (g, t) in [(1, 4), (4, 1), (5, 2), (2, 5)] {
            let spec = SyntheticSpec {
                shapes: g,
                textures: t,
                ..small()
            };
            assert!(matches!(generate_scale_task(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn textures_vanish_under_reduction() {
        for t in 0..MAX_TEXTURES {
            let cell: f64 = (0..2).flat_map(|y| (0..2).map(move |x| texture(t, y, x))).sum();
            assert_eq!(cell, 0.0);
        }
    }

    #[test]
    fn default_task_passes_separability_self_test() {
        let spec = SyntheticSpec {
            train_per_class: 40,
            val_per_class: 20,
            ..SyntheticSpec::default()
        };
        let (train, val) = generate_scale_task(&spec).unwrap();
        let s = validate_scale_task(&spec, &train, &val).unwrap();
        assert!(s.coarse >= 0.8 && s.fine <= 0.35, "{s:?}");
    }
}

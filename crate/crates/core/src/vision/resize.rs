use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vision::Image;

/// Keys cubic-convolution parameter; −0.5 gives the Catmull-Rom spline.
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic-convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate, half-pixel centred.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

pub(crate) fn taps(dst: usize, in_len: usize, out_len: usize) -> Taps {
    let src = (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
    let base = src.floor();
    let t = src - base;
    let base = base as isize;
    let last = in_len as isize - 1;
    let mut index = [0usize; 4];
    let mut weight = [0.0; 4];
    for k in 0..4 {
        let offset = k as isize - 1;
        index[k] = (base + offset).clamp(0, last) as usize;
        weight[k] = cubic_kernel(t - offset as f64);
    }
    Taps { index, weight }
}

/// Interpolates one line. Written as an offset from the nearest-left tap so a
/// constant line, or a zero-phase tap set, reproduces its input exactly.
#[inline]
fn interpolate(taps: &Taps, sample: impl Fn(usize) -> f64) -> f64 {
    let anchor = sample(taps.index[1]);
    let mut delta = 0.0;
    for k in 0..4 {
        if k != 1 {
            delta += taps.weight[k] * (sample(taps.index[k]) - anchor);
        }
    }
    anchor + delta
}

/// Separable bicubic resampling of a raw image; output pixels are clamped to [0, 1].
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    resample(img, out_h, out_w, true)
}

pub(crate) fn resample(img: &Image, out_h: usize, out_w: usize, clamp: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic_resize", format!("output size {out_h}×{out_w}")));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let src = img.pixels();
    let col_taps: Vec<Taps> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    let row_taps: Vec<Taps> = (0..out_h).map(|y| taps(y, h, out_h)).collect();

    let mut horizontal = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let line = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let out = &mut horizontal[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (o, t) in out.iter_mut().zip(&col_taps) {
                *o = interpolate(t, |i| line[i]);
            }
        }
    }

    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &horizontal[ch * h * out_w..(ch + 1) * h * out_w];
        for (y, t) in row_taps.iter().enumerate() {
            for x in 0..out_w {
                let mut v = interpolate(t, |i| plane[i * out_w + x]);
                if clamp {
                    v = v.clamp(0.0, 1.0);
                }
                out[(ch * out_h + y) * out_w + x] = v;
            }
        }
    }
    Image::new(Tensor::new(vec![c, out_h, out_w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 2-D evaluation: Σᵢ Σⱼ k(dy−i) k(dx−j) p(i, j) with clamped
    /// indices, no separable pass.
    fn direct_oracle(img: &Image, out_h: usize, out_w: usize) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let mut out = Vec::new();
        for y in 0..out_h {
            let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
            for x in 0..out_w {
                let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
                let mut acc = 0.0;
                let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
                for i in y0 - 1..=y0 + 2 {
                    for j in x0 - 1..=x0 + 2 {
                        let wy = cubic_kernel(sy - i as f64);
                        let wx = cubic_kernel(sx - j as f64);
                        let ci = i.clamp(0, h as isize - 1) as usize;
                        let cj = j.clamp(0, w as isize - 1) as usize;
                        acc += wy * wx * img.pixels()[ci * w + cj];
                    }
                }
                out.push(acc.clamp(0.0, 1.0));
            }
        }
        out
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let t = Tensor::from_fn(&[1, h, w], |i| f(i / w, i % w));
        Image::new(t).unwrap()
    }

    #[test]
    fn kernel_interpolates_integers() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constants_survive_any_resize() {
        let img = gray(7, 5, |_, _| 0.37);
        for (h, w) in [(1, 1), (3, 9), (14, 10), (64, 2)] {
            let r = bicubic_resize(&img, h, w).unwrap();
            assert!(r.pixels().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::new(Tensor::uniform(&[3, 6, 9], 0.0, 1.0, &mut rng)).unwrap();
        let r = bicubic_resize(&img, 6, 9).unwrap();
        for (a, b) in r.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_upscale_matches_direct_oracle() {
        let img = gray(4, 4, |y, x| (y * 4 + x) as f64 / 15.0);
        let r = bicubic_resize(&img, 8, 8).unwrap();
        let oracle = direct_oracle(&img, 8, 8);
        for (a, b) in r.pixels().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn downscale_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng)).unwrap();
        let r = bicubic_resize(&img, 16, 16).unwrap();
        let oracle = direct_oracle(&img, 16, 16);
        for (a, b) in r.pixels().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overshoot_is_clamped() {
        let img = gray(4, 4, |_, x| if x < 2 { 0.0 } else { 1.0 });
        let r = bicubic_resize(&img, 4, 16).unwrap();
        assert!(r.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let raw = resample(&img, 4, 16, false).unwrap();
        assert!(raw.pixels().iter().any(|&v| !(0.0..=1.0).contains(&v)));
    }
}

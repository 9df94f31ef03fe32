use rand::Rng;

use crate::numerics::Tensor;
use crate::vision::Image;

/// Reflection padding on each side before the random crop.
pub const CROP_PAD: usize = 4;

/// Random crop from a reflect-padded copy plus a horizontal flip with
/// probability 0.5. Draws three values from `rng`.
pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(img, dy, dx, flip)
}

/// Deterministic form of [`augment`]: the crop window starts at `(dy, dx)`
/// in padded coordinates, so `(CROP_PAD, CROP_PAD)` is the centred crop.
pub fn augment_with(img: &Image, dy: usize, dx: usize, flip: bool) -> Image {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let src = img.pixels();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - CROP_PAD as isize, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + dx as isize - CROP_PAD as isize, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Image::new(Tensor::new(vec![c, h, w], out).expect("same element count")).expect("rank 3")
}

/// Mirror index without repeating the edge sample, folded as often as needed.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

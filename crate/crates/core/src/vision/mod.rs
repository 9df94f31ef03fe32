//! Image operators: convolution, pooling, bicubic resampling and pyramids.

pub mod conv;
mod resize;

pub use conv::{conv2d, global_avg_pool};
pub use resize::{bicubic_resize, cubic_kernel, CUBIC_A};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A `C×H×W` image. Loaded and generated pixels lie in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        data.expect_rank(3, "image")?;
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &[f64] {
        self.data.data()
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Resized copies of one image, smallest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    /// Wraps pre-built levels, checking the ordering and channel invariants.
    pub fn from_levels(levels: Vec<Image>) -> Result<Self> {
        let sizes: Vec<_> = levels.iter().map(Image::size).collect();
        check_ascending(&sizes)?;
        if let Some(first) = levels.first() {
            if levels.iter().any(|l| l.channels() != first.channels()) {
                return Err(Error::contract("pyramid levels disagree on channel count"));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn scales(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(Image::size).collect()
    }
}

fn check_ascending(sizes: &[(usize, usize)]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::contract("pyramid needs at least one level"));
    }
    if sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
        return Err(Error::contract(format!("pyramid sizes must be positive: {sizes:?}")));
    }
    for pair in sizes.windows(2) {
        let (a, b) = (pair[0].0 * pair[0].1, pair[1].0 * pair[1].1);
        if b <= a {
            return Err(Error::contract(format!(
                "pyramid sizes must strictly ascend in area: {sizes:?}"
            )));
        }
    }
    Ok(())
}

/// One bicubic copy of `img` per target size; a target equal to the source
/// size is passed through untouched.
pub fn build_pyramid(img: &Image, target_sizes: &[(usize, usize)]) -> Result<Pyramid> {
    check_ascending(target_sizes)?;
    let levels = target_sizes
        .iter()
        .map(|&(h, w)| {
            if (h, w) == img.size() {
                Ok(img.clone())
            } else {
                bicubic_resize(img, h, w)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn two_level_pyramid_smallest_first() {
        let img = random_image(3, 300, 400, 1);
        let p = build_pyramid(&img, &[(224, 224), (448, 448)]).unwrap();
        assert_eq!(p.scales(), vec![(224, 224), (448, 448)]);
        assert!(p.levels().iter().all(|l| l.channels() == 3));
    }

    #[test]
    fn source_sized_level_is_bit_identical() {
        let img = random_image(1, 32, 32, 2);
        let p = build_pyramid(&img, &[(32, 32)]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels()[0], img);

        let p = build_pyramid(&img, &[(16, 16), (32, 32)]).unwrap();
        assert_eq!(p.levels()[1], img);
        assert_eq!(p.levels()[0], bicubic_resize(&img, 16, 16).unwrap());
    }

    #[test]
    fn rejects_non_ascending_or_empty() {
        let img = random_image(1, 8, 8, 3);
        assert!(matches!(build_pyramid(&img, &[]), Err(Error::Contract(_))));
        assert!(matches!(
            build_pyramid(&img, &[(8, 8), (4, 4)]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            build_pyramid(&img, &[(4, 4), (4, 4)]),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn levels_ascend_and_keep_channels(c in 1usize..4, base in 2usize..10, n in 1usize..4, seed in 0u64..100) {
            let img = random_image(c, 9, 7, seed);
            let sizes: Vec<_> = (0..n).map(|i| (base * (i + 1), base * (i + 1) + 1)).collect();
            let p = build_pyramid(&img, &sizes).unwrap();
            prop_assert_eq!(p.scales(), sizes);
            for l in p.levels() {
                prop_assert_eq!(l.channels(), c);
                prop_assert!(l.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

//! Convolution and pooling kernels on batched `B×C×H×W` tensors.
//!
//! Convolution follows the cross-correlation convention (no kernel flip) with
//! zero padding, lowered to one GEMM per sample through an im2col buffer.

use crate::error::{Error, Result};
use crate::numerics::linalg::{gemm, Layout};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, wc, kernel_h, kernel_w) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != in_channels {
            return Err(Error::dims("conv2d", input, weight));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::dims("conv2d", input, weight));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Multiply-accumulates of one forward pass over the batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_sample() * self.patch_len()) as u64
    }

    /// Input coordinate hit by output index `o` and kernel tap `k` along one axis.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let xc = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &xc[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.width) {
                                        Some(ix) => src[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                dxc[iy * self.width + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input: B×Cin×H×W` with `weight: Cout×Cin×kh×kw`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [g.out_channels] {
        return Err(Error::dims("conv2d bias", bias.shape(), &[g.out_channels]));
    }
    let plane = g.out_plane();
    let mut col = vec![0.0; g.patch_len() * plane];
    let mut out = vec![0.0; g.batch * g.out_sample()];
    for b in 0..g.batch {
        let x = &input.data()[b * g.in_sample()..(b + 1) * g.in_sample()];
        let y = &mut out[b * g.out_sample()..(b + 1) * g.out_sample()];
        g.im2col(x, &mut col);
        gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            weight.data(),
            Layout::Normal,
            &col,
            Layout::Normal,
            y,
            false,
        );
        for (yc, &bc) in y.chunks_mut(plane).zip(bias.data()) {
            for v in yc {
                *v += bc;
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Vector-Jacobian products of [`conv2d`] for an upstream gradient `grad_out`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut col = vec![0.0; k * plane];
    let mut dcol = vec![0.0; k * plane];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.out_channels];
    let mut dx = want_input.then(|| vec![0.0; input.len()]);
    for b in 0..g.batch {
        let x = &input.data()[b * g.in_sample()..(b + 1) * g.in_sample()];
        let dy = &grad_out.data()[b * g.out_sample()..(b + 1) * g.out_sample()];
        for (acc, dyc) in db.iter_mut().zip(dy.chunks(plane)) {
            *acc += dyc.iter().sum::<f64>();
        }
        g.im2col(x, &mut col);
        gemm(
            g.out_channels,
            plane,
            k,
            dy,
            Layout::Normal,
            &col,
            Layout::Transposed,
            &mut dw,
            true,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                k,
                g.out_channels,
                plane,
                weight.data(),
                Layout::Transposed,
                dy,
                Layout::Normal,
                &mut dcol,
                false,
            );
            g.col2im(&dcol, &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.out_channels], db)?,
    })
}

/// Per-channel spatial mean: `B×C×H×W → B×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(4, "global_avg_pool")?;
    let s = input.shape();
    let plane = s[2] * s[3];
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let plane = input_shape[2] * input_shape[3];
    let inv = 1.0 / plane as f64;
    let mut out = Vec::with_capacity(plane * grad_out.len());
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-deep loop over (b, co, oy, ox, ci, ki, kj).
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [bn, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bn, co, ho, wo]);
        for n in 0..bn {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * ci + c) * kh + i) * kw + j];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (c, plane) in y.data().chunks(9).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn three_by_three_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[1], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d(&x, &w, &b, stride, pad).unwrap();
            let slow = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[1, 2, 3, 7], -1.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -1.25));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Tensor::randn(&[1, 3, 7, 7], 1.0, &mut rng);
        let pooled = global_avg_pool(&r).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..49 {
                acc += r.data()[c * 49 + i];
            }
            assert!((pooled.data()[c] - acc / 49.0).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn output_shape_formula(h in 1usize..12, w in 1usize..12, k in 1usize..5, s in 1usize..4, p in 0usize..3) {
            prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
            let x = Tensor::ones(&[1, 2, h, w]);
            let wt = Tensor::ones(&[3, 2, k, k]);
            let y = conv2d(&x, &wt, &Tensor::zeros(&[3]), s, p).unwrap();
            prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1]);
        }

        #[test]
        fn pooling_ignores_spatial_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng);
            let mut shuffled = x.clone();
            for plane in shuffled.data_mut().chunks_mut(12) {
                plane.reverse();
                plane.rotate_left((seed % 12) as usize);
            }
            let a = global_avg_pool(&x).unwrap();
            let b = global_avg_pool(&shuffled).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

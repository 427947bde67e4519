//! 2-D convolution as im2col followed by a matrix product, with its backward pass.

use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output indices `lo..hi` whose tap at kernel offset `k` lands inside an input of length `n`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
        let last = n as isize - 1 + p - k;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(n_out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Unfolds `x` into a `(Cin·k·k) × (Ho·Wo)` matrix; padded taps are zero.
fn im2col<T: Real>(x: &Tensor3<T>, spec: &ConvSpec, ho: usize, wo: usize) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let k = spec.kernel;
    let n = ho * wo;
    let mut cols = vec![T::zero(); spec.in_channels * k * k * n];
    for ic in 0..spec.in_channels {
        let src = x.plane(ic);
        for ky in 0..k {
            let (ylo, yhi) = spec.valid_range(ky, h, ho);
            for kx in 0..k {
                let (xlo, xhi) = spec.valid_range(kx, w, wo);
                let row = &mut cols[((ic * k + ky) * k + kx) * n..][..n];
                for oy in ylo..yhi {
                    let iy = oy * spec.stride + ky - spec.pad;
                    let in_row = &src[iy * w..(iy + 1) * w];
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in xlo..xhi {
                        out[ox] = in_row[ox * spec.stride + kx - spec.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the columns of `cols` back onto the input positions they were read from.
fn col2im_add<T: Real>(cols: &[T], spec: &ConvSpec, ho: usize, wo: usize, gx: &mut Tensor3<T>) {
    let (h, w) = (gx.height, gx.width);
    let k = spec.kernel;
    let n = ho * wo;
    for ic in 0..spec.in_channels {
        let dst = gx.plane_mut(ic);
        for ky in 0..k {
            let (ylo, yhi) = spec.valid_range(ky, h, ho);
            for kx in 0..k {
                let (xlo, xhi) = spec.valid_range(kx, w, wo);
                let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                for oy in ylo..yhi {
                    let iy = oy * spec.stride + ky - spec.pad;
                    let g_row = &mut dst[iy * w..(iy + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in xlo..xhi {
                        g_row[ox * spec.stride + kx - spec.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.pad == 0
}

pub fn conv_forward<T: Real>(x: &Tensor3<T>, weight: &[T], bias: &[T], spec: &ConvSpec) -> Tensor3<T> {
    debug_assert_eq!(x.channels, spec.in_channels);
    debug_assert_eq!(weight.len(), spec.weight_len());
    let (ho, wo) = spec.out_dims(x.height, x.width);
    let n = ho * wo;
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    let mut out = Tensor3::zeros(spec.out_channels, ho, wo);
    for oc in 0..spec.out_channels {
        out.plane_mut(oc).iter_mut().for_each(|v| *v = bias[oc]);
    }
    let owned;
    let cols: &[T] = if is_pointwise(spec) {
        &x.data
    } else {
        owned = im2col(x, spec, ho, wo);
        &owned
    };
    T::gemm(
        spec.out_channels,
        kk,
        n,
        weight,
        (kk, 1),
        cols,
        (n, 1),
        T::one(),
        &mut out.data,
        (n, 1),
    );
    out
}

/// Accumulates weight and bias gradients into `gw`/`gb`; writes the input
/// gradient into `gx` when requested.
pub fn conv_backward<T: Real>(
    x: &Tensor3<T>,
    weight: &[T],
    gout: &Tensor3<T>,
    spec: &ConvSpec,
    gw: &mut [T],
    gb: &mut [T],
    gx: Option<&mut Tensor3<T>>,
) {
    let (ho, wo) = (gout.height, gout.width);
    let n = ho * wo;
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    for (oc, b) in gb.iter_mut().enumerate().take(spec.out_channels) {
        *b += gout.plane(oc).iter().copied().sum::<T>();
    }
    let owned;
    let cols: &[T] = if is_pointwise(spec) {
        &x.data
    } else {
        owned = im2col(x, spec, ho, wo);
        &owned
    };
    // gW += gout · colsᵀ
    T::gemm(
        spec.out_channels,
        n,
        kk,
        &gout.data,
        (n, 1),
        cols,
        (1, n),
        T::one(),
        gw,
        (kk, 1),
    );
    if let Some(g) = gx {
        // gcols = Wᵀ · gout
        if is_pointwise(spec) {
            T::gemm(kk, spec.out_channels, n, weight, (1, kk), &gout.data, (n, 1), T::zero(), &mut g.data, (n, 1));
        } else {
            let mut gcols = vec![T::zero(); kk * n];
            T::gemm(kk, spec.out_channels, n, weight, (1, kk), &gout.data, (n, 1), T::zero(), &mut gcols, (n, 1));
            g.data.iter_mut().for_each(|v| *v = T::zero());
            col2im_add(&gcols, spec, ho, wo, g);
        }
    }
}

pub fn relu_inplace<T: Real>(t: &mut Tensor3<T>) {
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the post-activation is not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Tensor3<T>, activated: &Tensor3<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (x.height, x.width);
    let mut out = Tensor3::zeros(x.channels, 2 * h, 2 * w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, d) in dst[y * 2 * w..(y + 1) * 2 * w].iter_mut().enumerate() {
                *d = row[xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Real>(g: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (g.height / 2, g.width / 2);
    let mut out = Tensor3::zeros(g.channels, h, w);
    for c in 0..g.channels {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Textbook six-loop convolution with explicit bounds checks.
    fn naive_conv(x: &Tensor3<f64>, wt: &[f64], b: &[f64], s: &ConvSpec) -> Tensor3<f64> {
        let (ho, wo) = s.out_dims(x.height, x.width);
        let mut out = Tensor3::zeros(s.out_channels, ho, wo);
        for oc in 0..s.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..s.in_channels {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += wt[((oc * s.in_channels + ic) * s.kernel + ky) * s.kernel + kx]
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(oc, oy, ox) = acc;
                }
            }
        }
        out
    }

    fn random_case(spec: ConvSpec, h: usize, w: usize, seed: u64) -> (Tensor3<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = crate::tensor::substream(seed, &[]);
        let x = Tensor3::from_vec(
            spec.in_channels,
            h,
            w,
            (0..spec.in_channels * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let wt = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, wt, b)
    }

    #[test]
    fn forward_matches_naive_loop() {
        for (i, spec) in [
            ConvSpec::new(3, 4, 3, 1, 1),
            ConvSpec::new(2, 3, 3, 2, 1),
            ConvSpec::new(5, 2, 1, 1, 0),
        ]
        .into_iter()
        .enumerate()
        {
            let (x, wt, b) = random_case(spec, 8, 6, i as u64);
            let fast = conv_forward(&x, &wt, &b, &spec);
            let slow = naive_conv(&x, &wt, &b, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T g> + bias term, checked through all three gradients.
        for (i, spec) in [ConvSpec::new(3, 4, 3, 1, 1), ConvSpec::new(2, 3, 3, 2, 1)].into_iter().enumerate() {
            let (x, wt, b) = random_case(spec, 8, 8, 10 + i as u64);
            let zero_b = vec![0.0; spec.out_channels];
            let y = conv_forward(&x, &wt, &zero_b, &spec);
            let mut rng = crate::tensor::substream(99, &[i as u64]);
            let g = Tensor3::from_vec(y.channels, y.height, y.width, (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; b.len()];
            let mut gx = Tensor3::zeros(x.channels, x.height, x.width);
            conv_backward(&x, &wt, &g, &spec, &mut gw, &mut gb, Some(&mut gx));
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = wt.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            let gsum: f64 = (0..spec.out_channels).map(|c| g.plane(c).iter().sum::<f64>()).sum();
            assert!((gb.iter().sum::<f64>() - gsum).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor3::<f64>::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample2(&x);
        assert_eq!(
            u.data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let back = upsample2_backward(&u);
        assert_eq!(back.data, vec![4.0, 8.0, 12.0, 16.0]);
    }
}

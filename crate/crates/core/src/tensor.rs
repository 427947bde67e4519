//! Dense tensors, label grids and the scalar abstraction shared by the
//! model, the losses and evaluation.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar type the network runs in: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `c ← a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and each matrix is
    /// given with its `(row, column)` strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        beta: Self,
        c: &mut [Self],
        sc: (usize, usize),
    );
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "matrix view exceeds its buffer");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                beta: Self,
                c: &mut [Self],
                sc: (usize, usize),
            ) {
                check_span(a.len(), m, k, sa);
                check_span(b.len(), k, n, sb);
                check_span(c.len(), m, n, sc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was checked to lie inside its slice, and
                // `c` is borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Channel-major `C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// 3×H×W image with values in [0,1].
pub type ImageTensor = Tensor3<f32>;
/// Encoder output, `C_e×H/2×W/2`.
pub type FeatureMap<T> = Tensor3<T>;
/// Per-pixel class probabilities, `C×H×W`.
pub type ProbMap<T> = Tensor3<T>;
/// Unnormalized decoder output, `C×H×W`.
pub type Logits<T> = Tensor3<T>;

impl<T: Copy + Default> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} elements for shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape<U>(&self, other: &Tensor3<U>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }
}

impl ImageTensor {
    pub fn cast<T: Real>(&self) -> Tensor3<T> {
        self.map(|v| T::of(v as f64))
    }
}

/// Single-channel `H×W` grid (labels, confidence bits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Class ids `0..C` plus [`IGNORE_LABEL`].
pub type LabelMask = Grid<u8>;
/// 0/1 per pixel.
pub type BinaryMask = Grid<u8>;

pub const IGNORE_LABEL: u8 = 255;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} elements for grid {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Mixes a base seed with stream coordinates into an independent sub-seed.
///
/// Each coordinate goes through a SplitMix64 finalizer, so substreams for
/// `(epoch, sample, view)` never depend on evaluation order.
pub fn substream_seed(base: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x5750_5353_4545_4431);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

pub fn substream(base: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(base, coords))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bilinear resize of every channel (half-pixel centers, edge clamped).
pub fn resize_bilinear<T: Real>(src: &Tensor3<T>, out_h: usize, out_w: usize) -> Tensor3<T> {
    if out_h == src.height && out_w == src.width {
        return src.clone();
    }
    let sy = src.height as f64 / out_h as f64;
    let sx = src.width as f64 / out_w as f64;
    let taps = |n_out: usize, scale: f64, n_in: usize| -> Vec<(usize, usize, T)> {
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::of(pos - i0 as f64))
            })
            .collect()
    };
    let ys = taps(out_h, sy, src.height);
    let xs = taps(out_w, sx, src.width);
    let mut out = Tensor3::zeros(src.channels, out_h, out_w);
    for c in 0..src.channels {
        let plane = src.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * src.width..(y0 + 1) * src.width];
            let r1 = &plane[y1 * src.width..(y1 + 1) * src.width];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a grid (half-pixel centers).
pub fn resize_nearest<T: Copy>(src: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    let pick = |o: usize, n_out: usize, n_in: usize| -> usize {
        let pos = (o as f64 + 0.5) * n_in as f64 / n_out as f64;
        (pos.floor() as usize).min(n_in - 1)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = pick(oy, out_h, src.height);
        for ox in 0..out_w {
            data.push(src.data[y * src.width + pick(ox, out_w, src.width)]);
        }
    }
    Grid {
        height: out_h,
        width: out_w,
        data,
    }
}

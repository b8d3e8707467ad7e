//! im2col-based 2D cross-correlation kernels.

use super::Real;

/// Output extent of a strided, zero-padded window sweep, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Images per gemm so the column buffer stays bounded.
    fn chunk(&self) -> usize {
        const MAX_COLS: usize = 1 << 22;
        (MAX_COLS / (self.patch() * self.pixels()).max(1)).clamp(1, self.n)
    }
}

/// Fills `cols` (`patch x (count * pixels)`) from images `first..first+count`.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], first: usize, count: usize, cols: &mut [T]) {
    let p = g.pixels();
    let row_len = count * p;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for img in 0..count {
                    let src = &input[(first + img) * g.image_len() + ci * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[img * p..(img + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into image gradients (adjoint of [`im2col`]).
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], first: usize, count: usize, grad_input: &mut [T]) {
    let p = g.pixels();
    let row_len = count * p;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for img in 0..count {
                    let dst = &mut grad_input[(first + img) * g.image_len() + ci * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[img * p..(img + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (patch, p) = (g.patch(), g.pixels());
    let mut out = vec![T::zero(); g.n * g.o * p];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); patch * chunk * p];
    let mut tmp = vec![T::zero(); g.o * chunk * p];
    let mut first = 0;
    while first < g.n {
        let count = chunk.min(g.n - first);
        let cols = &mut cols[..patch * count * p];
        im2col(g, input, first, count, cols);
        let tmp = &mut tmp[..g.o * count * p];
        let cp = (count * p) as isize;
        T::gemm(g.o, patch, count * p, T::one(), kernel, patch as isize, 1, cols, cp, 1, T::zero(), tmp, cp, 1);
        for img in 0..count {
            for o in 0..g.o {
                let dst = &mut out[((first + img) * g.o + o) * p..][..p];
                dst.copy_from_slice(&tmp[o * count * p + img * p..][..p]);
                if let Some(b) = bias {
                    dst.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        }
        first += count;
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (patch, p) = (g.patch(), g.pixels());
    let mut gi = need[0].then(|| vec![T::zero(); input.len()]);
    let mut gk = need[1].then(|| vec![T::zero(); kernel.len()]);
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); g.o];
        for img in 0..g.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += grad_out[(img * g.o + o) * p..][..p].iter().copied().sum::<T>();
            }
        }
        gb
    });
    if gi.is_none() && gk.is_none() {
        return ConvGrads { input: gi, kernel: gk, bias: gb };
    }
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); patch * chunk * p];
    let mut gmat = vec![T::zero(); g.o * chunk * p];
    let mut first = 0;
    while first < g.n {
        let count = chunk.min(g.n - first);
        let cp = count * p;
        let gmat = &mut gmat[..g.o * cp];
        for img in 0..count {
            for o in 0..g.o {
                gmat[o * cp + img * p..][..p].copy_from_slice(&grad_out[((first + img) * g.o + o) * p..][..p]);
            }
        }
        let cols = &mut cols[..patch * cp];
        if let Some(gk) = gk.as_mut() {
            im2col(g, input, first, count, cols);
            // gk += G * cols^T
            T::gemm(g.o, cp, patch, T::one(), gmat, cp as isize, 1, cols, 1, cp as isize, T::one(), gk, patch as isize, 1);
        }
        if let Some(gi) = gi.as_mut() {
            // dcols = K^T * G
            T::gemm(patch, g.o, cp, T::one(), kernel, 1, patch as isize, gmat, cp as isize, 1, T::zero(), cols, cp as isize, 1);
            col2im(g, cols, first, count, gi);
        }
        first += count;
    }
    ConvGrads { input: gi, kernel: gk, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                            * k[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                                    }
                                }
                            }
                        }
                        out[((n * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        let (h, w, kh, kw, stride, pad) = (7, 6, 3, 2, 2, 1);
        let g = ConvGeom {
            n: 3,
            c: 2,
            h,
            w,
            o: 4,
            kh,
            kw,
            stride,
            pad,
            oh: conv_output_extent(h, kh, stride, pad).unwrap(),
            ow: conv_output_extent(w, kw, stride, pad).unwrap(),
        };
        let x: Vec<f64> = (0..g.n * g.c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..g.o * g.c * kh * kw).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        assert_eq!(forward(&g, &x, &k, None), naive(&g, &x, &k));
    }

    #[test]
    fn output_extent() {
        assert_eq!(conv_output_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv_output_extent(128, 7, 2, 3), Some(64));
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
    }
}

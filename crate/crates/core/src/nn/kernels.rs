//! Row-major matrix kernels. All accumulate into `c`.

use super::Scalar;

/// `c[n,m] += a[n,k] * b[k,m]`
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * *bv;
            }
        }
    }
}

/// `c[n,m] += a[n,k] * b[m,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (x, y) in a_row.iter().zip(b_row) {
                acc += *x * *y;
            }
            c[i * m + j] += acc;
        }
    }
}

/// `c[k,m] += a[n,k]^T * b[n,m]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let b_row = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let c_row = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * *bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset feeding (patch row, output position), if inside the image.
    #[inline]
    fn source(&self, c: usize, dy: usize, dx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + dy) as isize - self.pad_h as isize;
        let x = (ox * self.stride + dx) as isize - self.pad_w as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }

    /// Unfolds one image `[c_in, h, w]` into `[patch_len, out_len]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.c_in {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dx;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(c, dy, dx, oy, ox) {
                                Some(i) => x[i],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients into `dx`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.c_in {
            for dy in 0..self.kh {
                for dxk in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dxk;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(i) = self.source(c, dy, dxk, oy, ox) {
                                dx[i] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

//! im2col convolution kernels behind `Graph::conv2d`.

use alloc::vec;
use alloc::vec::Vec;

use super::real::{gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvShape {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    fn pointwise(&self) -> bool {
        self.k == 1
    }
}

/// Valid output column range `[j0, j1)` for a horizontal tap offset.
fn valid_cols(w: usize, dj: isize) -> (usize, usize) {
    let j0 = (-dj).max(0) as usize;
    let j1 = (w as isize - dj).clamp(0, w as isize) as usize;
    (j0.min(j1), j1)
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let (h, w, k, hw) = (s.h, s.w, s.k, s.plane());
    let pad = s.pad();
    for ci in 0..s.c {
        let src_plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let di = (ki * s.dilation) as isize - pad;
            for kj in 0..k {
                let dj = (kj * s.dilation) as isize - pad;
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (j0, j1) = valid_cols(w, dj);
                for i in 0..h {
                    let si = i as isize + di;
                    let drow = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src_plane[si as usize * w..(si as usize + 1) * w];
                    drow[..j0].fill(T::ZERO);
                    drow[j1..].fill(T::ZERO);
                    let a = (j0 as isize + dj) as usize;
                    drow[j0..j1].copy_from_slice(&srow[a..a + (j1 - j0)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], s: &ConvShape, dx: &mut [T]) {
    let (h, w, k, hw) = (s.h, s.w, s.k, s.plane());
    let pad = s.pad();
    for ci in 0..s.c {
        for ki in 0..k {
            let di = (ki * s.dilation) as isize - pad;
            for kj in 0..k {
                let dj = (kj * s.dilation) as isize - pad;
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let (j0, j1) = valid_cols(w, dj);
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = ci * hw + si as usize * w;
                    let a = (j0 as isize + dj) as usize;
                    let drow = &mut dx[base + a..base + a + (j1 - j0)];
                    for (d, &v) in drow.iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], kernel: &[T], s: &ConvShape) -> Vec<T> {
    let (hw, patch) = (s.plane(), s.patch());
    let mut out = vec![T::ZERO; s.n * s.f * hw];
    let mut col = if s.pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; patch * hw]
    };
    let kmat = MatRef::new(kernel, s.f, patch);
    for n in 0..s.n {
        let xn = &x[n * s.c * hw..(n + 1) * s.c * hw];
        let cols = if s.pointwise() {
            xn
        } else {
            im2col(xn, s, &mut col);
            &col[..]
        };
        gemm(
            kmat,
            MatRef::new(cols, patch, hw),
            T::ZERO,
            &mut out[n * s.f * hw..(n + 1) * s.f * hw],
        );
    }
    out
}

/// Gradients with respect to the input and/or the kernel. Kernel gradients are
/// accumulated over the batch in ascending sample order.
pub(crate) fn backward<T: Real>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    s: &ConvShape,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (hw, patch) = (s.plane(), s.patch());
    let mut gx = need_x.then(|| vec![T::ZERO; s.n * s.c * hw]);
    let mut gk = need_k.then(|| vec![T::ZERO; s.f * patch]);
    let mut col = if s.pointwise() || !need_k {
        Vec::new()
    } else {
        vec![T::ZERO; patch * hw]
    };
    let mut gcol = if s.pointwise() || !need_x {
        Vec::new()
    } else {
        vec![T::ZERO; patch * hw]
    };
    let kmat = MatRef::new(kernel, s.f, patch);
    for n in 0..s.n {
        let go = MatRef::new(&gout[n * s.f * hw..(n + 1) * s.f * hw], s.f, hw);
        let xn = &x[n * s.c * hw..(n + 1) * s.c * hw];
        if let Some(gk) = gk.as_mut() {
            let cols = if s.pointwise() {
                xn
            } else {
                im2col(xn, s, &mut col);
                &col[..]
            };
            gemm(go, MatRef::new(cols, patch, hw).t(), T::ONE, gk);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[n * s.c * hw..(n + 1) * s.c * hw];
            if s.pointwise() {
                gemm(kmat.t(), go, T::ZERO, dst);
            } else {
                gemm(kmat.t(), go, T::ZERO, &mut gcol);
                col2im_add(&gcol, s, dst);
            }
        }
    }
    (gx, gk)
}

//! Direct convolution via per-image im2col.
//!
//! Every output element is accumulated over `(c, i, j)` in scan order and the
//! bias is added last, so results match a naive six-loop convolution exactly.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulate count for the whole batch.
    pub fn macs(&self) -> u64 {
        (self.n * self.k * self.out_plane() * self.patch()) as u64
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators (fixed order, vectorizes).
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for ch in 0..chunks {
        let (xa, xb) = (&a[ch * 8..ch * 8 + 8], &b[ch * 8..ch * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_img = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.k * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let out_n = &mut out[n * g.k * plane..(n + 1) * g.k * plane];
        for k in 0..g.k {
            let orow = &mut out_n[k * plane..(k + 1) * plane];
            let wrow = &w[k * patch..(k + 1) * patch];
            for (jj, &wv) in wrow.iter().enumerate() {
                axpy(wv, &cols[jj * plane..(jj + 1) * plane], orow);
            }
            if let Some(b) = b {
                let bv = b[k];
                orow.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients w.r.t. input, weight and bias. Any of them may be skipped.
pub(crate) fn backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_img = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); if dw.is_some() { patch * plane } else { 0 }];
    let mut dcols = vec![T::zero(); if dx.is_some() { patch * plane } else { 0 }];
    for n in 0..g.n {
        let go = &grad_out[n * g.k * plane..(n + 1) * g.k * plane];
        if let Some(db) = db.as_deref_mut() {
            for k in 0..g.k {
                db[k] += go[k * plane..(k + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let img = &x[n * in_img..(n + 1) * in_img];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            for k in 0..g.k {
                let grow = &go[k * plane..(k + 1) * plane];
                let dwrow = &mut dw[k * patch..(k + 1) * patch];
                for (jj, d) in dwrow.iter_mut().enumerate() {
                    *d += dot(grow, &cols[jj * plane..(jj + 1) * plane]);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[n * in_img..(n + 1) * in_img];
            if g.is_pointwise() {
                for k in 0..g.k {
                    let grow = &go[k * plane..(k + 1) * plane];
                    for jj in 0..patch {
                        axpy(w[k * patch + jj], grow, &mut dimg[jj * plane..(jj + 1) * plane]);
                    }
                }
            } else {
                dcols.fill(T::zero());
                for k in 0..g.k {
                    let grow = &go[k * plane..(k + 1) * plane];
                    for jj in 0..patch {
                        axpy(w[k * patch + jj], grow, &mut dcols[jj * plane..(jj + 1) * plane]);
                    }
                }
                col2im_add(&dcols, g, dimg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_short_and_long_inputs() {
        for len in [0usize, 3, 8, 17] {
            let a: Vec<f64> = (0..len).map(|i| i as f64 * 0.5).collect();
            let b: Vec<f64> = (0..len).map(|i| 1.0 - i as f64).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            n: 1,
            c: 2,
            h: 5,
            w: 4,
            k: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * g.out_plane()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

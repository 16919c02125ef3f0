//! Forward and backward kernels for the spatial ops.
//!
//! All buffers are row-major. Convolution lowers one sample at a time through
//! an `im2col` buffer so memory stays proportional to a single sample.

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent along one spatial axis, or `None` when no window fits.
pub(crate) fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Float>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dxc[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(g: &ConvGeometry, x: &[T], weight: &[T]) -> Vec<T> {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * plane;
    let mut out = vec![T::ZERO; g.batch * out_sample];
    let mut cols = vec![T::ZERO; patch * plane];
    for n in 0..g.batch {
        im2col(g, &x[n * in_sample..(n + 1) * in_sample], &mut cols);
        T::gemm(
            g.c_out,
            patch,
            plane,
            T::ONE,
            weight,
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::ZERO,
            &mut out[n * out_sample..(n + 1) * out_sample],
            (plane as isize, 1),
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * plane;
    let mut dx = want_dx.then(|| vec![T::ZERO; g.batch * in_sample]);
    let mut dw = want_dw.then(|| vec![T::ZERO; g.c_out * patch]);
    let mut cols = vec![T::ZERO; patch * plane];
    for n in 0..g.batch {
        let dy_n = &dy[n * out_sample..(n + 1) * out_sample];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_sample..(n + 1) * in_sample], &mut cols);
            // dW += dY_n · cols^T
            T::gemm(
                g.c_out,
                plane,
                patch,
                T::ONE,
                dy_n,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::ONE,
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T · dY_n
            T::gemm(
                patch,
                g.c_out,
                plane,
                T::ONE,
                weight,
                (1, patch as isize),
                dy_n,
                (plane as isize, 1),
                T::ZERO,
                &mut cols,
                (plane as isize, 1),
            );
            col2im_add(g, &cols, &mut dx[n * in_sample..(n + 1) * in_sample]);
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn avg_pool_forward<T: Float>(g: &PoolGeometry, x: &[T]) -> Vec<T> {
    let inv = T::from_f64(1.0 / (g.kernel * g.kernel) as f64);
    let mut out = vec![T::ZERO; g.planes * g.out_h * g.out_w];
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::ZERO;
                for ki in 0..g.kernel {
                    let row = (oy * g.stride + ki) * g.w + ox * g.stride;
                    for v in &xp[row..row + g.kernel] {
                        acc += *v;
                    }
                }
                out[(p * g.out_h + oy) * g.out_w + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Float>(g: &PoolGeometry, dy: &[T]) -> Vec<T> {
    let inv = T::from_f64(1.0 / (g.kernel * g.kernel) as f64);
    let mut dx = vec![T::ZERO; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let dxp = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let share = dy[(p * g.out_h + oy) * g.out_w + ox] * inv;
                for ki in 0..g.kernel {
                    let row = (oy * g.stride + ki) * g.w + ox * g.stride;
                    for v in &mut dxp[row..row + g.kernel] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.out_h * g.out_w];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w[((co * g.c_in + ci) * g.kernel + ki) * g.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let (h, w, k) = (5, 6, 3);
            let g = ConvGeometry {
                batch: 2,
                c_in: 3,
                h,
                w,
                c_out: 4,
                kernel: k,
                stride,
                padding,
                out_h: out_extent(h, k, stride, padding).unwrap(),
                out_w: out_extent(w, k, stride, padding).unwrap(),
            };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            assert_eq!(conv2d_forward(&g, &x, &wt), naive_conv(&g, &x, &wt));
        }
    }

    #[test]
    fn out_extent_rejects_oversized_kernels() {
        assert_eq!(out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(out_extent(2, 3, 1, 0), None);
        assert_eq!(out_extent(2, 3, 1, 1), Some(2));
    }
}

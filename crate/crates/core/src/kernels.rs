//! Raw numeric kernels over flat slices.
//!
//! Work is split across rayon only along axes whose outputs are disjoint, and
//! cross-item reductions are summed sequentially in index order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation over a stack of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when it is not integral.
    pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if stride == 0 || padded < kernel || (padded - kernel) % stride != 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_image(&self) -> usize {
        self.c_in * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

fn conv_forward_one(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    let x_ch = &x[ci * g.height * g.width..];
                    let w_ch = &w[(co * g.c_in + ci) * k * k..];
                    for ky in 0..k {
                        let Some(iy) = g.src(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = g.src(ox, kx, g.width) else {
                                continue;
                            };
                            acc += x_ch[iy * g.width + ix] * w_ch[ky * k + kx];
                        }
                    }
                }
                out[(co * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_image()];
    out.par_chunks_mut(g.out_image())
        .zip(x.par_chunks(g.in_image()))
        .for_each(|(o, xi)| conv_forward_one(g, xi, w, o));
    out
}

/// Gradients of the input stack and the kernel given the output gradient.
pub fn conv2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = g.kernel;
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(g.in_image())
        .zip(grad_out.par_chunks(g.out_image()))
        .map(|(xi, go)| {
            let mut gx = vec![0.0; g.in_image()];
            let mut gw = vec![0.0; g.kernel_len()];
            for co in 0..g.c_out {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let gv = go[(co * g.out_h + oy) * g.out_w + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..g.c_in {
                            let base_x = ci * g.height * g.width;
                            let base_w = (co * g.c_in + ci) * k * k;
                            for ky in 0..k {
                                let Some(iy) = g.src(oy, ky, g.height) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = g.src(ox, kx, g.width) else {
                                        continue;
                                    };
                                    let xi_idx = base_x + iy * g.width + ix;
                                    let w_idx = base_w + ky * k + kx;
                                    gx[xi_idx] += gv * w[w_idx];
                                    gw[w_idx] += gv * xi[xi_idx];
                                }
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();

    let mut grad_x = Vec::with_capacity(x.len());
    let mut grad_w = vec![0.0; g.kernel_len()];
    for (gx, gw) in per_image {
        grad_x.extend_from_slice(&gx);
        for (acc, v) in grad_w.iter_mut().zip(&gw) {
            *acc += v;
        }
    }
    (grad_x, grad_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_rect() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn out_extent_rules() {
        assert_eq!(ConvGeom::out_extent(32, 3, 2, 1), None);
        assert_eq!(ConvGeom::out_extent(33, 3, 2, 1), Some(17));
        assert_eq!(ConvGeom::out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(ConvGeom::out_extent(2, 5, 1, 0), None);
    }
}

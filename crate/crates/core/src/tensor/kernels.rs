//! Plain-loop numeric kernels behind the tape operations.
//!
//! Every output element is accumulated in a fixed order starting from `0.0`
//! (no fused multiply-add, no reordering), so results are bitwise
//! reproducible and equal to the textbook loop definitions.

/// `out[r×c] = a[r×k] · b[k×c]`, accumulating over `k` in ascending order.
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `grad_a += g[r×c] · bᵀ`.
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], r: usize, k: usize, c: usize, grad_a: &mut [f64]) {
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            let b_row = &b[kk * c..(kk + 1) * c];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            grad_a[i * k + kk] += acc;
        }
    }
}

/// `grad_b += aᵀ · g[r×c]`.
pub(crate) fn matmul_grad_rhs(g: &[f64], a: &[f64], r: usize, k: usize, c: usize, grad_b: &mut [f64]) {
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let gb_row = &mut grad_b[kk * c..(kk + 1) * c];
            for (o, &gv) in gb_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

/// Shape bookkeeping for a direct 2-D convolution over `[B, C_in, H, W]`
/// with kernels `[C_out, C_in / groups, KH, KW]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        conv2d_output_extent(self.height, self.kernel_h, self.stride, self.padding)
    }

    pub fn out_width(&self) -> usize {
        conv2d_output_extent(self.width, self.kernel_w, self.stride, self.padding)
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }
}

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Source row/column for an output coordinate and kernel tap, or `None` if
/// the tap falls into the zero padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - padding as isize;
    if pos < 0 || pos as usize >= extent {
        None
    } else {
        Some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let group = oc / cout_g;
            let out_plane = &mut out[((b * g.out_channels + oc) * oh * ow)..][..oh * ow];
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let in_plane = &x[((b * g.in_channels + ic) * g.height * g.width)..][..g.height * g.width];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let wv = w[((oc * cin_g + icg) * g.kernel_h + ky) * g.kernel_w + kx];
                        for oy in 0..oh {
                            let Some(iy) = source(oy, ky, g.stride, g.padding, g.height) else {
                                continue;
                            };
                            let in_row = &in_plane[iy * g.width..(iy + 1) * g.width];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                if let Some(ix) = source(ox, kx, g.stride, g.padding, g.width) {
                                    *o += in_row[ix] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and/or kernel gradients of a convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Conv2dGeometry,
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let group = oc / cout_g;
            let g_plane = &gout[((b * g.out_channels + oc) * oh * ow)..][..oh * ow];
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let plane_off = (b * g.in_channels + ic) * g.height * g.width;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let widx = ((oc * cin_g + icg) * g.kernel_h + ky) * g.kernel_w + kx;
                        let wv = w[widx];
                        let mut gw_acc = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = source(oy, ky, g.stride, g.padding, g.height) else {
                                continue;
                            };
                            for ox in 0..ow {
                                let Some(ix) = source(ox, kx, g.stride, g.padding, g.width) else {
                                    continue;
                                };
                                let gv = g_plane[oy * ow + ox];
                                let xi = plane_off + iy * g.width + ix;
                                if let Some(gx) = grad_x.as_deref_mut() {
                                    gx[xi] += gv * wv;
                                }
                                gw_acc += gv * x[xi];
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            gw[widx] += gw_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into a new buffer laid out as the axes
/// permutation `perm` of that shape.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = src.len();
    let mut out = vec![0.0; n];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * in_strides[perm[d]];
        }
        *o = src[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(permute(&src, &[2, 3], &[1, 0]), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let shape = [2, 3, 4];
        let perm = [2, 0, 1];
        let p = permute(&src, &shape, &perm);
        let pshape: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
        let back = permute(&p, &pshape, &inverse_permutation(&perm));
        assert_eq!(back, src);
    }
}

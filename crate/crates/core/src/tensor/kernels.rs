//! Direct NCHW kernels for same-padded stride-1 convolution with odd
//! (possibly rectangular) kernels, and average pooling.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Valid output index range along one axis for a kernel tap offset.
    fn span(len: usize, offset: isize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (len as isize - offset.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let kw = self.kw;
        (0..self.kh).flat_map(move |ky| {
            (0..kw).map(move |kx| (ky * kw + kx, ky as isize - ph, kx as isize - pw))
        })
    }
}

/// Writes the receptive field of every output position of one sample as rows
/// `ic·kh·kw + tap` (each `stride ≥ plane` long) of a matrix, zero where the
/// kernel overhangs the border.
fn im2col(input: &[f64], d: &ConvDims, stride: usize, cols: &mut [f64]) {
    let plane = d.plane();
    let k2 = d.kh * d.kw;
    cols.fill(0.0);
    for ic in 0..d.c_in {
        let in_plane = &input[ic * plane..][..plane];
        for (tap, dy, dx) in d.taps() {
            let row = &mut cols[(ic * k2 + tap) * stride..][..plane];
            let (y0, y1) = ConvDims::span(d.height, dy);
            let (x0, x1) = ConvDims::span(d.width, dx);
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize * d.width) as isize + x0 as isize + dx;
                row[y * d.width + x0..y * d.width + x1]
                    .copy_from_slice(&in_plane[src as usize..][..x1 - x0]);
            }
        }
    }
}

/// Adds each row of `cols` back onto the input positions it was gathered from.
fn col2im_add(cols: &[f64], d: &ConvDims, stride: usize, grad_input: &mut [f64]) {
    let plane = d.plane();
    let k2 = d.kh * d.kw;
    for ic in 0..d.c_in {
        let gi_plane = &mut grad_input[ic * plane..][..plane];
        for (tap, dy, dx) in d.taps() {
            let row = &cols[(ic * k2 + tap) * stride..][..plane];
            let (y0, y1) = ConvDims::span(d.height, dy);
            let (x0, x1) = ConvDims::span(d.width, dx);
            for y in y0..y1 {
                let dst = ((y as isize + dy) as usize * d.width) as isize + x0 as isize + dx;
                let dst = &mut gi_plane[dst as usize..][..x1 - x0];
                for (o, v) in dst.iter_mut().zip(&row[y * d.width + x0..y * d.width + x1]) {
                    *o += v;
                }
            }
        }
    }
}

/// Each output is `bias + Σ_r w[oc, r] · cols[r, pos]` summed in ascending
/// `r = ic·kh·kw + tap`, computed in tiles of 4 output channels × 8
/// positions held in registers.
pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    d: ConvDims,
) -> Vec<f64> {
    let plane = d.plane();
    let k = d.c_in * d.kh * d.kw;
    let oc_padded = d.c_out.div_ceil(4) * 4;
    let stride = plane.div_ceil(8) * 8;
    let mut w = vec![0.0; oc_padded * k];
    w[..d.c_out * k].copy_from_slice(&weight[..d.c_out * k]);
    let mut b = vec![0.0; oc_padded];
    b[..d.c_out].copy_from_slice(bias);
    let mut cols = vec![0.0; k * stride];
    let mut tile = vec![0.0; oc_padded * stride];
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for n in 0..d.batch {
        im2col(&input[n * d.c_in * plane..][..d.c_in * plane], &d, stride, &mut cols);
        for oc in (0..oc_padded).step_by(4) {
            let w0 = &w[oc * k..][..k];
            let w1 = &w[(oc + 1) * k..][..k];
            let w2 = &w[(oc + 2) * k..][..k];
            let w3 = &w[(oc + 3) * k..][..k];
            for p in (0..stride).step_by(8) {
                let mut a0 = [b[oc]; 8];
                let mut a1 = [b[oc + 1]; 8];
                let mut a2 = [b[oc + 2]; 8];
                let mut a3 = [b[oc + 3]; 8];
                for r in 0..k {
                    let c: &[f64; 8] = cols[r * stride + p..][..8].try_into().expect("8 lanes");
                    let (x0, x1, x2, x3) = (w0[r], w1[r], w2[r], w3[r]);
                    for j in 0..8 {
                        a0[j] += x0 * c[j];
                        a1[j] += x1 * c[j];
                        a2[j] += x2 * c[j];
                        a3[j] += x3 * c[j];
                    }
                }
                for (i, a) in [a0, a1, a2, a3].iter().enumerate() {
                    tile[(oc + i) * stride + p..][..8].copy_from_slice(a);
                }
            }
        }
        let out_n = &mut out[n * d.c_out * plane..][..d.c_out * plane];
        for oc in 0..d.c_out {
            out_n[oc * plane..][..plane].copy_from_slice(&tile[oc * stride..][..plane]);
        }
    }
    out
}

/// Like [`im2col`] but position-major: row `pos` holds the `c_in·kh·kw`
/// receptive-field values (padded with zeros to `width` entries).
fn im2col_t(input: &[f64], d: &ConvDims, width: usize, cols: &mut [f64]) {
    let plane = d.plane();
    let k2 = d.kh * d.kw;
    cols.fill(0.0);
    for ic in 0..d.c_in {
        let in_plane = &input[ic * plane..][..plane];
        for (tap, dy, dx) in d.taps() {
            let r = ic * k2 + tap;
            let (y0, y1) = ConvDims::span(d.height, dy);
            let (x0, x1) = ConvDims::span(d.width, dx);
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize * d.width) as isize + x0 as isize + dx;
                let src = &in_plane[src as usize..][..x1 - x0];
                for (x, v) in (x0..x1).zip(src) {
                    cols[(y * d.width + x) * width + r] = *v;
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when requested.
///
/// The weight gradient is `Σ_n Σ_pos g[n, oc, pos] · cols[n, pos, r]`, summed
/// in `(n, pos)` order per entry in tiles of 4 output channels × 8 taps.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let plane = d.plane();
    let k = d.c_in * d.kh * d.kw;
    let k_padded = k.div_ceil(8) * 8;
    let oc_padded = d.c_out.div_ceil(4) * 4;
    let mut cols_t = vec![0.0; plane * k_padded];
    let mut g = vec![0.0; oc_padded * plane];
    let mut gw = vec![0.0; oc_padded * k_padded];
    let mut cols = vec![0.0; if grad_input.is_some() { k * plane } else { 0 }];
    for n in 0..d.batch {
        im2col_t(&input[n * d.c_in * plane..][..d.c_in * plane], &d, k_padded, &mut cols_t);
        let g_n = &grad_out[n * d.c_out * plane..][..d.c_out * plane];
        g[..d.c_out * plane].copy_from_slice(g_n);
        for oc in 0..d.c_out {
            grad_bias[oc] += g_n[oc * plane..][..plane].iter().sum::<f64>();
        }
        for oc in (0..oc_padded).step_by(4) {
            let g0 = &g[oc * plane..][..plane];
            let g1 = &g[(oc + 1) * plane..][..plane];
            let g2 = &g[(oc + 2) * plane..][..plane];
            let g3 = &g[(oc + 3) * plane..][..plane];
            for r in (0..k_padded).step_by(8) {
                let load = |i: usize| -> [f64; 8] {
                    gw[(oc + i) * k_padded + r..][..8].try_into().expect("8 lanes")
                };
                let (mut a0, mut a1, mut a2, mut a3) = (load(0), load(1), load(2), load(3));
                for p in 0..plane {
                    let c: &[f64; 8] = cols_t[p * k_padded + r..][..8].try_into().expect("8 lanes");
                    let (x0, x1, x2, x3) = (g0[p], g1[p], g2[p], g3[p]);
                    for j in 0..8 {
                        a0[j] += x0 * c[j];
                        a1[j] += x1 * c[j];
                        a2[j] += x2 * c[j];
                        a3[j] += x3 * c[j];
                    }
                }
                for (i, a) in [a0, a1, a2, a3].iter().enumerate() {
                    gw[(oc + i) * k_padded + r..][..8].copy_from_slice(a);
                }
            }
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            cols.fill(0.0);
            for oc in 0..d.c_out {
                let g = &g_n[oc * plane..][..plane];
                for r in 0..k {
                    let wv = weight[oc * k + r];
                    for (o, gv) in cols[r * plane..][..plane].iter_mut().zip(g) {
                        *o += wv * gv;
                    }
                }
            }
            col2im_add(&cols, &d, plane, &mut gi[n * d.c_in * plane..][..d.c_in * plane]);
        }
    }
    for oc in 0..d.c_out {
        for r in 0..k {
            grad_weight[oc * k + r] += gw[oc * k_padded + r];
        }
    }
}

/// Non-overlapping `kh × kw` mean pooling over the last two axes of
/// `planes` stacked `height × width` planes.
pub(crate) fn avg_pool_forward(
    input: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (height / kh, width / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * height * width..][..height * width];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let row = &mut dst[oy * ow..][..ow];
            for dy in 0..kh {
                let src_row = &src[(oy * kh + dy) * width..][..ow * kw];
                for (ox, o) in row.iter_mut().enumerate() {
                    for v in &src_row[ox * kw..][..kw] {
                        *o += v;
                    }
                }
            }
            for o in row.iter_mut() {
                *o *= scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    grad_out: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (height / kh, width / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut grad = vec![0.0; planes * height * width];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut grad[p * height * width..][..height * width];
        for y in 0..oh * kh {
            let g_row = &g[(y / kh) * ow..][..ow];
            let d_row = &mut dst[y * width..][..ow * kw];
            for (x, d) in d_row.iter_mut().enumerate() {
                *d = g_row[x / kw] * scale;
            }
        }
    }
    grad
}

//! Raw forward/backward loops over flat buffers. Shapes are validated by
//! the graph before these are called.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    pub fn macs(&self) -> u64 {
        (self.out_len() * self.c_in * self.kh * self.kw) as u64
    }
}

/// Output positions `o` along one axis for which `o * stride + k - padding`
/// lands inside `[0, extent)`.
fn valid_range(k: usize, padding: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    if extent + padding <= k {
        return (0, 0);
    }
    let hi = ((extent - 1 + padding - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_len()];
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias[co]);
        for ci in 0..g.c_in {
            let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h, g.out_h);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w, g.out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.padding;
                            let src = &in_row[ix0..ix0 + out_row.len()];
                            for (o, &x) in out_row.iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for (j, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox_lo + j) * g.stride + kx - g.padding;
                                *o += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the input, kernel and bias gradients of a convolution.
/// `grad_input` is skipped when `None`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let plane = g.out_h * g.out_w;
    if let Some(gb) = grad_bias {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    let mut grad_kernel = grad_kernel;
    for co in 0..g.c_out {
        let gout_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let in_off = ci * g.h * g.w;
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h, g.out_h);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w, g.out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = kernel[widx];
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let row_off = in_off + iy * g.w;
                        let gout_row = &gout_plane[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                        if g.stride == 1 {
                            let ix0 = row_off + ox_lo + kx - g.padding;
                            let n = gout_row.len();
                            let in_row = &input[ix0..ix0 + n];
                            acc += gout_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_input.as_deref_mut() {
                                for (d, &go) in gi[ix0..ix0 + n].iter_mut().zip(gout_row) {
                                    *d += wv * go;
                                }
                            }
                        } else {
                            for (j, &go) in gout_row.iter().enumerate() {
                                let ix = row_off + (ox_lo + j) * g.stride + kx - g.padding;
                                acc += go * input[ix];
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    gi[ix] += wv * go;
                                }
                            }
                        }
                    }
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn out_len(&self) -> usize {
        self.c * self.out_h * self.out_w
    }
}

pub(crate) fn avg_pool_forward(g: &PoolGeometry, input: &[f64]) -> Vec<f64> {
    let area = (g.window * g.window) as f64;
    let mut out = Vec::with_capacity(g.out_len());
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut sum = 0.0;
                for dy in 0..g.window {
                    let row = (oy * g.stride + dy) * g.w + ox * g.stride;
                    sum += plane[row..row + g.window].iter().sum::<f64>();
                }
                out.push(sum / area);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeometry, grad_out: &[f64], grad_input: &mut [f64]) {
    let area = (g.window * g.window) as f64;
    for c in 0..g.c {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let share = grad_out[(c * g.out_h + oy) * g.out_w + ox] / area;
                for dy in 0..g.window {
                    let row = (oy * g.stride + dy) * g.w + ox * g.stride;
                    for v in &mut plane[row..row + g.window] {
                        *v += share;
                    }
                }
            }
        }
    }
}

/// Returns pooled values and, per output, the flat input index of the first
/// (row-major) maximal element of its window.
pub(crate) fn max_pool_forward(g: &PoolGeometry, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.out_len());
    let mut argmax = Vec::with_capacity(g.out_len());
    for c in 0..g.c {
        let base = c * g.h * g.w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + (oy * g.stride) * g.w + ox * g.stride;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// `out_j = sum_i x_i * w_ij + b_j` with `w` stored `[d_in, d_out]`.
pub(crate) fn fc_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let d_out = bias.len();
    let mut out = bias.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &weight[i * d_out..(i + 1) * d_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
    out
}

pub(crate) fn fc_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let d_out = grad_out.len();
    if let Some(gx) = grad_x {
        for (i, g) in gx.iter_mut().enumerate() {
            let row = &weight[i * d_out..(i + 1) * d_out];
            *g += row.iter().zip(grad_out).map(|(w, go)| w * go).sum::<f64>();
        }
    }
    if let Some(gw) = grad_weight {
        for (i, &xi) in x.iter().enumerate() {
            for (d, &go) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(grad_out) {
                *d += xi * go;
            }
        }
    }
    if let Some(gb) = grad_bias {
        for (d, &go) in gb.iter_mut().zip(grad_out) {
            *d += go;
        }
    }
}

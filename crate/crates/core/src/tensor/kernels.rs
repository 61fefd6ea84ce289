//! Raw numeric kernels on contiguous `[C, H, W]` buffers.
//!
//! These carry no graph bookkeeping. The autodiff graph calls them for its
//! forward and backward passes, and the metric and simulation code calls the
//! forward variants directly.

/// Output extent of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output indices `o` in `lo..hi` for which `o * stride + offset` lands in `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_len(self.h, self.k, self.stride, self.pad),
            conv_out_len(self.w, self.k, self.stride, self.pad),
        )
    }
}

pub fn conv2d_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let mut out = vec![0.0; g.cout * ho * wo];
    for co in 0..g.cout {
        let out_c = &mut out[co * ho * wo..(co + 1) * ho * wo];
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..g.cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - g.pad as isize;
                let (oy_lo, oy_hi) = valid_range(h, ho, s, dy);
                for kx in 0..k {
                    let wv = weight[((co * g.cin + ci) * k + ky) * k + kx];
                    let dx = kx as isize - g.pad as isize;
                    let (ox_lo, ox_hi) = valid_range(w, wo, s, dx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s) as isize + dy;
                        let in_row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_c[oy * wo + ox_lo..oy * wo + ox_hi];
                        let ix0 = ((ox_lo * s) as isize + dx) as usize;
                        if s == 1 {
                            let src = &in_row[ix0..ix0 + out_row.len()];
                            for (o, i) in out_row.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in out_row.iter_mut().enumerate() {
                                *o += wv * in_row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: ConvGeom,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let mut gin = if need_input { vec![0.0; g.cin * h * w] } else { Vec::new() };
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.cout];
    for co in 0..g.cout {
        let go_c = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        gb[co] = go_c.iter().sum();
        for ci in 0..g.cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - g.pad as isize;
                let (oy_lo, oy_hi) = valid_range(h, ho, s, dy);
                for kx in 0..k {
                    let widx = ((co * g.cin + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let dx = kx as isize - g.pad as isize;
                    let (ox_lo, ox_hi) = valid_range(w, wo, s, dx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ((ox_lo * s) as isize + dx) as usize;
                    let len = ox_hi - ox_lo;
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * s) as isize + dy) as usize;
                        let go_row = &go_c[oy * wo + ox_lo..oy * wo + ox_hi];
                        if s == 1 {
                            let in_seg = &in_c[iy * w + ix0..iy * w + ix0 + len];
                            acc += go_row.iter().zip(in_seg).map(|(a, b)| a * b).sum::<f64>();
                            if need_input {
                                let gin_seg = &mut gin[ci * h * w + iy * w + ix0..ci * h * w + iy * w + ix0 + len];
                                for (gi, go) in gin_seg.iter_mut().zip(go_row) {
                                    *gi += wv * go;
                                }
                            }
                        } else {
                            let base = iy * w + ix0;
                            for (j, go) in go_row.iter().enumerate() {
                                acc += go * in_c[base + j * s];
                            }
                            if need_input {
                                let gin_c = &mut gin[ci * h * w..(ci + 1) * h * w];
                                for (j, go) in go_row.iter().enumerate() {
                                    gin_c[base + j * s] += wv * go;
                                }
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Clamp-to-edge bilinear tap along one axis: `(i0, i1, frac, inside)`.
/// `inside` is false when the coordinate was clamped, in which case the
/// sample does not move with the coordinate.
#[inline]
fn axis_tap(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let (c, inside) = if coord < 0.0 {
        (0.0, false)
    } else if coord > max {
        (max, false)
    } else {
        (coord, true)
    };
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

/// Clamp-to-edge bilinear sample of one `h x w` plane at `(x, y)`.
#[inline]
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx, _) = axis_tap(x, w);
    let (y0, y1, fy, _) = axis_tap(y, h);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// `out(x) = src(x + flow(x))` for every channel. `flow` is `[2, h, w]` (du, dv).
pub fn warp_forward(src: &[f64], c: usize, h: usize, w: usize, flow: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow[p];
            let sy = y as f64 + flow[hw + p];
            let (x0, x1, fx, _) = axis_tap(sx, w);
            let (y0, y1, fy, _) = axis_tap(sy, h);
            let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
            for ch in 0..c {
                let pl = &src[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] =
                    w00 * pl[y0 * w + x0] + w01 * pl[y0 * w + x1] + w10 * pl[y1 * w + x0] + w11 * pl[y1 * w + x1];
            }
        }
    }
    out
}

/// Gradients of [`warp_forward`] with respect to `src` and `flow`.
pub fn warp_backward(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    flow: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gsrc = vec![0.0; c * hw];
    let mut gflow = vec![0.0; 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow[p];
            let sy = y as f64 + flow[hw + p];
            let (x0, x1, fx, in_x) = axis_tap(sx, w);
            let (y0, y1, fy, in_y) = axis_tap(sy, h);
            let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
            let (mut du, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let go = grad_out[ch * hw + p];
                if go == 0.0 {
                    continue;
                }
                let base = ch * hw;
                gsrc[base + y0 * w + x0] += w00 * go;
                gsrc[base + y0 * w + x1] += w01 * go;
                gsrc[base + y1 * w + x0] += w10 * go;
                gsrc[base + y1 * w + x1] += w11 * go;
                let pl = &src[base..base + hw];
                let (a, b, cc, d) = (pl[y0 * w + x0], pl[y0 * w + x1], pl[y1 * w + x0], pl[y1 * w + x1]);
                if in_x {
                    du += go * ((1.0 - fy) * (b - a) + fy * (d - cc));
                }
                if in_y {
                    dv += go * ((1.0 - fx) * (cc - a) + fx * (d - b));
                }
            }
            gflow[p] = du;
            gflow[hw + p] = dv;
        }
    }
    (gsrc, gflow)
}

/// Per-axis taps for half-pixel-centred bilinear upsampling by `factor`.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let (i0, i1, f, _) = axis_tap(src, n);
            (i0, i1, f)
        })
        .collect()
}

pub fn upsample_forward(input: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let pl = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = pl[y0 * w + x0] * (1.0 - fx) + pl[y0 * w + x1] * fx;
                let bot = pl[y1 * w + x0] * (1.0 - fx) + pl[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        let gi = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[oy * wo + ox];
                gi[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                gi[y0 * w + x1] += g * fx * (1.0 - fy);
                gi[y1 * w + x0] += g * (1.0 - fx) * fy;
                gi[y1 * w + x1] += g * fx * fy;
            }
        }
    }
    gin
}

/// Source index in a `[C*r*r, h, w]` buffer for every element of the
/// `[C, h*r, w*r]` depth-to-space output.
pub fn depth_to_space_index(c_out: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c_out * ho * wo);
    for c in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, dy) = (oy / r, oy % r);
                let (x, dx) = (ox / r, ox % r);
                let src_c = c * r * r + dy * r + dx;
                idx.push((src_c * h + y) * w + x);
            }
        }
    }
    idx
}

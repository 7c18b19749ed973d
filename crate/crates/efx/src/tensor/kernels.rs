//! Raw numeric loops shared by the graph ops. Everything here works on
//! flat slices with explicit dims; shape checking happens in the graph.

use super::Element;

/// Edge-inclusive reflection: the padded value at distance `d` outside the
/// border mirrors the pixel `d - 1` inside (`pad[-1] = x[0]`, `pad[-2] = x[1]`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r), "reflection out of range: index {i} for size {n}");
    r as usize
}

/// Pads a (C, H, W) image by `pad_y` rows and `pad_x` columns per side.
pub fn pad2d<E: Element>(
    input: &[E],
    c: usize,
    h: usize,
    w: usize,
    pad_y: usize,
    pad_x: usize,
    symmetric: bool,
) -> Vec<E> {
    let (ph, pw) = (h + 2 * pad_y, w + 2 * pad_x);
    let mut out = vec![E::zero(); c * ph * pw];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let iy = py as isize - pad_y as isize;
            let in_y = (0..h as isize).contains(&iy);
            for px in 0..pw {
                let ix = px as isize - pad_x as isize;
                let in_x = (0..w as isize).contains(&ix);
                dst[py * pw + px] = if in_y && in_x {
                    src[iy as usize * w + ix as usize]
                } else if symmetric {
                    src[reflect(iy, h) * w + reflect(ix, w)]
                } else {
                    E::zero()
                };
            }
        }
    }
    out
}

/// Folds gradients of a padded image back onto the original pixels.
pub fn unpad2d_grad<E: Element>(
    dpad: &[E],
    c: usize,
    h: usize,
    w: usize,
    pad_y: usize,
    pad_x: usize,
    symmetric: bool,
) -> Vec<E> {
    let (ph, pw) = (h + 2 * pad_y, w + 2 * pad_x);
    let mut out = vec![E::zero(); c * h * w];
    for ch in 0..c {
        let src = &dpad[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            let iy = py as isize - pad_y as isize;
            for px in 0..pw {
                let ix = px as isize - pad_x as isize;
                let g = src[py * pw + px];
                if g == E::zero() {
                    continue;
                }
                let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                if inside {
                    dst[iy as usize * w + ix as usize] += g;
                } else if symmetric {
                    dst[reflect(iy, h) * w + reflect(ix, w)] += g;
                }
            }
        }
    }
    out
}

pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_y - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_x - self.kw) / self.stride + 1
    }
}

/// Cross-correlation of a padded (C_in, H+2p, W+2p) buffer with
/// (C_out, C_in, KH, KW) weights.
pub fn conv2d_forward<E: Element>(
    padded: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    d: &ConvDims,
) -> Vec<E> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ph, pw) = (d.h + 2 * d.pad_y, d.w + 2 * d.pad_x);
    let mut out = vec![E::zero(); d.c_out * oh * ow];
    for co in 0..d.c_out {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..d.c_in {
            let pad_c = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = weight[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let src = &pad_c[(oy * d.stride + ky) * pw + kx..];
                        let dst = &mut out_c[oy * ow..(oy + 1) * ow];
                        if d.stride == 1 {
                            for (o, s) in dst.iter_mut().zip(src.iter()) {
                                *o += wv * *s;
                            }
                        } else {
                            for ox in 0..ow {
                                dst[ox] += wv * src[ox * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d_padded, d_weight, d_bias).
pub fn conv2d_backward<E: Element>(
    padded: &[E],
    weight: &[E],
    dout: &[E],
    d: &ConvDims,
    want_input: bool,
    want_weight: bool,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ph, pw) = (d.h + 2 * d.pad_y, d.w + 2 * d.pad_x);
    let mut dpad = vec![E::zero(); if want_input { d.c_in * ph * pw } else { 0 }];
    let mut dw = vec![E::zero(); if want_weight { weight.len() } else { 0 }];
    let mut db = vec![E::zero(); d.c_out];
    for co in 0..d.c_out {
        let dout_c = &dout[co * oh * ow..(co + 1) * oh * ow];
        db[co] = dout_c.iter().fold(E::zero(), |a, &g| a + g);
        for ci in 0..d.c_in {
            let pad_c = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let widx = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                    let wv = weight[widx];
                    let mut acc = E::zero();
                    for oy in 0..oh {
                        let row = (oy * d.stride + ky) * pw + kx;
                        let dg = &dout_c[oy * ow..(oy + 1) * ow];
                        if want_weight {
                            for ox in 0..ow {
                                acc += dg[ox] * pad_c[row + ox * d.stride];
                            }
                        }
                        if want_input {
                            let dpad_c = &mut dpad[ci * ph * pw..(ci + 1) * ph * pw];
                            for ox in 0..ow {
                                dpad_c[row + ox * d.stride] += wv * dg[ox];
                            }
                        }
                    }
                    if want_weight {
                        dw[widx] = acc;
                    }
                }
            }
        }
    }
    (dpad, dw, db)
}

/// 2x2 average pooling, stride 2. H and W must be even.
pub fn avg_pool2_forward<E: Element>(input: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut out = vec![E::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                dst[oy * ow + ox] =
                    (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<E: Element>(dout: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut din = vec![E::zero(); c * h * w];
    for ch in 0..c {
        let src = &dout[ch * oh * ow..];
        let dst = &mut din[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let base = (2 * oy) * w + 2 * ox;
                dst[base] += g;
                dst[base + 1] += g;
                dst[base + w] += g;
                dst[base + w + 1] += g;
            }
        }
    }
    din
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2_forward<E: Element>(input: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<E: Element>(dout: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut din = vec![E::zero(); c * h * w];
    for ch in 0..c {
        let src = &dout[ch * oh * ow..];
        let dst = &mut din[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    din
}

/// Per-pixel kernel application: every output pixel is the weighted sum of
/// the input pixels in its (2k+1)^2 window, with symmetric padding at the
/// borders. `field` is (taps, H, W) with tap index `(dy+k)*(2k+1)+(dx+k)`
/// weighting source pixel `(y-dy, x-dx)`.
pub fn apply_kernels_forward<E: Element>(
    image: &[E],
    field: &[E],
    c: usize,
    h: usize,
    w: usize,
    kappa: usize,
) -> Vec<E> {
    let side = 2 * kappa + 1;
    let mut out = vec![E::zero(); c * h * w];
    for ch in 0..c {
        let img = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (t, tap) in field.chunks_exact(h * w).enumerate() {
            let dy = (t / side) as isize - kappa as isize;
            let dx = (t % side) as isize - kappa as isize;
            for y in 0..h {
                let sy = reflect(y as isize - dy, h);
                for x in 0..w {
                    let sx = reflect(x as isize - dx, w);
                    dst[y * w + x] += tap[y * w + x] * img[sy * w + sx];
                }
            }
        }
    }
    out
}

/// Returns (d_image, d_field).
pub fn apply_kernels_backward<E: Element>(
    image: &[E],
    field: &[E],
    dout: &[E],
    c: usize,
    h: usize,
    w: usize,
    kappa: usize,
) -> (Vec<E>, Vec<E>) {
    let side = 2 * kappa + 1;
    let mut dimg = vec![E::zero(); c * h * w];
    let mut dfield = vec![E::zero(); field.len()];
    for ch in 0..c {
        let img = &image[ch * h * w..(ch + 1) * h * w];
        let dimg_c = &mut dimg[ch * h * w..(ch + 1) * h * w];
        let dg = &dout[ch * h * w..(ch + 1) * h * w];
        for t in 0..side * side {
            let dy = (t / side) as isize - kappa as isize;
            let dx = (t % side) as isize - kappa as isize;
            let tap = &field[t * h * w..(t + 1) * h * w];
            let dtap = &mut dfield[t * h * w..(t + 1) * h * w];
            for y in 0..h {
                let sy = reflect(y as isize - dy, h);
                for x in 0..w {
                    let sx = reflect(x as isize - dx, w);
                    let g = dg[y * w + x];
                    dtap[y * w + x] += g * img[sy * w + sx];
                    dimg_c[sy * w + sx] += g * tap[y * w + x];
                }
            }
        }
    }
    (dimg, dfield)
}

#[inline]
fn clamp_coord(v: f64, max: usize) -> f64 {
    v.max(0.0).min(max as f64)
}

/// Bilinear warp: `out(y, x) = image(y + v(y,x), x + u(y,x))` with
/// clamp-to-edge sampling. `flow` is (2, H, W), channel 0 = u, channel 1 = v.
pub fn warp_forward<E: Element>(image: &[E], flow: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut out = vec![E::zero(); c * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let fx = clamp_coord(x as f64 + flow[i].to_f64(), w - 1);
            let fy = clamp_coord(y as f64 + flow[plane + i].to_f64(), h - 1);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..c {
                let img = &image[ch * plane..];
                let top = img[y0 * w + x0].to_f64() * (1.0 - ax) + img[y0 * w + x1].to_f64() * ax;
                let bot = img[y1 * w + x0].to_f64() * (1.0 - ax) + img[y1 * w + x1].to_f64() * ax;
                out[ch * plane + i] = E::from_f64(top * (1.0 - ay) + bot * ay);
            }
        }
    }
    out
}

/// Returns (d_image, d_flow).
pub fn warp_backward<E: Element>(
    image: &[E],
    flow: &[E],
    dout: &[E],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<E>, Vec<E>) {
    let plane = h * w;
    let mut dimg = vec![E::zero(); c * plane];
    let mut dflow = vec![E::zero(); 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rx = x as f64 + flow[i].to_f64();
            let ry = y as f64 + flow[plane + i].to_f64();
            let inside_x = (0.0..=(w - 1) as f64).contains(&rx);
            let inside_y = (0.0..=(h - 1) as f64).contains(&ry);
            let fx = clamp_coord(rx, w - 1);
            let fy = clamp_coord(ry, h - 1);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let (mut du, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let img = &image[ch * plane..];
                let g = dout[ch * plane + i].to_f64();
                if g == 0.0 {
                    continue;
                }
                let dimg_c = &mut dimg[ch * plane..(ch + 1) * plane];
                dimg_c[y0 * w + x0] += E::from_f64(g * (1.0 - ax) * (1.0 - ay));
                dimg_c[y0 * w + x1] += E::from_f64(g * ax * (1.0 - ay));
                dimg_c[y1 * w + x0] += E::from_f64(g * (1.0 - ax) * ay);
                dimg_c[y1 * w + x1] += E::from_f64(g * ax * ay);
                let (p00, p01) = (img[y0 * w + x0].to_f64(), img[y0 * w + x1].to_f64());
                let (p10, p11) = (img[y1 * w + x0].to_f64(), img[y1 * w + x1].to_f64());
                if inside_x {
                    du += g * ((p01 - p00) * (1.0 - ay) + (p11 - p10) * ay);
                }
                if inside_y {
                    dv += g * ((p10 - p00) * (1.0 - ax) + (p11 - p01) * ax);
                }
            }
            dflow[i] = E::from_f64(du);
            dflow[plane + i] = E::from_f64(dv);
        }
    }
    (dimg, dflow)
}

/// Channel Gram matrix: `G[a][b] = sum_hw F[a]F[b] / (C*H*W)`.
pub fn gram_forward<E: Element>(features: &[E], c: usize, plane: usize) -> Vec<E> {
    let norm = E::from_f64(1.0 / (c * plane) as f64);
    let mut out = vec![E::zero(); c * c];
    for a in 0..c {
        let fa = &features[a * plane..(a + 1) * plane];
        for b in a..c {
            let fb = &features[b * plane..(b + 1) * plane];
            let mut acc = E::zero();
            for (va, vb) in fa.iter().zip(fb) {
                acc += *va * *vb;
            }
            acc *= norm;
            out[a * c + b] = acc;
            out[b * c + a] = acc;
        }
    }
    out
}

/// dF = (dG + dG^T) * F / (C*H*W)
pub fn gram_backward<E: Element>(features: &[E], dout: &[E], c: usize, plane: usize) -> Vec<E> {
    let norm = E::from_f64(1.0 / (c * plane) as f64);
    let mut dfeat = vec![E::zero(); features.len()];
    for a in 0..c {
        let dfa = &mut dfeat[a * plane..(a + 1) * plane];
        for b in 0..c {
            let coeff = (dout[a * c + b] + dout[b * c + a]) * norm;
            if coeff == E::zero() {
                continue;
            }
            let fb = &features[b * plane..(b + 1) * plane];
            for (d, v) in dfa.iter_mut().zip(fb) {
                *d += coeff * *v;
            }
        }
    }
    dfeat
}

/// (M, K) x (K, N) -> (M, N)
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// dA = dC * B^T
pub fn matmul_da<E: Element>(dc: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut da = vec![E::zero(); m * k];
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for (g, bv) in dc_row.iter().zip(b_row) {
                acc += *g * *bv;
            }
            da[i * k + p] = acc;
        }
    }
    da
}

/// dB = A^T * dC
pub fn matmul_db<E: Element>(a: &[E], dc: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut db = vec![E::zero(); k * n];
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, g) in db_row.iter_mut().zip(dc_row) {
                *d += av * *g;
            }
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_is_edge_inclusive() {
        // pad[-1] mirrors x[0], pad[-2] mirrors x[1]; same at the far edge.
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn symmetric_pad_row() {
        let padded = pad2d(&[1.0f32, 2.0, 3.0], 1, 1, 3, 0, 2, true);
        assert_eq!(padded, &[2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn zero_pad_row() {
        let padded = pad2d(&[1.0f32, 2.0, 3.0], 1, 1, 3, 0, 1, false);
        assert_eq!(padded, &[0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn unpad_folds_border_gradients_back() {
        // Forward pad copies x[0] into pad[-1]; the transpose adds the
        // border gradient back onto x[0].
        let dpad = [1.0f32, 1.0, 1.0, 1.0, 1.0];
        let dx = unpad2d_grad(&dpad, 1, 1, 3, 0, 1, true);
        assert_eq!(dx, &[2.0, 1.0, 2.0]);
    }
}

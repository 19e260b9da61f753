//! Image-shaped ops over single `[channels, height, width]` tensors.

use super::Var;
use crate::tensor::{gemm, ConvGeom, Tensor};

/// A normalized `(x0, y0, x1, y1)` crop region held as plain numbers.
pub type CropBox = [f64; 4];

const BOX_MIN_SIZE: f64 = 0.01;

fn chw(v: &Var, op: &str) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "{op} expects [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

/// Bilinear taps for a continuous pixel coordinate, clamped to the border.
/// Returns `(i0, i1, frac, inside)`; `inside` is false when the coordinate
/// was clamped, in which case the coordinate derivative is zero.
fn taps(coord: f64, size: usize) -> (usize, usize, f64, bool) {
    let max = (size - 1) as f64;
    if coord <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if coord >= max {
        return (size - 1, size - 1, 0.0, false);
    }
    let i0 = coord.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, coord - i0 as f64, true)
}

/// Separable area-resampling weights from `m` equal cells spanning
/// `[lo, hi]` onto `size` unit pixels covering `[0, 1]`. All matrices are
/// `[size, m]`; `d_lo` and `d_hi` are derivatives with respect to the ends.
struct AreaWeights {
    w: Vec<f64>,
    d_lo: Vec<f64>,
    d_hi: Vec<f64>,
}

impl AreaWeights {
    fn new(lo: f64, hi: f64, m: usize, size: usize) -> Self {
        let s = size as f64;
        let mut w = vec![0.0; size * m];
        let mut d_lo = vec![0.0; size * m];
        let mut d_hi = vec![0.0; size * m];
        let edge = |c: usize| lo + (hi - lo) * c as f64 / m as f64;
        for j in 0..size {
            let (p0, p1) = (j as f64 / s, (j + 1) as f64 / s);
            for c in 0..m {
                let (e0, e1) = (edge(c), edge(c + 1));
                let overlap = p1.min(e1) - p0.max(e0);
                if overlap <= 0.0 {
                    continue;
                }
                let k = j * m + c;
                w[k] = s * overlap;
                let (t0, t1) = (c as f64 / m as f64, (c + 1) as f64 / m as f64);
                if e1 < p1 {
                    d_lo[k] += s * (1.0 - t1);
                    d_hi[k] += s * t1;
                }
                if e0 > p0 {
                    d_lo[k] -= s * (1.0 - t0);
                    d_hi[k] -= s * t0;
                }
            }
        }
        Self { w, d_lo, d_hi }
    }
}

impl Var {
    /// 2-D convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let (c, h, w) = chw(self, "conv2d");
        let ws = weight.shape();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv2d weight {ws:?} for input channels {c}");
        let (out_c, k) = (ws[0], ws[2]);
        let geom = ConvGeom { channels: c, height: h, width: w, kernel: k, stride, pad };
        let (oh, ow, p, ckk) = (geom.out_h(), geom.out_w(), geom.col_cols(), geom.col_rows());
        let cols = geom.im2col(self.value().data());
        let mut out = gemm(weight.value().data(), false, &cols, false, out_c, ckk, p);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [out_c]);
            for (row, bv) in out.chunks_mut(p).zip(b.value().data()) {
                for x in row.iter_mut() {
                    *x += bv;
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::from_parts(vec![out_c, oh, ow], out),
            parents,
            Box::new(move |g, parents, _| {
                let gy = g.data();
                let x = &parents[0];
                let wt = &parents[1];
                let gx = x.requires_grad().then(|| {
                    let dcols = gemm(wt.value().data(), true, gy, false, ckk, out_c, p);
                    Tensor::from_parts(vec![c, h, w], geom.col2im(&dcols))
                });
                let gw = wt.requires_grad().then(|| {
                    let cols = geom.im2col(x.value().data());
                    Tensor::from_parts(vec![out_c, c, k, k], gemm(gy, false, &cols, true, out_c, p, ckk))
                });
                let mut grads = vec![gx, gw];
                if parents.len() == 3 {
                    grads.push(Some(Tensor::from_parts(vec![out_c], gy.chunks(p).map(|r| r.iter().sum()).collect())));
                }
                grads
            }),
        )
    }

    /// Transposed 2-D convolution. `weight` is `[in, out, k, k]`; output size
    /// is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let (c, h, w) = chw(self, "conv_transpose2d");
        let ws = weight.shape();
        assert!(ws.len() == 4 && ws[0] == c && ws[2] == ws[3], "conv_transpose2d weight {ws:?}");
        let (out_c, k) = (ws[1], ws[2]);
        let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad);
        // The forward pass is the input-gradient of a conv over the output.
        let geom = ConvGeom { channels: out_c, height: oh, width: ow, kernel: k, stride, pad };
        debug_assert_eq!((geom.out_h(), geom.out_w()), (h, w));
        let (hw, okk) = (h * w, out_c * k * k);
        let cols = gemm(weight.value().data(), true, self.value().data(), false, okk, c, hw);
        let mut out = geom.col2im(&cols);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [out_c]);
            for (plane, bv) in out.chunks_mut(oh * ow).zip(b.value().data()) {
                for x in plane.iter_mut() {
                    *x += bv;
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::from_parts(vec![out_c, oh, ow], out),
            parents,
            Box::new(move |g, parents, _| {
                let gcols = geom.im2col(g.data());
                let x = &parents[0];
                let wt = &parents[1];
                let gx = x.requires_grad().then(|| {
                    Tensor::from_parts(vec![c, h, w], gemm(wt.value().data(), false, &gcols, false, c, okk, hw))
                });
                let gw = wt.requires_grad().then(|| {
                    Tensor::from_parts(vec![c, out_c, k, k], gemm(x.value().data(), false, &gcols, true, c, hw, okk))
                });
                let mut grads = vec![gx, gw];
                if parents.len() == 3 {
                    grads.push(Some(Tensor::from_parts(
                        vec![out_c],
                        g.data().chunks(oh * ow).map(|r| r.iter().sum()).collect(),
                    )));
                }
                grads
            }),
        )
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self) -> Var {
        let (c, h, w) = chw(self, "avg_pool2");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value().data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let b = ch * h * w;
                    out[(ch * oh + i) * ow + j] = 0.25
                        * (x[b + 2 * i * w + 2 * j]
                            + x[b + 2 * i * w + 2 * j + 1]
                            + x[b + (2 * i + 1) * w + 2 * j]
                            + x[b + (2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        Var::from_op(
            Tensor::from_parts(vec![c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(ch * h + i) * w + j] = 0.25 * g.data()[(ch * oh + i / 2) * ow + j / 2];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Repeated 2x2 average pooling down to `size x size`.
    pub fn downsample_to(&self, size: usize) -> Var {
        let mut v = self.clone();
        while v.shape()[1] > size {
            v = v.avg_pool2();
        }
        assert_eq!(v.shape()[1], size, "downsample_to: {:?} -> {size}", self.shape());
        v
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self) -> Var {
        let (c, h, w) = chw(self, "upsample_nearest2");
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.value().data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = x[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Var::from_op(
            Tensor::from_parts(vec![c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Per-channel normalization to zero mean and unit variance over the
    /// spatial extent of a single image.
    pub fn instance_norm(&self, eps: f64) -> Var {
        let (c, h, w) = chw(self, "instance_norm");
        let n = h * w;
        let mut out = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let x = &self.value().data()[ch * n..(ch + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        Var::from_op(
            Tensor::from_parts(vec![c, h, w], out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    let gy = &g.data()[ch * n..(ch + 1) * n];
                    let yv = &y.data()[ch * n..(ch + 1) * n];
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gy: f64 = gy.iter().zip(yv).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        gx[ch * n + i] = inv_std[ch] / n as f64 * (n as f64 * gy[i] - sum_g - yv[i] * sum_gy);
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Scale the channel vector at every pixel to unit length.
    pub fn channel_unit_normalize(&self, eps: f64) -> Var {
        let (c, h, w) = chw(self, "channel_unit_normalize");
        let n = h * w;
        let x = self.value().data();
        let norms: Vec<f64> = (0..n)
            .map(|p| ((0..c).map(|ch| x[ch * n + p] * x[ch * n + p]).sum::<f64>() + eps).sqrt())
            .collect();
        let out: Vec<f64> = (0..c * n).map(|i| x[i] / norms[i % n]).collect();
        Var::from_op(
            Tensor::from_parts(vec![c, h, w], out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let (g, y) = (g.data(), y.data());
                let mut gx = vec![0.0; c * n];
                for p in 0..n {
                    let dot: f64 = (0..c).map(|ch| g[ch * n + p] * y[ch * n + p]).sum();
                    for ch in 0..c {
                        let i = ch * n + p;
                        gx[i] = (g[i] - y[i] * dot) / norms[p];
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Warp an `[m, m]` mask into the region of a normalized `[4]` box on a
    /// `size x size` canvas. The mask is treated as piecewise constant over
    /// the box and each canvas pixel takes the area average of what it
    /// covers, so total mass is exactly `mean(mask) * box area * size^2`.
    /// Pixels not touching the box are zero. Differentiable in mask and box.
    pub fn warp_into_box(&self, bbox: &Var, size: usize) -> Var {
        let ms = self.shape();
        assert!(ms.len() == 2 && ms[0] == ms[1], "warp_into_box mask {ms:?}");
        assert_eq!(bbox.shape(), [4], "warp_into_box box");
        let m = ms[0];
        let b = bbox.value().data();
        let wx = AreaWeights::new(b[0], b[2], m, size);
        let wy = AreaWeights::new(b[1], b[3], m, size);
        // out = Wy * mask * Wx^T
        let tmp = gemm(self.value().data(), false, &wx.w, true, m, m, size);
        let out = gemm(&wy.w, false, &tmp, false, size, m, size);
        Var::from_op(
            Tensor::from_parts(vec![size, size], out),
            vec![self.clone(), bbox.clone()],
            Box::new(move |g, parents, _| {
                let g = g.data();
                let mask = parents[0].value().data();
                // gM = Wy^T G Wx
                let gw = gemm(g, false, &wx.w, false, size, size, m);
                let gm = gemm(&wy.w, true, &gw, false, m, size, m);
                // d/dx: sum(G . Wy M dWx^T) = sum((Wy M)^T G . dWx^T)
                let ym = gemm(&wy.w, false, mask, false, size, m, m);
                let gx = gemm(g, true, &ym, false, size, size, m);
                // d/dy: sum(G . dWy M Wx^T) = sum(G (M Wx^T)^T . dWy)
                let gy = gemm(g, false, &tmp, true, size, size, m);
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let gb = vec![dot(&gx, &wx.d_lo), dot(&gy, &wy.d_lo), dot(&gx, &wx.d_hi), dot(&gy, &wy.d_hi)];
                vec![Some(Tensor::from_parts(vec![m, m], gm)), Some(Tensor::from_parts(vec![4], gb))]
            }),
        )
    }

    /// Crop a normalized box out of a `[c, h, w]` image and bilinearly
    /// resample it to `out x out`. Differentiable in the image only.
    pub fn crop_resize(&self, crop: CropBox, out: usize) -> Var {
        let (c, h, w) = chw(self, "crop_resize");
        let [x0, y0, x1, y1] = crop;
        let sample_y: Vec<(usize, usize, f64)> = (0..out)
            .map(|a| {
                let v = y0 + (a as f64 + 0.5) / out as f64 * (y1 - y0);
                let (i0, i1, f, _) = taps(v * h as f64 - 0.5, h);
                (i0, i1, f)
            })
            .collect();
        let sample_x: Vec<(usize, usize, f64)> = (0..out)
            .map(|b| {
                let u = x0 + (b as f64 + 0.5) / out as f64 * (x1 - x0);
                let (i0, i1, f, _) = taps(u * w as f64 - 0.5, w);
                (i0, i1, f)
            })
            .collect();
        let x = self.value().data();
        let mut res = vec![0.0; c * out * out];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (a, &(r0, r1, fy)) in sample_y.iter().enumerate() {
                for (b, &(c0, c1, fx)) in sample_x.iter().enumerate() {
                    res[(ch * out + a) * out + b] = (1.0 - fy) * ((1.0 - fx) * plane[r0 * w + c0] + fx * plane[r0 * w + c1])
                        + fy * ((1.0 - fx) * plane[r1 * w + c0] + fx * plane[r1 * w + c1]);
                }
            }
        }
        Var::from_op(
            Tensor::from_parts(vec![c, out, out], res),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (a, &(r0, r1, fy)) in sample_y.iter().enumerate() {
                        for (b, &(c0, c1, fx)) in sample_x.iter().enumerate() {
                            let go = g.data()[(ch * out + a) * out + b];
                            plane[r0 * w + c0] += go * (1.0 - fy) * (1.0 - fx);
                            plane[r0 * w + c1] += go * (1.0 - fy) * fx;
                            plane[r1 * w + c0] += go * fy * (1.0 - fx);
                            plane[r1 * w + c1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Map raw `[n, 4]` box-head outputs `(cx, cy, log w, log h)` to valid
    /// normalized corners `(x0, y0, x1, y1)`: centres pass through a
    /// sigmoid, sizes are clamped to `[0.01, 1]`, and corners are clipped
    /// to the unit square. The result always satisfies `x0 < x1, y0 < y1`.
    pub fn box_from_params(&self) -> Var {
        let s = self.shape();
        assert!(s.len() == 2 && s[1] == 4, "box_from_params {s:?}");
        let n = s[0];
        let raw = self.value().data();
        let mut out = vec![0.0; 4 * n];
        for r in 0..n {
            let (x0, y0, x1, y1) = box_corners(&raw[4 * r..4 * r + 4]);
            out[4 * r..4 * r + 4].copy_from_slice(&[x0, y0, x1, y1]);
        }
        Var::from_op(
            Tensor::from_parts(vec![n, 4], out),
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let raw = parents[0].value().data();
                let mut gr = vec![0.0; 4 * n];
                for r in 0..n {
                    let go = &g.data()[4 * r..4 * r + 4];
                    for axis in 0..2 {
                        let c = super::ops::sigmoid(raw[4 * r + axis]);
                        let e = raw[4 * r + 2 + axis].exp();
                        let size = e.clamp(BOX_MIN_SIZE, 1.0);
                        let size_free = e > BOX_MIN_SIZE && e < 1.0;
                        let lo_free = c - size / 2.0 > 0.0;
                        let hi_free = c + size / 2.0 < 1.0;
                        let (g_lo, g_hi) = (go[axis], go[axis + 2]);
                        let mut d_c = 0.0;
                        let mut d_size = 0.0;
                        if lo_free {
                            d_c += g_lo;
                            d_size -= 0.5 * g_lo;
                        }
                        if hi_free {
                            d_c += g_hi;
                            d_size += 0.5 * g_hi;
                        }
                        gr[4 * r + axis] = d_c * c * (1.0 - c);
                        gr[4 * r + 2 + axis] = if size_free { d_size * e } else { 0.0 };
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, 4], gr))]
            }),
        )
    }

    /// Add a `[c]` bias to every pixel of a `[c, h, w]` map.
    pub fn add_channel_bias(&self, bias: &Var) -> Var {
        let (c, h, w) = chw(self, "add_channel_bias");
        assert_eq!(bias.shape(), [c]);
        let n = h * w;
        let mut out = self.value().clone();
        for (plane, b) in out.data_mut().chunks_mut(n).zip(bias.value().data()) {
            for x in plane.iter_mut() {
                *x += b;
            }
        }
        Var::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_parts(vec![c], g.data().chunks(n).map(|p| p.iter().sum()).collect())),
                ]
            }),
        )
    }
}

/// Box-head parameterization shared by the op and by plain inference.
pub(crate) fn box_corners(raw: &[f64]) -> (f64, f64, f64, f64) {
    let cx = super::ops::sigmoid(raw[0]);
    let cy = super::ops::sigmoid(raw[1]);
    let w = raw[2].exp().clamp(BOX_MIN_SIZE, 1.0);
    let h = raw[3].exp().clamp(BOX_MIN_SIZE, 1.0);
    (
        (cx - w / 2.0).max(0.0),
        (cy - h / 2.0).max(0.0),
        (cx + w / 2.0).min(1.0),
        (cy + h / 2.0).min(1.0),
    )
}

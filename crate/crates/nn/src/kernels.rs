//! Raw array kernels shared by the tape and the inference path.
//!
//! Spatial data is handled as `[depth, height, width]`; 2-D images use
//! `depth = 1` with a unit kernel and no padding along depth.

use crate::exec::Execution;
use crate::tensor::gemm;

/// Convolution geometry for a batch of `[C, D, H, W]` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_size: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn out_size(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (self.in_size[a] + 2 * self.padding[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_size.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_size().iter().product::<usize>()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let [id, ih, iw] = g.in_size;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_size();
    let ncols = od * oh * ow;
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for zd in 0..od {
                        let sd = (zd * g.stride[0] + a) as isize - g.padding[0] as isize;
                        for zh in 0..oh {
                            let sh = (zh * g.stride[1] + b) as isize - g.padding[1] as isize;
                            let base = (zd * oh + zh) * ow;
                            if sd < 0 || sd >= id as isize || sh < 0 || sh >= ih as isize {
                                dst[base..base + ow].iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let src = (c * id + sd as usize) * ih + sh as usize;
                            let src = &x[src * iw..(src + 1) * iw];
                            for zw in 0..ow {
                                let sw = (zw * g.stride[2] + e) as isize - g.padding[2] as isize;
                                dst[base + zw] = if sw < 0 || sw >= iw as isize {
                                    0.0
                                } else {
                                    src[sw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [id, ih, iw] = g.in_size;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_size();
    let ncols = od * oh * ow;
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for zd in 0..od {
                        let sd = (zd * g.stride[0] + a) as isize - g.padding[0] as isize;
                        if sd < 0 || sd >= id as isize {
                            continue;
                        }
                        for zh in 0..oh {
                            let sh = (zh * g.stride[1] + b) as isize - g.padding[1] as isize;
                            if sh < 0 || sh >= ih as isize {
                                continue;
                            }
                            let base = (zd * oh + zh) * ow;
                            let dst = (c * id + sd as usize) * ih + sh as usize;
                            let dst = &mut dx[dst * iw..(dst + 1) * iw];
                            for zw in 0..ow {
                                let sw = (zw * g.stride[2] + e) as isize - g.padding[2] as isize;
                                if sw >= 0 && sw < iw as isize {
                                    dst[sw as usize] += src[base + zw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; `w` is `[out_ch, patch_len]`.
pub fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    exec: Execution,
) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let ncols: usize = g.out_size().iter().product();
    let plen = g.patch_len();
    let mut y = vec![0.0; batch * out_len];
    exec.for_each_chunk(&mut y, out_len, |s, ys| {
        let mut cols = vec![0.0; plen * ncols];
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut cols);
        for (o, row) in ys.chunks_mut(ncols).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(g.out_ch, plen, ncols, 1.0, w, false, &cols, false, 1.0, ys);
    });
    y
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is skipped when
/// `need_input` is false.
pub fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_input: bool,
    need_params: bool,
    exec: Execution,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let ncols: usize = g.out_size().iter().product();
    let plen = g.patch_len();
    let per_sample = exec.map(batch, |s| {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        let mut dw = Vec::new();
        let mut db = Vec::new();
        if need_params {
            let mut cols = vec![0.0; plen * ncols];
            im2col(g, &x[s * in_len..(s + 1) * in_len], &mut cols);
            dw = vec![0.0; g.out_ch * plen];
            gemm(g.out_ch, ncols, plen, 1.0, dys, false, &cols, true, 0.0, &mut dw);
            db = dys.chunks(ncols).map(|r| r.iter().sum()).collect();
        }
        let dx = need_input.then(|| {
            let mut dcols = vec![0.0; plen * ncols];
            gemm(plen, g.out_ch, ncols, 1.0, w, true, dys, false, 0.0, &mut dcols);
            let mut dx = vec![0.0; in_len];
            col2im(g, &dcols, &mut dx);
            dx
        });
        (dx, dw, db)
    });
    let mut dw = vec![0.0; g.out_ch * plen];
    let mut db = vec![0.0; g.out_ch];
    let mut dx = need_input.then(|| Vec::with_capacity(batch * in_len));
    for (dxs, dws, dbs) in per_sample {
        if need_params {
            dw.iter_mut().zip(&dws).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&dbs).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(dxs)) = (dx.as_mut(), dxs) {
            acc.extend_from_slice(&dxs);
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbour upsampling of `[rows, D, H, W]` blocks.
pub fn upsample_forward(rows: usize, size: [usize; 3], factor: [usize; 3], x: &[f64]) -> Vec<f64> {
    let [d, h, w] = size;
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut y = vec![0.0; rows * od * oh * ow];
    for r in 0..rows {
        let xs = &x[r * d * h * w..(r + 1) * d * h * w];
        let ys = &mut y[r * od * oh * ow..(r + 1) * od * oh * ow];
        for zd in 0..od {
            for zh in 0..oh {
                let src = ((zd / fd) * h + zh / fh) * w;
                let dst = (zd * oh + zh) * ow;
                for zw in 0..ow {
                    ys[dst + zw] = xs[src + zw / fw];
                }
            }
        }
    }
    y
}

pub fn upsample_backward(rows: usize, size: [usize; 3], factor: [usize; 3], dy: &[f64]) -> Vec<f64> {
    let [d, h, w] = size;
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut dx = vec![0.0; rows * d * h * w];
    for r in 0..rows {
        let dxs = &mut dx[r * d * h * w..(r + 1) * d * h * w];
        let dys = &dy[r * od * oh * ow..(r + 1) * od * oh * ow];
        for zd in 0..od {
            for zh in 0..oh {
                let dst = ((zd / fd) * h + zh / fh) * w;
                let src = (zd * oh + zh) * ow;
                for zw in 0..ow {
                    dxs[dst + zw / fw] += dys[src + zw];
                }
            }
        }
    }
    dx
}

/// Central-difference stencil order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Stencil {
    /// `(x[i+1] - x[i-1]) / 2h`.
    #[default]
    Second,
    /// `(-x[i+2] + 8x[i+1] - 8x[i-1] + x[i-2]) / 12h`.
    Fourth,
}

/// Central difference along one axis of `[rows, D, H, W]` blocks, with zero
/// values assumed outside the block.
///
/// Both stencils are antisymmetric, so the transpose is the negated operator.
pub fn central_difference(
    rows: usize,
    size: [usize; 3],
    axis: usize,
    spacing: f64,
    stencil: Stencil,
    x: &[f64],
) -> Vec<f64> {
    let [d, h, w] = size;
    let block = d * h * w;
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let n = size[axis.min(2)];
    let mut y = vec![0.0; rows * block];
    for r in 0..rows {
        let xs = &x[r * block..(r + 1) * block];
        let ys = &mut y[r * block..(r + 1) * block];
        let at = |idx: usize, pos: usize, k: isize| {
            let p = pos as isize + k;
            if p < 0 || p >= n as isize {
                0.0
            } else {
                xs[(idx as isize + k * stride as isize) as usize]
            }
        };
        match stencil {
            Stencil::Second => {
                let inv = 0.5 / spacing;
                for (idx, out) in ys.iter_mut().enumerate() {
                    let pos = (idx / stride) % n;
                    *out = (at(idx, pos, 1) - at(idx, pos, -1)) * inv;
                }
            }
            Stencil::Fourth => {
                let inv = 1.0 / (12.0 * spacing);
                for (idx, out) in ys.iter_mut().enumerate() {
                    let pos = (idx / stride) % n;
                    *out = (8.0 * (at(idx, pos, 1) - at(idx, pos, -1)) - (at(idx, pos, 2) - at(idx, pos, -2))) * inv;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv2d(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [_, ih, iw] = g.in_size;
        let [_, kh, kw] = g.kernel;
        let [_, oh, ow] = g.out_size();
        let mut y = vec![0.0; g.out_ch * oh * ow];
        for o in 0..g.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_ch {
                        for a in 0..kh {
                            for e in 0..kw {
                                let si = (i * g.stride[1] + a) as isize - g.padding[1] as isize;
                                let sj = (j * g.stride[2] + e) as isize - g.padding[2] as isize;
                                if si >= 0 && sj >= 0 && (si as usize) < ih && (sj as usize) < iw {
                                    acc += w[((o * g.in_ch + c) * kh + a) * kw + e]
                                        * x[(c * ih + si as usize) * iw + sj as usize];
                                }
                            }
                        }
                    }
                    y[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = ConvGeom {
            in_ch: 2,
            out_ch: 3,
            in_size: [1, 7, 6],
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..g.out_ch * g.patch_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let y = conv_forward(&g, 1, &x, &w, &b, Execution::Sequential);
        let expect = naive_conv2d(&g, &x, &w, &b);
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let size = [1, 3, 2];
        let f = [1, 2, 2];
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y = upsample_forward(2, size, f, &x);
        assert_eq!(y.len(), 2 * 24);
        let dy: Vec<f64> = (0..48).map(|i| (i as f64).sqrt()).collect();
        let dx = upsample_backward(2, size, f, &dy);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn central_difference_is_skew() {
        let size = [1, 5, 4];
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let z: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        for stencil in [Stencil::Second, Stencil::Fourth] {
            for axis in 1..3 {
                let cx = central_difference(1, size, axis, 0.5, stencil, &x);
                let cz = central_difference(1, size, axis, 0.5, stencil, &z);
                let a: f64 = cx.iter().zip(&z).map(|(p, q)| p * q).sum();
                let b: f64 = x.iter().zip(&cz).map(|(p, q)| p * q).sum();
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stencils_exact_on_low_degree_polynomials() {
        let n = 12;
        let h = 0.25;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(3)).collect();
        let d2 = central_difference(1, [1, 1, n], 2, h, Stencil::Second, &x);
        let d4 = central_difference(1, [1, 1, n], 2, h, Stencil::Fourth, &x);
        for i in 2..n - 2 {
            let t = i as f64 * h;
            assert!((d4[i] - 3.0 * t * t).abs() < 1e-12);
            assert!((d2[i] - 3.0 * t * t - h * h).abs() < 1e-12);
        }
    }
}

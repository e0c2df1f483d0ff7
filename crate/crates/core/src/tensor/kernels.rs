//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Accumulators are `f64`; results are narrowed to the storage type once.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding.0 - self.k_h) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding.1 - self.k_w) / self.stride.1 + 1
    }

    /// Output index range `[lo, hi)` along one axis for which the kernel tap
    /// `tap` lands inside the unpadded input.
    fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // need 0 <= o*stride + tap - pad < in_len
        let tap = tap as isize;
        let pad = pad as isize;
        let s = stride as isize;
        let lo_num = pad - tap;
        let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
        let hi_num = in_len as isize - 1 + pad - tap;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward<F: Element>(
    geo: &Conv2dGeometry,
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (ih, iw) = (geo.in_h, geo.in_w);
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let mut out = Vec::with_capacity(geo.batch * geo.out_channels * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];
    for n in 0..geo.batch {
        for o in 0..geo.out_channels {
            let b = bias.map_or(0.0, |b| b[o].to_f64());
            acc.iter_mut().for_each(|a| *a = b);
            for i in 0..geo.in_channels {
                let plane = &input[(n * geo.in_channels + i) * ih * iw..][..ih * iw];
                let wbase = (o * geo.in_channels + i) * geo.k_h * geo.k_w;
                for ky in 0..geo.k_h {
                    let (y0, y1) = Conv2dGeometry::valid_range(ky, ph, sh, ih, oh);
                    for kx in 0..geo.k_w {
                        let w = weight[wbase + ky * geo.k_w + kx].to_f64();
                        let (x0, x1) = Conv2dGeometry::valid_range(kx, pw, sw, iw, ow);
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let row = &plane[iy * iw..][..iw];
                            let arow = &mut acc[oy * ow..][..ow];
                            if sw == 1 {
                                let ix0 = x0 + kx - pw;
                                for (a, &v) in arow[x0..x1].iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                                    *a += w * v.to_f64();
                                }
                            } else {
                                for ox in x0..x1 {
                                    arow[ox] += w * row[ox * sw + kx - pw].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| F::from_f64(a)));
        }
    }
    out
}

pub struct Conv2dGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Element>(
    geo: &Conv2dGeometry,
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    need: (bool, bool, bool),
) -> Conv2dGrads<F> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (ih, iw) = (geo.in_h, geo.in_w);
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (kh, kw) = (geo.k_h, geo.k_w);
    let (ci, co) = (geo.in_channels, geo.out_channels);

    let grad_input = need.0.then(|| {
        let mut gi = vec![0.0f64; geo.batch * ci * ih * iw];
        for n in 0..geo.batch {
            for o in 0..co {
                let gplane = &grad_out[(n * co + o) * oh * ow..][..oh * ow];
                for i in 0..ci {
                    let giplane = &mut gi[(n * ci + i) * ih * iw..][..ih * iw];
                    let wbase = (o * ci + i) * kh * kw;
                    for ky in 0..kh {
                        let (y0, y1) = Conv2dGeometry::valid_range(ky, ph, sh, ih, oh);
                        for kx in 0..kw {
                            let w = weight[wbase + ky * kw + kx].to_f64();
                            let (x0, x1) = Conv2dGeometry::valid_range(kx, pw, sw, iw, ow);
                            for oy in y0..y1 {
                                let iy = oy * sh + ky - ph;
                                let grow = &gplane[oy * ow..][..ow];
                                let irow = &mut giplane[iy * iw..][..iw];
                                for ox in x0..x1 {
                                    irow[ox * sw + kx - pw] += w * grow[ox].to_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
        gi.into_iter().map(F::from_f64).collect()
    });

    let grad_weight = need.1.then(|| {
        let mut gw = vec![0.0f64; co * ci * kh * kw];
        for o in 0..co {
            for i in 0..ci {
                let wbase = (o * ci + i) * kh * kw;
                for n in 0..geo.batch {
                    let gplane = &grad_out[(n * co + o) * oh * ow..][..oh * ow];
                    let plane = &input[(n * ci + i) * ih * iw..][..ih * iw];
                    for ky in 0..kh {
                        let (y0, y1) = Conv2dGeometry::valid_range(ky, ph, sh, ih, oh);
                        for kx in 0..kw {
                            let (x0, x1) = Conv2dGeometry::valid_range(kx, pw, sw, iw, ow);
                            let mut s = 0.0f64;
                            for oy in y0..y1 {
                                let iy = oy * sh + ky - ph;
                                let grow = &gplane[oy * ow..][..ow];
                                let irow = &plane[iy * iw..][..iw];
                                for ox in x0..x1 {
                                    s += grow[ox].to_f64() * irow[ox * sw + kx - pw].to_f64();
                                }
                            }
                            gw[wbase + ky * kw + kx] += s;
                        }
                    }
                }
            }
        }
        gw.into_iter().map(F::from_f64).collect()
    });

    let grad_bias = need.2.then(|| {
        (0..co)
            .map(|o| {
                let mut s = 0.0f64;
                for n in 0..geo.batch {
                    s += grad_out[(n * co + o) * oh * ow..][..oh * ow]
                        .iter()
                        .map(|v| v.to_f64())
                        .sum::<f64>();
                }
                F::from_f64(s)
            })
            .collect()
    });

    Conv2dGrads { input: grad_input, weight: grad_weight, bias: grad_bias }
}

/// Non-overlapping max pool over NCHW; remainder rows/columns are dropped.
/// Returns the pooled values and, per output, the flat input index of the
/// maximum (first occurrence on ties).
pub fn maxpool2d_forward<F: Element>(
    shape: &[usize],
    input: &[F],
    pool: (usize, usize),
) -> (Vec<F>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / pool.0, w / pool.1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * pool.0 * w + ox * pool.1;
                for dy in 0..pool.0 {
                    for dx in 0..pool.1 {
                        let j = base + (oy * pool.0 + dy) * w + ox * pool.1 + dx;
                        if input[j] > input[best] {
                            best = j;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Per-channel batch normalization statistics over (N, H, W).
pub fn channel_moments<F: Element>(shape: &[usize], input: &[F]) -> (Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += input[(b * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            q += input[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

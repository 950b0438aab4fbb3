//! Raw numeric kernels shared by the forward and backward passes.

/// `out[p×r] += a[p×q] · b[q×r]`
pub(crate) fn mm_acc(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[p×q] += g[p×r] · b[q×r]ᵀ`
pub(crate) fn mm_bt_acc(g: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            out[i * q + k] += dot(grow, brow);
        }
    }
}

/// `out[q×r] += a[p×q]ᵀ · g[p×r]`
pub(crate) fn mm_at_acc(a: &[f64], g: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    /// Visits every (output row, input row, output column range, input column offset)
    /// overlap for one kernel tap under zero same-padding.
    #[inline]
    fn taps(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let x_lo = pw.saturating_sub(kx);
        let x_hi = (self.w + pw).saturating_sub(kx).min(self.w);
        if x_lo >= x_hi {
            return;
        }
        for y in 0..self.h {
            let iy = y + ky;
            if iy < ph || iy - ph >= self.h {
                continue;
            }
            let iy = iy - ph;
            // output columns [x_lo, x_hi) read input columns shifted by kx - pw
            f(y, iy, x_lo, x_hi, x_lo + kx - pw);
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], bias: &[f64], d: ConvDims, out: &mut [f64]) {
    let plane = d.h * d.w;
    for co in 0..d.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    d.taps(ky, kx, |y, iy, x_lo, x_hi, ix_lo| {
                        let n = x_hi - x_lo;
                        let dst = &mut o[y * d.w + x_lo..y * d.w + x_lo + n];
                        let src = &xin[iy * d.w + ix_lo..iy * d.w + ix_lo + n];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += wv * b;
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_input(g: &[f64], k: &[f64], d: ConvDims, dx: &mut [f64]) {
    let plane = d.h * d.w;
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let dxi = &mut dx[ci * plane..(ci + 1) * plane];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    d.taps(ky, kx, |y, iy, x_lo, x_hi, ix_lo| {
                        let n = x_hi - x_lo;
                        let src = &go[y * d.w + x_lo..y * d.w + x_lo + n];
                        let dst = &mut dxi[iy * d.w + ix_lo..iy * d.w + ix_lo + n];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += wv * b;
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_kernel(g: &[f64], x: &[f64], d: ConvDims, dk: &mut [f64], db: &mut [f64]) {
    let plane = d.h * d.w;
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        db[co] += go.iter().sum::<f64>();
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0;
                    d.taps(ky, kx, |y, iy, x_lo, x_hi, ix_lo| {
                        let n = x_hi - x_lo;
                        acc += dot(
                            &go[y * d.w + x_lo..y * d.w + x_lo + n],
                            &xin[iy * d.w + ix_lo..iy * d.w + ix_lo + n],
                        );
                    });
                    dk[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}

/// Output extent of a non-overlapping ceil-mode pool.
pub(crate) fn pooled_len(n: usize, p: usize) -> usize {
    n.div_ceil(p)
}

/// Non-overlapping ceil-mode max pooling; returns the flat argmax (first occurrence) per output.
pub(crate) fn max_pool_forward(x: &[f64], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (pooled_len(h, ph), pooled_len(w, pw));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let y_hi = ((oy + 1) * ph).min(h);
            for ox in 0..ow {
                let x_hi = ((ox + 1) * pw).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * ph * w + ox * pw;
                for y in oy * ph..y_hi {
                    for xx in ox * pw..x_hi {
                        let i = base + y * w + xx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook quadruple loop used as an independent reference for the sliced kernel.
    fn conv_reference(x: &[f64], k: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.c_out * d.h * d.w];
        let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
        for co in 0..d.c_out {
            for y in 0..d.h {
                for xx in 0..d.w {
                    let mut acc = b[co];
                    for ci in 0..d.c_in {
                        for ky in 0..d.kh {
                            for kx in 0..d.kw {
                                let iy = y as isize + ky as isize - ph;
                                let ix = xx as isize + kx as isize - pw;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                acc += k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx]
                                    * x[(ci * d.h + iy as usize) * d.w + ix as usize];
                            }
                        }
                    }
                    out[(co * d.h + y) * d.w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sliced_conv_matches_reference() {
        let d = ConvDims { c_in: 2, c_out: 3, h: 5, w: 4, kh: 3, kw: 5 };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..90).map(|i| ((i * 5) % 13) as f64 / 7.0 - 0.8).collect();
        let b = vec![0.1, -0.2, 0.3];
        let mut out = vec![0.0; 60];
        conv2d_forward(&x, &k, &b, d, &mut out);
        let r = conv_reference(&x, &k, &b, d);
        for (a, e) in out.iter().zip(&r) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ceil_mode_pool_shapes() {
        let x: Vec<f64> = (0..15).map(f64::from).collect();
        let (out, arg) = max_pool_forward(&x, 1, 3, 5, 2, 2);
        assert_eq!(out, vec![6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
        assert_eq!(arg, vec![6, 8, 9, 11, 13, 14]);
    }
}

//! 3x3 "same" cross-correlation kernels with zero padding equal to the
//! dilation. Loops are arranged so the innermost work is a contiguous
//! row segment, which the compiler vectorizes.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub dilation: usize,
}

/// Valid output range `[lo, hi)` along one axis for tap offset `off`.
#[inline]
fn span(len: usize, off: isize) -> (usize, usize) {
    if off >= 0 {
        (0, len.saturating_sub(off as usize))
    } else {
        (((-off) as usize).min(len), len)
    }
}

#[inline]
fn taps(dilation: usize) -> [(usize, isize, isize); 9] {
    let d = dilation as isize;
    let mut out = [(0usize, 0isize, 0isize); 9];
    for (k, slot) in out.iter_mut().enumerate() {
        let ky = (k / 3) as isize - 1;
        let kx = (k % 3) as isize - 1;
        *slot = (k, ky * d, kx * d);
    }
    out
}

pub(crate) fn forward<T: Real>(
    g: ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane = g.h * g.w;
    for b in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * plane..][..plane];
            let init = bias.map_or(T::zero(), |bs| bs[co]);
            o.iter_mut().for_each(|v| *v = init);
            for ci in 0..g.cin {
                let x = &input[(b * g.cin + ci) * plane..][..plane];
                let wk = &weight[(co * g.cin + ci) * 9..][..9];
                for (k, dy, dx) in taps(g.dilation) {
                    let wv = wk[k];
                    if wv == T::zero() {
                        continue;
                    }
                    let (y0, y1) = span(g.h, dy);
                    let (x0, x1) = span(g.w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[y * g.w + x0..y * g.w + x1];
                        let irow = &x[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input adjoint: `gin += conv_transpose(gout, weight)`.
pub(crate) fn backward_input<T: Real>(g: ConvGeom, gout: &[T], weight: &[T], gin: &mut [T]) {
    let plane = g.h * g.w;
    for b in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let gi = &mut gin[(b * g.cin + ci) * plane..][..plane];
                let wk = &weight[(co * g.cin + ci) * 9..][..9];
                for (k, dy, dx) in taps(g.dilation) {
                    let wv = wk[k];
                    if wv == T::zero() {
                        continue;
                    }
                    let (y0, y1) = span(g.h, dy);
                    let (x0, x1) = span(g.w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * g.w + x0..y * g.w + x1];
                        let irow = &mut gi[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                        for (iv, &gv) in irow.iter_mut().zip(grow) {
                            *iv += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias adjoints.
pub(crate) fn backward_params<T: Real>(
    g: ConvGeom,
    gout: &[T],
    input: &[T],
    gweight: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let plane = g.h * g.w;
    if let Some(gb) = gbias {
        for b in 0..g.n {
            for (co, slot) in gb.iter_mut().enumerate() {
                let go = &gout[(b * g.cout + co) * plane..][..plane];
                *slot += go.iter().copied().sum::<T>();
            }
        }
    }
    let Some(gw) = gweight else { return };
    for b in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let x = &input[(b * g.cin + ci) * plane..][..plane];
                let gk = &mut gw[(co * g.cin + ci) * 9..][..9];
                for (k, dy, dx) in taps(g.dilation) {
                    let (y0, y1) = span(g.h, dy);
                    let (x0, x1) = span(g.w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * g.w + x0..y * g.w + x1];
                        let irow = &x[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                        let mut row = T::zero();
                        for (&gv, &iv) in grow.iter().zip(irow) {
                            row += gv * iv;
                        }
                        acc += row;
                    }
                    gk[k] += acc;
                }
            }
        }
    }
}

/// Multiply-accumulate count of one forward pass.
pub fn conv_macs(n: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (n * cin * cout * h * w * 9) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_clips_to_image() {
        assert_eq!(span(5, 0), (0, 5));
        assert_eq!(span(5, 1), (0, 4));
        assert_eq!(span(5, -2), (2, 5));
        assert_eq!(span(2, 3), (0, 0));
        assert_eq!(span(2, -3), (2, 2));
    }
}

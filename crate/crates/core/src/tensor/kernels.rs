//! Raw numeric kernels on flat buffers. No autodiff here.

use crate::error::{Error, Result};

/// Resolved shapes of one (grouped) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a convolution along one spatial axis, if it is at least 1.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeometry {
    /// Validates `x: [B, C_in, H, W]` against `w: [C_out, C_in/groups, K, K]`.
    pub fn new(
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::RankMismatch {
                op,
                expected: 4,
                got: x.len(),
            });
        }
        if w.len() != 4 {
            return Err(Error::RankMismatch {
                op,
                expected: 4,
                got: w.len(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry {
                op,
                detail: "stride must be at least 1".into(),
            });
        }
        if groups == 0 || x[1] % groups != 0 || w[0] % groups != 0 {
            return Err(Error::InvalidGeometry {
                op,
                detail: format!(
                    "channels (in {}, out {}) not divisible by groups {groups}",
                    x[1], w[0]
                ),
            });
        }
        let c_in = x[1];
        if w[1] * groups != c_in {
            return Err(Error::ShapeMismatch {
                op,
                axis: 1,
                expected: c_in / groups,
                got: w[1],
            });
        }
        if w[2] != w[3] {
            return Err(Error::ShapeMismatch {
                op,
                axis: 3,
                expected: w[2],
                got: w[3],
            });
        }
        let k = w[2];
        let out_h = conv_out_extent(x[2], k, stride, padding);
        let out_w = conv_out_extent(x[3], k, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h >= 1 && out_w >= 1 => Ok(Self {
                batch: x[0],
                c_in,
                h: x[2],
                w: x[3],
                c_out: w[0],
                k,
                stride,
                padding,
                groups,
                out_h,
                out_w,
            }),
            _ => Err(Error::InvalidGeometry {
                op,
                detail: format!(
                    "input {}x{} with kernel {k}, stride {stride}, padding {padding} has empty output",
                    x[2], x[3]
                ),
            }),
        }
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_h, self.out_w]
    }

    /// Input row/column touched by output position `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Visits every (output, input, weight) flat-index triple of the convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (cin_g, cout_g, k) = (self.cin_per_group(), self.cout_per_group(), self.k);
        for b in 0..self.batch {
            for oc in 0..self.c_out {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let x_base = (b * self.c_in + ic) * self.h;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wi = ((oc * cin_g + icg) * k + kh) * k + kw;
                            for oh in 0..self.out_h {
                                let Some(ih) = self.src(oh, kh, self.h) else {
                                    continue;
                                };
                                let out_row = ((b * self.c_out + oc) * self.out_h + oh) * self.out_w;
                                let x_row = (x_base + ih) * self.w;
                                for ow in 0..self.out_w {
                                    if let Some(iw) = self.src(ow, kw, self.w) {
                                        f(out_row + ow, x_row + iw, wi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    if let Some(bias) = bias {
        for (i, o) in out.iter_mut().enumerate() {
            *o = bias[(i / plane) % g.c_out];
        }
    }
    g.for_each_tap(|o, xi, wi| out[o] += x[xi] * w[wi]);
    out
}

pub fn conv2d_backward_input(g: &ConvGeometry, w: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
    g.for_each_tap(|o, xi, wi| dx[xi] += grad_out[o] * w[wi]);
    dx
}

pub fn conv2d_backward_weight(g: &ConvGeometry, x: &[f64], grad_out: &[f64], w_len: usize) -> Vec<f64> {
    let mut dw = vec![0.0; w_len];
    g.for_each_tap(|o, xi, wi| dw[wi] += grad_out[o] * x[xi]);
    dw
}

pub fn conv2d_backward_bias(g: &ConvGeometry, grad_out: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut db = vec![0.0; g.c_out];
    for (i, v) in grad_out.iter().enumerate() {
        db[(i / plane) % g.c_out] += v;
    }
    db
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[rows, cols] -> [cols, rows]`.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable softmax along the middle axis of an `(outer, n, inner)` view.
pub fn softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..n {
                out[idx(j)] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(conv_out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(conv_out_extent(7, 1, 2, 0), Some(4));
    }

    #[test]
    fn geometry_rejects_group_mismatch() {
        let err = ConvGeometry::new("t", &[1, 4, 3, 3], &[4, 2, 3, 3], 1, 1, 3).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry { .. }));
        let err = ConvGeometry::new("t", &[1, 4, 3, 3], &[4, 3, 3, 3], 1, 1, 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { axis: 1, .. }));
    }

    #[test]
    fn geometry_rejects_empty_output() {
        let err = ConvGeometry::new("t", &[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry { .. }));
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }
}

use super::autograd::Op;
use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of one 2-D cross-correlation, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, c_in, h, wd) = match *x {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("conv2d", x, w)),
        };
        let [c_out, wc_in, kh, kw] = *w else {
            return Err(Error::shape("conv2d", x, w));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (wd + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds one sample `[C_in, H, W]` into `[C_in·kh·kw, H'·W']`.
    pub fn im2col<E: Element>(&self, x: &[E], cols: &mut [E]) {
        let op = self.out_pixels();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * op;
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        let dst = &mut cols[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(E::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = (ox * self.stride + j) as isize - self.padding as isize;
                            *d = if xx < 0 || xx >= self.w as isize {
                                E::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds columns back into `dx`.
    pub fn col2im<E: Element>(&self, cols: &[E], dx: &mut [E]) {
        let op = self.out_pixels();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * op;
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.w_out {
                            let xx = (ox * self.stride + j) as isize - self.padding as isize;
                            if xx >= 0 && (xx as usize) < self.w {
                                let d = &mut dx[base + xx as usize];
                                *d = *d + cols[row + oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `self` is `[C_in, H, W]` or a batch `[B, C_in, H, W]`; `weight` is
    /// `[C_out, C_in, kh, kw]`. The output keeps the input's rank.
    pub fn conv2d(&self, weight: &Tensor<E>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        let g = ConvGeometry::new(self.shape(), weight.shape(), stride, padding)?;
        let (pl, opx) = (g.patch_len(), g.out_pixels());
        let mut out = vec![E::zero(); g.batch * g.c_out * opx];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![E::zero(); pl * opx]
        };
        for b in 0..g.batch {
            let xb = &self.data()[b * g.in_len()..(b + 1) * g.in_len()];
            let colsb: &[E] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * g.c_out * opx..(b + 1) * g.c_out * opx];
            gemm(g.c_out, pl, opx, weight.data(), false, colsb, false, ob, E::zero());
        }
        let shape = if self.ndim() == 3 {
            vec![g.c_out, g.h_out, g.w_out]
        } else {
            vec![g.batch, g.c_out, g.h_out, g.w_out]
        };
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                geom: g,
            },
        ))
    }
}

/// Gradients of a convolution with respect to input and weight.
pub(crate) fn conv2d_backward<E: Element>(
    g: &ConvGeometry,
    x: &[E],
    w: &[E],
    grad_out: &[E],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let (pl, opx) = (g.patch_len(), g.out_pixels());
    let mut dx = need_dx.then(|| vec![E::zero(); g.batch * g.in_len()]);
    let mut dw = need_dw.then(|| vec![E::zero(); g.c_out * pl]);
    let mut cols = vec![E::zero(); if g.is_pointwise() { 0 } else { pl * opx }];
    let mut dcols = vec![E::zero(); if need_dx { pl * opx } else { 0 }];
    for b in 0..g.batch {
        let gb = &grad_out[b * g.c_out * opx..(b + 1) * g.c_out * opx];
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        if let Some(dw) = dw.as_mut() {
            let colsb: &[E] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(g.c_out, opx, pl, gb, false, colsb, true, dw, E::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(pl, g.c_out, opx, w, true, gb, false, dxb, E::one());
            } else {
                gemm(pl, g.c_out, opx, w, true, gb, false, &mut dcols, E::zero());
                g.col2im(&dcols, dxb);
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation, single sample.
    fn direct_conv(
        x: &[f64],
        (c_in, h, w): (usize, usize, usize),
        k: &[f64],
        (c_out, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += x[(c * h + y as usize) * w + xx as usize]
                                        * k[((o * c_in + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_example() {
        let xs: Vec<f64> = (1..=9).map(f64::from).collect();
        let oracle = direct_conv(&xs, (1, 3, 3), &[1.0; 9], (1, 3, 3), 1, 1);
        assert_eq!(oracle[4], 45.0);
        assert_eq!(oracle[0], 12.0);

        let x = Tensor::<f64>::from_f64(&[1, 3, 3], &xs).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1.0; 9]).unwrap();
        let y = x.conv2d(&w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.to_vec(), oracle);
    }

    #[test]
    fn identity_kernel_and_stride() {
        let xs: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = Tensor::<f64>::from_f64(&[1, 4, 4], &xs).unwrap();
        let one = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        assert_eq!(x.conv2d(&one, 1, 0).unwrap().to_vec(), xs);
        assert_eq!(x.conv2d(&one, 2, 0).unwrap().shape(), &[1, 2, 2]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(x.conv2d(&w, 1, 0), Err(Error::Dimension(_))));
        assert!(x.conv2d(&w, 1, 1).is_ok());
        let wrong_c = Tensor::<f64>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(matches!(x.conv2d(&wrong_c, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn batched_matches_direct_oracle() {
        let (b, ci, h, w, co, k) = (2, 3, 5, 4, 2, 3);
        let xs: Vec<f64> = (0..b * ci * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ks: Vec<f64> = (0..co * ci * k * k).map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5).collect();
        let x = Tensor::<f64>::from_f64(&[b, ci, h, w], &xs).unwrap();
        let wt = Tensor::<f64>::from_f64(&[co, ci, k, k], &ks).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = x.conv2d(&wt, stride, pad).unwrap();
            let per = y.numel() / b;
            for s in 0..b {
                let oracle = direct_conv(
                    &xs[s * ci * h * w..(s + 1) * ci * h * w],
                    (ci, h, w),
                    &ks,
                    (co, k, k),
                    stride,
                    pad,
                );
                for (got, want) in y.data()[s * per..(s + 1) * per].iter().zip(&oracle) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}

//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::graph::{BackwardFn, Graph, Var};
use crate::Scalar;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, Ix1, Ix4};

#[derive(Copy, Clone, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Gathers sliding windows: `(B, C, H, W) -> (B*OH*OW, C*K*K)`.
pub(crate) fn im2col<F: Scalar>(x: ArrayView4<'_, F>, spec: ConvSpec) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad);
    let mut cols = Array2::<F>::zeros((b * oh * ow, c * k * k));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = cols.row_mut(row);
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[(ci * k + ky) * k + kx] = x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds windows back: inverse layout of [`im2col`].
pub(crate) fn col2im<F: Scalar>(
    cols: ArrayView2<'_, F>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: ConvSpec,
) -> Array4<F> {
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad);
    debug_assert_eq!(cols.dim(), (b * oh * ow, c * k * k));
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let col = cols.row(row);
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[bi, ci, iy as usize, ix as usize]] += col[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn rows_to_bchw<F: Scalar>(y2: Array2<F>, b: usize, oh: usize, ow: usize, cout: usize) -> Array4<F> {
    y2.into_shape_with_order((b, oh, ow, cout))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

fn bchw_to_rows<F: Scalar>(g: ArrayView4<'_, F>) -> Array2<F> {
    let (b, c, oh, ow) = g.dim();
    g.permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((b * oh * ow, c))
        .unwrap()
}

impl<F: Scalar> Graph<F> {
    /// `x (B, Cin, H, W)`, `w (Cout, Cin, K, K)`, `b (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, spec: ConvSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects (B, C, H, W)");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], spec.kernel);
        let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let (oh, ow) = (spec.out_size(h), spec.out_size(wdt));

        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let cols = im2col(x4, spec);
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * spec.kernel * spec.kernel))
            .unwrap()
            .to_owned();
        let mut y2 = cols.dot(&w2.t());
        let b1 = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        y2 += &b1;
        let value = rows_to_bchw(y2, b, oh, ow, cout).into_dyn();

        let backward = self.grad_needed(&[x, w, bias]).then(|| -> BackwardFn<F> {
            let cols = cols; // keep the gathered windows for the weight gradient
            Box::new(move |ctx| {
                let g2 = bchw_to_rows(ctx.grad.view().into_dimensionality::<Ix4>().unwrap());
                let wv = ctx.parents[1]
                    .view()
                    .into_shape_with_order((cout, cin * spec.kernel * spec.kernel))
                    .unwrap();
                let dx = ctx.needs[0].then(|| {
                    let dcols = g2.dot(&wv);
                    col2im(dcols.view(), b, cin, h, wdt, spec).into_dyn()
                });
                let dw = ctx.needs[1].then(|| {
                    g2.t()
                        .dot(&cols)
                        .into_shape_with_order((cout, cin, spec.kernel, spec.kernel))
                        .unwrap()
                        .into_dyn()
                });
                let db = ctx.needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![dx, dw, db]
            })
        });
        self.push_op(value, vec![x, w, bias], backward)
    }

    /// `x (B, Cin, H, W)`, `w (Cin, Cout, K, K)`, `b (Cout)`.
    ///
    /// Output size per axis is `(H-1)*stride - 2*pad + K + output_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Var, spec: ConvSpec, output_pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d expects (B, C, H, W)");
        assert_eq!(ws[0], xs[1], "conv_transpose2d: channel mismatch");
        assert!(output_pad < spec.stride || (output_pad == 0 && spec.stride == 1));
        let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        let oh = (h - 1) * spec.stride + spec.kernel + output_pad - 2 * spec.pad;
        let ow = (wdt - 1) * spec.stride + spec.kernel + output_pad - 2 * spec.pad;

        let x2 = bchw_to_rows(self.value(x).view().into_dimensionality::<Ix4>().unwrap());
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cin, cout * spec.kernel * spec.kernel))
            .unwrap()
            .to_owned();
        // Each input position scatters a K*K*Cout patch onto the output canvas.
        let p2 = x2.dot(&w2);
        let mut y4 = col2im(p2.view(), b, cout, oh, ow, spec);
        let b1 = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        for (co, mut plane) in y4.axis_iter_mut(Axis(1)).enumerate() {
            let bv = b1[co];
            plane.mapv_inplace(|v| v + bv);
        }
        let value = y4.into_dyn();

        let backward = self.grad_needed(&[x, w, bias]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let dp = im2col(g4, spec); // (B*H*W, Cout*K*K): windows at the input grid
                let x2 = bchw_to_rows(ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap());
                let wv = ctx.parents[1]
                    .view()
                    .into_shape_with_order((cin, cout * spec.kernel * spec.kernel))
                    .unwrap();
                let dx = ctx.needs[0].then(|| {
                    let dx2 = dp.dot(&wv.t());
                    dx2.into_shape_with_order((b, h, wdt, cin))
                        .unwrap()
                        .permuted_axes([0, 3, 1, 2])
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn()
                });
                let dw = ctx.needs[1].then(|| {
                    x2.t()
                        .dot(&dp)
                        .into_shape_with_order((cin, cout, spec.kernel, spec.kernel))
                        .unwrap()
                        .into_dyn()
                });
                let db = ctx.needs[2].then(|| {
                    let mut db = ndarray::Array1::<F>::zeros(cout);
                    for (co, slot) in db.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for v in g4.index_axis(Axis(1), co).iter() {
                            acc += v.f64();
                        }
                        *slot = F::of(acc);
                    }
                    db.into_dyn()
                });
                vec![dx, dw, db]
            })
        });
        self.push_op(value, vec![x, w, bias], backward)
    }
}

/// Direct (loop) convolution used as an independent oracle in tests.
pub fn conv2d_reference<F: Scalar>(
    x: ArrayView4<'_, F>,
    w: ArrayView4<'_, F>,
    bias: &[F],
    spec: ConvSpec,
) -> Array4<F> {
    let (b, cin, h, wd) = x.dim();
    let (cout, cin2, k, _) = w.dim();
    assert_eq!(cin, cin2);
    let (oh, ow) = (spec.out_size(h), spec.out_size(wd));
    let mut out = Array4::<F>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[[bi, ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[bi, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Direct (loop) transposed convolution oracle.
pub fn conv_transpose2d_reference<F: Scalar>(
    x: ArrayView4<'_, F>,
    w: ArrayView4<'_, F>,
    bias: &[F],
    spec: ConvSpec,
    output_pad: usize,
) -> Array4<F> {
    let (b, cin, h, wd) = x.dim();
    let (cin2, cout, k, _) = w.dim();
    assert_eq!(cin, cin2);
    let oh = (h - 1) * spec.stride + k + output_pad - 2 * spec.pad;
    let ow = (wd - 1) * spec.stride + k + output_pad - 2 * spec.pad;
    let mut out = Array4::<F>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        for co in 0..cout {
            for slot in out.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), co).iter_mut() {
                *slot = bias[co];
            }
        }
    }
    for bi in 0..b {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[[bi, ci, iy, ix]];
                    for co in 0..cout {
                        for ky in 0..k {
                            let oy = (iy * spec.stride + ky) as isize - spec.pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * spec.stride + kx) as isize - spec.pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[[bi, co, oy as usize, ox as usize]] += xv * w[[ci, co, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

//! Differentiable operations recorded on the [`Graph`] tape.

use crate::graph::{BackwardFn, Graph, Var};
use crate::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2, Ix3, Ix4};

/// Reshapes a contiguous dynamic array to a 2-D view.
pub(crate) fn view2<F: Scalar>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    a.view().into_shape_with_order((rows, cols)).expect("contiguous 2-d reshape")
}

fn sum_to_suffix<F: Scalar>(g: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let mut out = g.to_owned();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    debug_assert_eq!(out.shape(), target);
    out
}

fn mean_f64<F: Scalar>(a: &ArrayD<F>) -> f64 {
    a.iter().map(|x| x.f64()).sum::<f64>() / a.len() as f64
}

impl<F: Scalar> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let backward = self.grad_needed(&[a, b]).then(|| -> BackwardFn<F> {
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
        });
        self.push_op(value, vec![a, b], backward)
    }

    /// `x + b` where the shape of `b` is a suffix of the shape of `x`
    /// (bias over trailing axes, positional embedding over `(T, C)`, ...).
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Var {
        let (xs, bs) = (self.shape(x), self.shape(b));
        assert!(xs.ends_with(bs), "add_bcast: {bs:?} is not a suffix of {xs:?}");
        let value = self.value(x) + self.value(b);
        let bshape: Vec<usize> = bs.to_vec();
        let backward = self.grad_needed(&[x, b]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let db = ctx.needs[1].then(|| sum_to_suffix(ctx.grad, &bshape));
                vec![Some(ctx.grad.clone()), db]
            })
        });
        self.push_op(value, vec![x, b], backward)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let backward = self.grad_needed(&[a, b]).then(|| -> BackwardFn<F> {
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.mapv(|g| -g))])
        });
        self.push_op(value, vec![a, b], backward)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let backward = self.grad_needed(&[a, b]).then(|| -> BackwardFn<F> {
            Box::new(|ctx| {
                let da = ctx.needs[0].then(|| ctx.grad * ctx.parents[1]);
                let db = ctx.needs[1].then(|| ctx.grad * ctx.parents[0]);
                vec![da, db]
            })
        });
        self.push_op(value, vec![a, b], backward)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let value = self.value(a).mapv(|x| x * cf);
        let backward = self.grad_needed(&[a]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| vec![Some(ctx.grad.mapv(|g| g * cf))])
        });
        self.push_op(value, vec![a], backward)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let a2 = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let value = a2.dot(&b2).into_dyn();
        let backward = self.grad_needed(&[a, b]).then(|| -> BackwardFn<F> {
            Box::new(|ctx| {
                let av = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let da = ctx.needs[0].then(|| g2.dot(&bv.t()).into_dyn());
                let db = ctx.needs[1].then(|| av.t().dot(&g2).into_dyn());
                vec![da, db]
            })
        });
        self.push_op(value, vec![a, b], backward)
    }

    /// Affine map over the trailing axis: `(..., din) -> (..., dout)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().expect("linear: input must have at least one axis");
        let (wr, wc) = {
            let ws = self.shape(w);
            assert_eq!(ws.len(), 2, "linear: weight must be 2-d");
            (ws[0], ws[1])
        };
        assert_eq!(wr, din, "linear: weight rows must match input trailing dim");
        let rows: usize = xs[..xs.len() - 1].iter().product();

        let x2 = view2(self.value(x), rows, din);
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let mut y2 = x2.dot(&w2);
        if let Some(b) = bias {
            let b1 = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y2 += &b1;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = wc;
        let value = y2.into_shape_with_order(out_shape.as_slice()).unwrap().into_dyn();

        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let backward = self.grad_needed(&parents).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g2 = view2(ctx.grad, rows, wc);
                let xv = view2(ctx.parents[0], rows, din);
                let wv = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let dx = ctx.needs[0].then(|| {
                    g2.dot(&wv.t()).into_shape_with_order(xs.as_slice()).unwrap().into_dyn()
                });
                let dw = ctx.needs[1].then(|| xv.t().dot(&g2).into_dyn());
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(ctx.needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                grads
            })
        });
        self.push_op(value, parents, backward)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(x).to_vec();
        assert_eq!(old.iter().product::<usize>(), shape.iter().product::<usize>(), "reshape: element count");
        let value = self.value(x).clone().into_shape_with_order(shape).unwrap();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| vec![Some(ctx.grad.clone().into_shape_with_order(old.as_slice()).unwrap())])
        });
        self.push_op(value, vec![x], backward)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = F::one();
        let value = self.value(x).mapv(|v| one / (one + (-v).exp()));
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let mut dx = ctx.output.mapv(|y| y * (one - y));
                dx *= ctx.grad;
                vec![Some(dx)]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let a = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c = F::of(0.044715);
        let half = F::of(0.5);
        let one = F::one();
        let three = F::of(3.0);
        let value = self.value(x).mapv(|v| {
            let u = a * (v + c * v * v * v);
            half * v * (one + u.tanh())
        });
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let mut dx = ctx.parents[0].mapv(|v| {
                    let u = a * (v + c * v * v * v);
                    let t = u.tanh();
                    half * (one + t) + half * v * (one - t * t) * a * (one + three * c * v * v)
                });
                dx *= ctx.grad;
                vec![Some(dx)]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// PReLU over a `(B, C, H, W)` tensor with one slope per channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "prelu expects (B, C, H, W)");
        let channels = xs[1];
        assert_eq!(self.shape(alpha), &[channels], "prelu: one slope per channel");
        let zero = F::zero();
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let al = self.value(alpha).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut value = x4.to_owned();
        for (c, mut plane) in value.axis_iter_mut(Axis(1)).enumerate() {
            let a = al[c];
            plane.mapv_inplace(|v| if v > zero { v } else { a * v });
        }
        let backward = self.grad_needed(&[x, alpha]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let xv = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let av = ctx.parents[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gv = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let dx = ctx.needs[0].then(|| {
                    let mut dx = gv.to_owned();
                    for (c, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                        let a = av[c];
                        plane.zip_mut_with(&xv.index_axis(Axis(1), c), |g, &v| {
                            if v <= zero {
                                *g = *g * a;
                            }
                        });
                    }
                    dx.into_dyn()
                });
                let da = ctx.needs[1].then(|| {
                    let mut da = Array1::<F>::zeros(channels);
                    for c in 0..channels {
                        let mut acc = 0.0f64;
                        ndarray::Zip::from(&gv.index_axis(Axis(1), c)).and(&xv.index_axis(Axis(1), c)).for_each(
                            |&g, &v| {
                                if v <= zero {
                                    acc += (g * v).f64();
                                }
                            },
                        );
                        da[c] = F::of(acc);
                    }
                    da.into_dyn()
                });
                vec![dx, da]
            })
        });
        self.push_op(value.into_dyn(), vec![x, alpha], backward)
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap();
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = view2(self.value(x), rows, cols);
        let mut value = x2.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.iter().map(|v| v.f64()).sum::<f64>();
            let inv = F::of(1.0 / sum);
            row.mapv_inplace(|v| v * inv);
        }
        let value = value.into_shape_with_order(xs.as_slice()).unwrap().into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let y2 = view2(ctx.output, rows, cols);
                let g2 = view2(ctx.grad, rows, cols);
                let mut dx = Array2::<F>::zeros((rows, cols));
                for ((mut drow, yrow), grow) in dx.rows_mut().into_iter().zip(y2.rows()).zip(g2.rows()) {
                    let dot = yrow.iter().zip(grow.iter()).map(|(&y, &g)| (y * g).f64()).sum::<f64>();
                    let dot = F::of(dot);
                    ndarray::Zip::from(&mut drow).and(&yrow).and(&grow).for_each(|d, &y, &g| {
                        *d = y * (g - dot);
                    });
                }
                vec![Some(dx.into_shape_with_order(xs.as_slice()).unwrap().into_dyn())]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap();
        assert_eq!(self.shape(gamma), &[cols]);
        assert_eq!(self.shape(beta), &[cols]);
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let epsf = eps;

        let x2 = view2(self.value(x), rows, cols);
        let gam = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let bet = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();

        let mut mean = Array1::<F>::zeros(rows);
        let mut inv_std = Array1::<F>::zeros(rows);
        let mut value = Array2::<F>::zeros((rows, cols));
        for (r, xrow) in x2.rows().into_iter().enumerate() {
            let m = xrow.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = xrow.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + epsf).sqrt();
            mean[r] = F::of(m);
            inv_std[r] = F::of(inv);
            let (mf, invf) = (F::of(m), F::of(inv));
            let mut vrow = value.row_mut(r);
            ndarray::Zip::from(&mut vrow).and(&xrow).and(&gam).and(&bet).for_each(|o, &v, &g, &b| {
                *o = (v - mf) * invf * g + b;
            });
        }
        let value = value.into_shape_with_order(xs.as_slice()).unwrap().into_dyn();

        let backward = self.grad_needed(&[x, gamma, beta]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let x2 = view2(ctx.parents[0], rows, cols);
                let gam = ctx.parents[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let g2 = view2(ctx.grad, rows, cols);
                let n = F::of(cols as f64);

                let mut dx = ctx.needs[0].then(|| Array2::<F>::zeros((rows, cols)));
                let mut dgamma = Array1::<F>::zeros(cols);
                let mut dbeta = Array1::<F>::zeros(cols);
                for r in 0..rows {
                    let (m, inv) = (mean[r], inv_std[r]);
                    let xrow = x2.row(r);
                    let grow = g2.row(r);
                    // xhat and the two row sums
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for c in 0..cols {
                        let xhat = (xrow[c] - m) * inv;
                        let gh = grow[c] * gam[c];
                        s1 += gh;
                        s2 += gh * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut drow = dx.row_mut(r);
                        for c in 0..cols {
                            let xhat = (xrow[c] - m) * inv;
                            let gh = grow[c] * gam[c];
                            drow[c] = inv / n * (n * gh - s1 - xhat * s2);
                        }
                    }
                }
                vec![
                    dx.map(|d| d.into_shape_with_order(xs.as_slice()).unwrap().into_dyn()),
                    ctx.needs[1].then(|| dgamma.into_dyn()),
                    ctx.needs[2].then(|| dbeta.into_dyn()),
                ]
            })
        });
        self.push_op(value, vec![x, gamma, beta], backward)
    }

    /// `(B, T, C) -> (B, H, T, C/H)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "split_heads expects (B, T, C)");
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(c % heads, 0, "split_heads: C not divisible by heads");
        let d = c / heads;
        let x4 = self.value(x).view().into_shape_with_order((b, t, heads, d)).unwrap();
        let value = x4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned().into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let dx = g4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
                vec![Some(dx.into_shape_with_order((b, t, c)).unwrap().into_dyn())]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// `(B, H, T, D) -> (B, T, H*D)`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "merge_heads expects (B, H, T, D)");
        let (b, h, t, d) = (xs[0], xs[1], xs[2], xs[3]);
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let value = x4
            .permuted_axes([0, 2, 1, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b, t, h * d))
            .unwrap()
            .into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g4 = ctx.grad.view().into_shape_with_order((b, t, h, d)).unwrap();
                let dx = g4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
                vec![Some(dx.into_dyn())]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// Scaled dot-product attention logits: `q k^T * scale` per `(batch, head)`.
    pub fn attn_scores(&mut self, q: Var, k: Var, scale: f64) -> Var {
        let qs = self.shape(q).to_vec();
        assert_eq!(qs.len(), 4, "attn_scores expects (B, H, T, D)");
        assert_eq!(self.shape(k), qs.as_slice());
        let (b, h, t, d) = (qs[0], qs[1], qs[2], qs[3]);
        let sc = F::of(scale);
        let qv = self.value(q).view().into_dimensionality::<Ix4>().unwrap();
        let kv = self.value(k).view().into_dimensionality::<Ix4>().unwrap();
        let mut value = Array4::<F>::zeros((b, h, t, t));
        for bi in 0..b {
            for hi in 0..h {
                let qm = qv.index_axis(Axis(0), bi);
                let qm = qm.index_axis(Axis(0), hi);
                let km = kv.index_axis(Axis(0), bi);
                let km = km.index_axis(Axis(0), hi);
                let mut s = qm.dot(&km.t());
                s.mapv_inplace(|v| v * sc);
                value.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&s);
            }
        }
        let backward = self.grad_needed(&[q, k]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let qv = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let kv = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let gv = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut dq = ctx.needs[0].then(|| Array4::<F>::zeros((b, h, t, d)));
                let mut dk = ctx.needs[1].then(|| Array4::<F>::zeros((b, h, t, d)));
                for bi in 0..b {
                    for hi in 0..h {
                        let gm = gv.index_axis(Axis(0), bi);
                        let gm = gm.index_axis(Axis(0), hi);
                        if let Some(dq) = dq.as_mut() {
                            let km = kv.index_axis(Axis(0), bi);
                            let km = km.index_axis(Axis(0), hi);
                            let mut v = gm.dot(&km);
                            v.mapv_inplace(|x| x * sc);
                            dq.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&v);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qm = qv.index_axis(Axis(0), bi);
                            let qm = qm.index_axis(Axis(0), hi);
                            let mut v = gm.t().dot(&qm);
                            v.mapv_inplace(|x| x * sc);
                            dk.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&v);
                        }
                    }
                }
                vec![dq.map(|a| a.into_dyn()), dk.map(|a| a.into_dyn())]
            })
        });
        self.push_op(value.into_dyn(), vec![q, k], backward)
    }

    /// Attention-weighted value mix: `p v` per `(batch, head)`.
    pub fn attn_context(&mut self, p: Var, v: Var) -> Var {
        let ps = self.shape(p).to_vec();
        let vs = self.shape(v).to_vec();
        assert_eq!(ps.len(), 4);
        assert_eq!(vs.len(), 4);
        assert_eq!(ps[3], vs[2], "attn_context: T mismatch");
        let (b, h, t, d) = (vs[0], vs[1], ps[2], vs[3]);
        let pv = self.value(p).view().into_dimensionality::<Ix4>().unwrap();
        let vv = self.value(v).view().into_dimensionality::<Ix4>().unwrap();
        let mut value = Array4::<F>::zeros((b, h, t, d));
        for bi in 0..b {
            for hi in 0..h {
                let pm = pv.index_axis(Axis(0), bi);
                let pm = pm.index_axis(Axis(0), hi);
                let vm = vv.index_axis(Axis(0), bi);
                let vm = vm.index_axis(Axis(0), hi);
                value.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&pm.dot(&vm));
            }
        }
        let backward = self.grad_needed(&[p, v]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let pv = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let vv = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let gv = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut dp = ctx.needs[0].then(|| Array4::<F>::zeros((b, h, t, t)));
                let mut dv = ctx.needs[1].then(|| Array4::<F>::zeros((b, h, t, d)));
                for bi in 0..b {
                    for hi in 0..h {
                        let gm = gv.index_axis(Axis(0), bi);
                        let gm = gm.index_axis(Axis(0), hi);
                        if let Some(dp) = dp.as_mut() {
                            let vm = vv.index_axis(Axis(0), bi);
                            let vm = vm.index_axis(Axis(0), hi);
                            dp.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&gm.dot(&vm.t()));
                        }
                        if let Some(dv) = dv.as_mut() {
                            let pm = pv.index_axis(Axis(0), bi);
                            let pm = pm.index_axis(Axis(0), hi);
                            dv.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), hi).assign(&pm.t().dot(&gm));
                        }
                    }
                }
                vec![dp.map(|a| a.into_dyn()), dv.map(|a| a.into_dyn())]
            })
        });
        self.push_op(value.into_dyn(), vec![p, v], backward)
    }

    /// `(B, C, H, W) -> (B, T, C*p*p)` with `T = (H/p)*(W/p)` tokens in
    /// row-major patch order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "patchify expects (B, C, H, W)");
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        assert!(h % patch == 0 && w % patch == 0, "patchify: image not divisible by patch size");
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let value = patchify_kernel(x4, patch).into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g3 = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                vec![Some(unpatchify_kernel(g3, patch, c, h, w).into_dyn())]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, patch: usize, channels: usize, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "unpatchify expects (B, T, C*p*p)");
        assert_eq!(xs[1], (h / patch) * (w / patch));
        assert_eq!(xs[2], channels * patch * patch);
        let x3 = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let value = unpatchify_kernel(x3, patch, channels, h, w).into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                vec![Some(patchify_kernel(g4, patch).into_dyn())]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// Mean of elementwise squared differences (a scalar node).
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_sq_diff: shape mismatch");
        let n = self.value(a).len();
        let sum: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum();
        let value = ndarray::arr0(F::of(sum / n as f64)).into_dyn();
        let backward = self.grad_needed(&[a, b]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g = ctx.grad.iter().next().unwrap().f64();
                let coef = F::of(2.0 * g / n as f64);
                let diff = ctx.parents[0] - ctx.parents[1];
                let da = ctx.needs[0].then(|| diff.mapv(|d| d * coef));
                let db = ctx.needs[1].then(|| diff.mapv(|d| -(d * coef)));
                vec![da, db]
            })
        });
        self.push_op(value, vec![a, b], backward)
    }

    /// Mean of all elements (a scalar node).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let value = ndarray::arr0(F::of(mean_f64(self.value(x)))).into_dyn();
        let backward = self.grad_needed(&[x]).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g = ctx.grad.iter().next().unwrap().f64();
                let coef = F::of(g / n as f64);
                vec![Some(ArrayD::from_elem(ctx.parents[0].raw_dim(), coef))]
            })
        });
        self.push_op(value, vec![x], backward)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Var {
        assert_eq!(terms.len(), weights.len());
        assert!(!terms.is_empty());
        let sum: f64 = terms
            .iter()
            .zip(weights)
            .map(|(&t, &w)| {
                assert_eq!(self.value(t).len(), 1, "weighted_sum expects scalar terms");
                self.value(t).iter().next().unwrap().f64() * w
            })
            .sum();
        let value = ndarray::arr0(F::of(sum)).into_dyn();
        let ws = weights.to_vec();
        let backward = self.grad_needed(terms).then(|| -> BackwardFn<F> {
            Box::new(move |ctx| {
                let g = ctx.grad.iter().next().unwrap().f64();
                ctx.parents
                    .iter()
                    .zip(&ws)
                    .map(|(p, &w)| Some(ArrayD::from_elem(p.raw_dim(), F::of(g * w))))
                    .collect()
            })
        });
        self.push_op(value, terms.to_vec(), backward)
    }
}

pub(crate) fn patchify_kernel<F: Scalar>(x: ArrayView4<'_, F>, p: usize) -> Array3<F> {
    let (b, c, h, w) = x.dim();
    let (nh, nw) = (h / p, w / p);
    let mut out = Array3::<F>::zeros((b, nh * nw, c * p * p));
    for bi in 0..b {
        for iy in 0..nh {
            for ix in 0..nw {
                let t = iy * nw + ix;
                for ci in 0..c {
                    for ky in 0..p {
                        for kx in 0..p {
                            out[[bi, t, (ci * p + ky) * p + kx]] = x[[bi, ci, iy * p + ky, ix * p + kx]];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify_kernel<F: Scalar>(t: ArrayView3<'_, F>, p: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let (b, ntok, _pd) = t.dim();
    let (nh, nw) = (h / p, w / p);
    debug_assert_eq!(ntok, nh * nw);
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for iy in 0..nh {
            for ix in 0..nw {
                let tok = iy * nw + ix;
                for ci in 0..c {
                    for ky in 0..p {
                        for kx in 0..p {
                            out[[bi, ci, iy * p + ky, ix * p + kx]] = t[[bi, tok, (ci * p + ky) * p + kx]];
                        }
                    }
                }
            }
        }
    }
    out
}

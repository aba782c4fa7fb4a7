//! Network building blocks: convolution, upsampling, pooling, and dense
//! products. Parallel sections write disjoint output regions and keep every
//! reduction in a fixed order, so results are bit-reproducible.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use rayon::prelude::*;

use super::{accumulate, BackFn, Var};
use crate::real::Real;

fn as4<F: Real>(a: &ArrayD<F>) -> Array4<F> {
    // `to_owned` would keep a permuted memory order (concat outputs have
    // one); the kernels below index raw slices, so force standard layout.
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d array")
        .as_standard_layout()
        .into_owned()
}

fn conv_forward<F: Real>(
    x: &Array4<F>,
    k: &Array4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, cin, h, w) = x.dim();
    let (cout, kcin, kh, kw) = k.dim();
    assert_eq!(cin, kcin, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel exceeds input");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let xs = x.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let mut buf = vec![F::zero(); b * cout * oh * ow];
    buf.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, chunk)| {
        let bi = plane / cout;
        let oc = plane % cout;
        let bias_v = bias.map_or(F::zero(), |bv| bv[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias_v;
                for ic in 0..cin {
                    let xbase = (bi * cin + ic) * h * w;
                    let kbase = (oc * cin + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc
                                + xs[xbase + iy as usize * w + ix as usize]
                                    * ks[kbase + ky * kw + kx];
                        }
                    }
                }
                chunk[oy * ow + ox] = acc;
            }
        }
    });
    Array4::from_shape_vec((b, cout, oh, ow), buf).expect("conv output shape")
}

impl<'t, F: Real> Var<'t, F> {
    /// 2-d convolution over `[batch, channel, row, col]` input with zero
    /// padding. Kernel is `[out_ch, in_ch, kh, kw]`, bias `[out_ch]`.
    pub fn conv2d(
        self,
        kernel: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, F> {
        self.same_tape(&kernel);
        if let Some(b) = &bias {
            self.same_tape(b);
        }
        let ix = self.idx;
        let ik = kernel.idx;
        let ib = bias.map(|b| b.idx);
        let (nx, nk) = (self.needs_grad(), kernel.needs_grad());
        let nb = bias.map(|b| b.needs_grad()).unwrap_or(false);

        let value = {
            let inner = self.tape.inner.borrow();
            let x4 = as4(&inner.values[ix]);
            let k4 = as4(&inner.values[ik]);
            let b1 = ib.map(|i| {
                inner.values[i]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("bias is 1-d")
                    .to_owned()
            });
            conv_forward(&x4, &k4, b1.as_ref(), stride, pad)
        };
        if !(nx || nk || nb) {
            return self.tape.constant(value.into_dyn());
        }

        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let x4 = as4(&values[ix]);
            let k4 = as4(&values[ik]);
            let g4 = as4(g);
            let (b, cin, h, w) = x4.dim();
            let (cout, _, kh, kw) = k4.dim();
            let (_, _, oh, ow) = g4.dim();
            let xs = x4.as_slice().expect("standard layout");
            let ks = k4.as_slice().expect("standard layout");
            let gs = g4.as_slice().expect("standard layout");

            if nx {
                let mut gin = vec![F::zero(); b * cin * h * w];
                gin.par_chunks_mut(cin * h * w).enumerate().for_each(|(bi, gplane)| {
                    for oc in 0..cout {
                        let gbase = (bi * cout + oc) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gs[gbase + oy * ow + ox];
                                if gv == F::zero() {
                                    continue;
                                }
                                for ic in 0..cin {
                                    let kbase = (oc * cin + ic) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ixp = (ox * stride + kx) as isize - pad as isize;
                                            if ixp < 0 || ixp >= w as isize {
                                                continue;
                                            }
                                            let slot =
                                                ic * h * w + iy as usize * w + ixp as usize;
                                            gplane[slot] =
                                                gplane[slot] + gv * ks[kbase + ky * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                let arr = Array4::from_shape_vec((b, cin, h, w), gin).expect("gin shape");
                accumulate(grads, ix, arr.into_dyn());
            }

            if nk {
                let mut gk = vec![F::zero(); cout * cin * kh * kw];
                gk.par_chunks_mut(kh * kw).enumerate().for_each(|(pair, gker)| {
                    let oc = pair / cin;
                    let ic = pair % cin;
                    for bi in 0..b {
                        let gbase = (bi * cout + oc) * oh * ow;
                        let xbase = (bi * cin + ic) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gs[gbase + oy * ow + ox];
                                if gv == F::zero() {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ixp = (ox * stride + kx) as isize - pad as isize;
                                        if ixp < 0 || ixp >= w as isize {
                                            continue;
                                        }
                                        gker[ky * kw + kx] = gker[ky * kw + kx]
                                            + gv * xs[xbase + iy as usize * w + ixp as usize];
                                    }
                                }
                            }
                        }
                    }
                });
                let arr = Array4::from_shape_vec((cout, cin, kh, kw), gk).expect("gk shape");
                accumulate(grads, ik, arr.into_dyn());
            }

            if nb {
                let mut gb = Array1::<F>::zeros(cout);
                for bi in 0..b {
                    for oc in 0..cout {
                        let gbase = (bi * cout + oc) * oh * ow;
                        let mut s = F::zero();
                        for i in 0..oh * ow {
                            s = s + gs[gbase + i];
                        }
                        gb[oc] = gb[oc] + s;
                    }
                }
                accumulate(grads, ib.expect("bias present"), gb.into_dyn());
            }
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// Nearest-neighbour 2x upsampling of `[batch, channel, row, col]`.
    pub fn upsample_nearest_2x(self) -> Var<'t, F> {
        let ixn = self.idx;
        let needs = self.needs_grad();
        let value = {
            let inner = self.tape.inner.borrow();
            let x4 = as4(&inner.values[ixn]);
            let (b, c, h, w) = x4.dim();
            let mut out = Array4::<F>::zeros((b, c, 2 * h, 2 * w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[[bi, ci, y, x]] = x4[[bi, ci, y / 2, x / 2]];
                        }
                    }
                }
            }
            out
        };
        if !needs {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let g4 = as4(g);
            let (b, c, h2, w2) = g4.dim();
            let (h, w) = (h2 / 2, w2 / 2);
            let mut gin = Array4::<F>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            gin[[bi, ci, y / 2, x / 2]] =
                                gin[[bi, ci, y / 2, x / 2]] + g4[[bi, ci, y, x]];
                        }
                    }
                }
            }
            let _ = &values;
            accumulate(grads, ixn, gin.into_dyn());
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// Spatial mean, `[batch, channel, row, col]` to `[batch, channel]`.
    pub fn global_mean_hw(self) -> Var<'t, F> {
        let ixn = self.idx;
        let needs = self.needs_grad();
        let (value, h, w) = {
            let inner = self.tape.inner.borrow();
            let x4 = as4(&inner.values[ixn]);
            let (_, _, h, w) = x4.dim();
            let inv = F::one() / F::c((h * w) as f64);
            let v = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|s| s * inv);
            (v, h, w)
        };
        if !needs {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |_values, g, grads| {
            let g2 = g
                .view()
                .into_dimensionality::<Ix2>()
                .expect("pooled grad is 2-d")
                .to_owned();
            let inv = F::one() / F::c((h * w) as f64);
            let (b, c) = g2.dim();
            let mut gin = Array4::<F>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let gv = g2[[bi, ci]] * inv;
                    gin.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .fill(gv);
                }
            }
            accumulate(grads, ixn, gin.into_dyn());
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// Dense product: `[batch, in] x [in, out]` to `[batch, out]`.
    pub fn matmul(self, weight: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&weight);
        let ia = self.idx;
        let iw = weight.idx;
        let (na, nw) = (self.needs_grad(), weight.needs_grad());
        let value = {
            let inner = self.tape.inner.borrow();
            let a = inner.values[ia]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul lhs is 2-d");
            let w = inner.values[iw]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul rhs is 2-d");
            a.dot(&w)
        };
        if !(na || nw) {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let a = values[ia]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul lhs is 2-d")
                .to_owned();
            let w = values[iw]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul rhs is 2-d")
                .to_owned();
            let g2: Array2<F> = g
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul grad is 2-d")
                .to_owned();
            if na {
                accumulate(grads, ia, g2.dot(&w.t()).into_dyn());
            }
            if nw {
                accumulate(grads, iw, a.t().dot(&g2).into_dyn());
            }
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// Adds a `[out]` bias row-wise to a `[batch, out]` activation.
    pub fn add_row(self, bias: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&bias);
        let ia = self.idx;
        let ibi = bias.idx;
        let (na, nb) = (self.needs_grad(), bias.needs_grad());
        let value = {
            let inner = self.tape.inner.borrow();
            let a = inner.values[ia]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("add_row lhs is 2-d")
                .to_owned();
            let bv = inner.values[ibi]
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias is 1-d")
                .to_owned();
            a + &bv
        };
        if !(na || nb) {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            if na {
                accumulate(grads, ia, g.clone());
            }
            if nb {
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("add_row grad is 2-d");
                accumulate(grads, ibi, g2.sum_axis(Axis(0)).into_dyn());
            }
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{max_relative_error, numeric_gradient};
    use super::super::Tape;
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_hand_computed_example() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let k = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![2.0]).unwrap());
        let y = x.conv2d(k, None, 1, 0);
        assert_eq!(
            y.value(),
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![2.0, 4.0, 6.0, 8.0]).unwrap()
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&[2, 3, 5, 6], &mut rng);
        let k0 = random(&[4, 3, 3, 3], &mut rng);
        let b0 = random(&[4], &mut rng);

        let eval = |x: &ArrayD<f64>, k: &ArrayD<f64>, bb: &ArrayD<f64>| {
            let t: Tape<f64> = Tape::new();
            let xv = t.leaf(x.clone());
            let kv = t.leaf(k.clone());
            let bv = t.leaf(bb.clone());
            xv.conv2d(kv, Some(bv), 2, 1).mul(xv.conv2d(kv, Some(bv), 2, 1)).mean_all().scalar_value()
        };

        let t: Tape<f64> = Tape::new();
        let xv = t.leaf(x0.clone());
        let kv = t.leaf(k0.clone());
        let bv = t.leaf(b0.clone());
        let out = xv.conv2d(kv, Some(bv), 2, 1);
        let y = out.mul(out).mean_all();
        let g = t.backward(y);

        let gx = numeric_gradient(&x0, 1e-6, |x| eval(x, &k0, &b0));
        let gk = numeric_gradient(&k0, 1e-6, |k| eval(&x0, k, &b0));
        let gb = numeric_gradient(&b0, 1e-6, |bb| eval(&x0, &k0, bb));
        assert!(max_relative_error(&g.wrt(xv), &gx, 1e-6) < 1e-5);
        assert!(max_relative_error(&g.wrt(kv), &gk, 1e-6) < 1e-5);
        assert!(max_relative_error(&g.wrt(bv), &gb, 1e-6) < 1e-5);
    }

    #[test]
    fn upsample_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = random(&[2, 2, 3, 4], &mut rng);
        let weights =
            ArrayD::from_shape_fn(IxDyn(&[2, 2]), |ix| 1.0 + ix[0] as f64 + 2.0 * ix[1] as f64);

        let eval = |x: &ArrayD<f64>| {
            let t: Tape<f64> = Tape::new();
            let y = t
                .leaf(x.clone())
                .upsample_nearest_2x()
                .elu()
                .global_mean_hw()
                .mul(t.constant(weights.clone()))
                .mean_all();
            y.scalar_value()
        };

        let t: Tape<f64> = Tape::new();
        let xv = t.leaf(x0.clone());
        let y = xv
            .upsample_nearest_2x()
            .elu()
            .global_mean_hw()
            .mul(t.constant(weights.clone()))
            .mean_all();
        let g = t.backward(y);
        let gx = numeric_gradient(&x0, 1e-6, eval);
        assert!(max_relative_error(&g.wrt(xv), &gx, 1e-6) < 1e-5);
    }

    #[test]
    fn matmul_bias_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = random(&[3, 4], &mut rng);
        let w0 = random(&[4, 2], &mut rng);
        let b0 = random(&[2], &mut rng);
        let eval = |a: &ArrayD<f64>, w: &ArrayD<f64>, bb: &ArrayD<f64>| {
            let t: Tape<f64> = Tape::new();
            let out = t.leaf(a.clone()).matmul(t.leaf(w.clone())).add_row(t.leaf(bb.clone()));
            out.sigmoid().mean_all().scalar_value()
        };
        let t: Tape<f64> = Tape::new();
        let (av, wv, bv) = (t.leaf(a0.clone()), t.leaf(w0.clone()), t.leaf(b0.clone()));
        let y = av.matmul(wv).add_row(bv).sigmoid().mean_all();
        let g = t.backward(y);
        assert!(
            max_relative_error(
                &g.wrt(av),
                &numeric_gradient(&a0, 1e-6, |a| eval(a, &w0, &b0)),
                1e-6
            ) < 1e-5
        );
        assert!(
            max_relative_error(
                &g.wrt(wv),
                &numeric_gradient(&w0, 1e-6, |w| eval(&a0, w, &b0)),
                1e-6
            ) < 1e-5
        );
        assert!(
            max_relative_error(
                &g.wrt(bv),
                &numeric_gradient(&b0, 1e-6, |bb| eval(&a0, &w0, bb)),
                1e-6
            ) < 1e-5
        );
    }
}

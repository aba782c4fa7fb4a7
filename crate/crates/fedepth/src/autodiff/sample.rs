//! Spatial sampling operations: bilinear lookup at continuous coordinates
//! (differentiable in both the source image and the coordinates), fixed-point
//! gathers, and a border-aware box filter.

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};

use super::{accumulate, BackFn, Var};
use crate::real::Real;

fn as2<F: Real>(a: &ArrayD<F>) -> Array2<F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d array")
        .to_owned()
}

fn as3<F: Real>(a: &ArrayD<F>) -> Array3<F> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-d array")
        .to_owned()
}

struct Corners {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn corners<F: Real>(x: F, y: F, w: usize, h: usize) -> (Corners, F, F) {
    let xf = x.floor();
    let yf = y.floor();
    let x0 = (xf.f64() as isize).clamp(0, w as isize - 1) as usize;
    let y0 = (yf.f64() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (Corners { x0, x1, y0, y1 }, x - F::c(x0 as f64), y - F::c(y0 as f64))
}

impl<'t, F: Real> Var<'t, F> {
    /// Bilinear sampling of a `[channel, row, col]` source at continuous
    /// coordinates (`u` columns, `v` rows, both `[row, col]`). Positions with
    /// a cleared `valid` bit produce zeros and propagate no gradient. Valid
    /// coordinates must satisfy `0 <= u <= w-1`, `0 <= v <= h-1`.
    pub fn grid_sample(self, u: Var<'t, F>, v: Var<'t, F>, valid: &Array2<bool>) -> Var<'t, F> {
        self.same_tape(&u);
        self.same_tape(&v);
        let (is, iu, iv) = (self.idx, u.idx, v.idx);
        let (ns, nu, nv) = (self.needs_grad(), u.needs_grad(), v.needs_grad());
        let mask = valid.clone();

        let value = {
            let inner = self.tape.inner.borrow();
            let src = as3(&inner.values[is]);
            let uu = as2(&inner.values[iu]);
            let vv = as2(&inner.values[iv]);
            let (c, h, w) = src.dim();
            assert_eq!(uu.dim(), (h, w), "coordinate grid shape");
            assert_eq!(vv.dim(), mask.dim(), "validity shape");
            let mut out = Array3::<F>::zeros((c, h, w));
            for r in 0..h {
                for cc in 0..w {
                    if !mask[[r, cc]] {
                        continue;
                    }
                    let (cn, fx, fy) = corners(uu[[r, cc]], vv[[r, cc]], w, h);
                    let one = F::one();
                    for ch in 0..c {
                        let top = src[[ch, cn.y0, cn.x0]] * (one - fx) + src[[ch, cn.y0, cn.x1]] * fx;
                        let bot = src[[ch, cn.y1, cn.x0]] * (one - fx) + src[[ch, cn.y1, cn.x1]] * fx;
                        out[[ch, r, cc]] = top * (one - fy) + bot * fy;
                    }
                }
            }
            out
        };
        if !(ns || nu || nv) {
            return self.tape.constant(value.into_dyn());
        }

        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let src = as3(&values[is]);
            let uu = as2(&values[iu]);
            let vv = as2(&values[iv]);
            let g3 = as3(g);
            let (c, h, w) = src.dim();
            let one = F::one();
            let mut gsrc = if ns { Some(Array3::<F>::zeros((c, h, w))) } else { None };
            let mut gu = if nu { Some(Array2::<F>::zeros((h, w))) } else { None };
            let mut gv = if nv { Some(Array2::<F>::zeros((h, w))) } else { None };
            for r in 0..h {
                for cc in 0..w {
                    if !mask[[r, cc]] {
                        continue;
                    }
                    let (cn, fx, fy) = corners(uu[[r, cc]], vv[[r, cc]], w, h);
                    let mut du = F::zero();
                    let mut dv = F::zero();
                    for ch in 0..c {
                        let up = g3[[ch, r, cc]];
                        if let Some(gs) = gsrc.as_mut() {
                            gs[[ch, cn.y0, cn.x0]] =
                                gs[[ch, cn.y0, cn.x0]] + up * (one - fx) * (one - fy);
                            gs[[ch, cn.y0, cn.x1]] = gs[[ch, cn.y0, cn.x1]] + up * fx * (one - fy);
                            gs[[ch, cn.y1, cn.x0]] = gs[[ch, cn.y1, cn.x0]] + up * (one - fx) * fy;
                            gs[[ch, cn.y1, cn.x1]] = gs[[ch, cn.y1, cn.x1]] + up * fx * fy;
                        }
                        let s00 = src[[ch, cn.y0, cn.x0]];
                        let s01 = src[[ch, cn.y0, cn.x1]];
                        let s10 = src[[ch, cn.y1, cn.x0]];
                        let s11 = src[[ch, cn.y1, cn.x1]];
                        du = du + up * ((s01 - s00) * (one - fy) + (s11 - s10) * fy);
                        dv = dv + up * ((s10 - s00) * (one - fx) + (s11 - s01) * fx);
                    }
                    if let Some(gm) = gu.as_mut() {
                        gm[[r, cc]] = du;
                    }
                    if let Some(gm) = gv.as_mut() {
                        gm[[r, cc]] = dv;
                    }
                }
            }
            if let Some(gs) = gsrc {
                accumulate(grads, is, gs.into_dyn());
            }
            if let Some(gm) = gu {
                accumulate(grads, iu, gm.into_dyn());
            }
            if let Some(gm) = gv {
                accumulate(grads, iv, gm.into_dyn());
            }
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// Gathers a `[row, col]` array at fixed pixel locations into a vector.
    pub fn gather_hw(self, points: &[(usize, usize)]) -> Var<'t, F> {
        let ixn = self.idx;
        let needs = self.needs_grad();
        let pts: Vec<(usize, usize)> = points.to_vec();
        let value = {
            let inner = self.tape.inner.borrow();
            let x = as2(&inner.values[ixn]);
            ndarray::Array1::from_iter(pts.iter().map(|&(r, c)| x[[r, c]]))
        };
        if !needs {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let shape = values[ixn].raw_dim();
            let mut gx = ArrayD::<F>::zeros(shape);
            for (k, &(r, c)) in pts.iter().enumerate() {
                gx[[r, c]] = gx[[r, c]] + g[[k]];
            }
            accumulate(grads, ixn, gx);
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }

    /// 3x3 mean filter over a `[row, col]` array. Border windows average the
    /// pixels that exist, so a constant input stays constant everywhere.
    pub fn box3_filter(self) -> Var<'t, F> {
        let ixn = self.idx;
        let needs = self.needs_grad();
        let value = {
            let inner = self.tape.inner.borrow();
            let x = as2(&inner.values[ixn]);
            let (h, w) = x.dim();
            let mut out = Array2::<F>::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let mut s = F::zero();
                    let mut n = 0usize;
                    for dr in -1isize..=1 {
                        for dc in -1isize..=1 {
                            let rr = r as isize + dr;
                            let cc = c as isize + dc;
                            if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                                s = s + x[[rr as usize, cc as usize]];
                                n += 1;
                            }
                        }
                    }
                    out[[r, c]] = s / F::c(n as f64);
                }
            }
            out
        };
        if !needs {
            return self.tape.constant(value.into_dyn());
        }
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let shape = values[ixn].raw_dim();
            let h = shape[0];
            let w = shape[1];
            let g2 = as2(g);
            let mut gx = Array2::<F>::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let mut n = 0usize;
                    for dr in -1isize..=1 {
                        for dc in -1isize..=1 {
                            let rr = r as isize + dr;
                            let cc = c as isize + dc;
                            if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                                n += 1;
                            }
                        }
                    }
                    let contrib = g2[[r, c]] / F::c(n as f64);
                    for dr in -1isize..=1 {
                        for dc in -1isize..=1 {
                            let rr = r as isize + dr;
                            let cc = c as isize + dc;
                            if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                                gx[[rr as usize, cc as usize]] =
                                    gx[[rr as usize, cc as usize]] + contrib;
                            }
                        }
                    }
                }
            }
            accumulate(grads, ixn, gx.into_dyn());
        });
        self.tape.push(value.into_dyn(), Some(back), true)
    }
}

//! Reverse-mode automatic differentiation on dense arrays.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse to accumulate exact gradients. Nodes built from
//! [`Tape::constant`] are excluded from gradient tracking, so masks and
//! frozen inputs cost nothing on the backward pass.
//!
//! Broadcasting is deliberately narrow: binary operations accept operands of
//! identical shape, or one zero-dimensional scalar operand on either side.
//! Everything wider is spelled out explicitly at the call site.

mod nn;
mod sample;

pub mod gradcheck;

use std::cell::RefCell;

use ndarray::{ArrayD, Axis, IxDyn, SliceInfoElem, Zip};

use crate::real::Real;

type BackFn<F> = Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>, &mut Vec<Option<ArrayD<F>>>)>;

struct TapeInner<F: Real> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs_grad: Vec<bool>,
}

/// Operation recorder. One tape per forward pass; dropped afterwards.
pub struct Tape<F: Real> {
    inner: RefCell<TapeInner<F>>,
}

/// Handle to one tape node. Cheap to copy; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    idx: usize,
}

/// Gradients of one scalar root with respect to every tracked node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `v`; zeros when no path reached it.
    pub fn wrt(&self, v: Var<'_, F>) -> ArrayD<F> {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.shape()),
        }
    }
}

pub(crate) fn accumulate<F: Real>(
    grads: &mut Vec<Option<ArrayD<F>>>,
    idx: usize,
    delta: ArrayD<F>,
) {
    match &mut grads[idx] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}

fn scalar_array<F: Real>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(a: &[usize], b: &[usize]) -> Pairing {
    if a == b {
        Pairing::Same
    } else if a.is_empty() {
        Pairing::LeftScalar
    } else if b.is_empty() {
        Pairing::RightScalar
    } else {
        panic!("incompatible operand shapes {a:?} vs {b:?}");
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                backs: Vec::new(),
                needs_grad: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>, needs_grad: bool) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        inner.needs_grad.push(needs_grad);
        Var {
            tape: self,
            idx: inner.values.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, None, true)
    }

    /// Tracked-but-frozen input; the backward pass never visits it.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, None, false)
    }

    /// Zero-dimensional constant.
    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(scalar_array(v))
    }

    /// Zero-dimensional differentiable scalar.
    pub fn scalar_leaf(&self, v: F) -> Var<'_, F> {
        self.leaf(scalar_array(v))
    }

    /// Accumulates gradients of the scalar `root` with respect to every node.
    ///
    /// Panics when `root` is not a single-element array.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[root.idx].len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; inner.values.len()];
        grads[root.idx] = Some(ArrayD::from_elem(
            inner.values[root.idx].raw_dim(),
            F::one(),
        ));
        for i in (0..=root.idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &inner.backs[i] {
                let g = grads[i].clone().expect("checked above");
                back(&inner.values, &g, &mut grads);
            }
        }
        Gradients { grads }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> ArrayD<F> {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    pub fn shape(&self) -> IxDyn {
        IxDyn(&self.tape.inner.borrow().values[self.idx].shape().to_vec())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.idx].shape().to_vec()
    }

    pub fn scalar_value(&self) -> F {
        let inner = self.tape.inner.borrow();
        let v = &inner.values[self.idx];
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("single element")
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().needs_grad[self.idx]
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// Elementwise binary op. `da`/`db` map `(a, b, upstream)` to the local
    /// gradient contribution for the respective operand.
    fn binary(
        self,
        rhs: Var<'t, F>,
        f: impl Fn(F, F) -> F,
        da: impl Fn(F, F, F) -> F + 'static,
        db: impl Fn(F, F, F) -> F + 'static,
    ) -> Var<'t, F> {
        self.same_tape(&rhs);
        let (ia, ib) = (self.idx, rhs.idx);
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.values[ia], &inner.values[ib]);
            match pairing(a.shape(), b.shape()) {
                Pairing::Same => Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)),
                Pairing::LeftScalar => {
                    let av = a[[]];
                    b.mapv(|y| f(av, y))
                }
                Pairing::RightScalar => {
                    let bv = b[[]];
                    a.mapv(|x| f(x, bv))
                }
            }
        };
        if !(na || nb) {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let (a, b) = (&values[ia], &values[ib]);
            match pairing(a.shape(), b.shape()) {
                Pairing::Same => {
                    if na {
                        let d = Zip::from(a).and(b).and(g).map_collect(|&x, &y, &u| da(x, y, u));
                        accumulate(grads, ia, d);
                    }
                    if nb {
                        let d = Zip::from(a).and(b).and(g).map_collect(|&x, &y, &u| db(x, y, u));
                        accumulate(grads, ib, d);
                    }
                }
                Pairing::LeftScalar => {
                    let av = a[[]];
                    if na {
                        let total = b
                            .iter()
                            .zip(g.iter())
                            .map(|(&y, &u)| da(av, y, u))
                            .fold(F::zero(), |s, x| s + x);
                        accumulate(grads, ia, scalar_array(total));
                    }
                    if nb {
                        let d = Zip::from(b).and(g).map_collect(|&y, &u| db(av, y, u));
                        accumulate(grads, ib, d);
                    }
                }
                Pairing::RightScalar => {
                    let bv = b[[]];
                    if na {
                        let d = Zip::from(a).and(g).map_collect(|&x, &u| da(x, bv, u));
                        accumulate(grads, ia, d);
                    }
                    if nb {
                        let total = a
                            .iter()
                            .zip(g.iter())
                            .map(|(&x, &u)| db(x, bv, u))
                            .fold(F::zero(), |s, x| s + x);
                        accumulate(grads, ib, scalar_array(total));
                    }
                }
            }
        });
        self.tape.push(value, Some(back), true)
    }

    /// Elementwise unary op. `df` maps `(input, output, upstream)` to the
    /// gradient contribution.
    fn unary(self, f: impl Fn(F) -> F, df: impl Fn(F, F, F) -> F + 'static) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let value = self.tape.inner.borrow().values[ix].mapv(&f);
        if !needs {
            return self.tape.constant(value);
        }
        let out_shape = value.raw_dim();
        let y = value.clone();
        let back: BackFn<F> = Box::new(move |values, g, grads| {
            let x = &values[ix];
            debug_assert_eq!(g.raw_dim(), out_shape);
            let d = Zip::from(x).and(&y).and(g).map_collect(|&xv, &yv, &u| df(xv, yv, u));
            accumulate(grads, ix, d);
        });
        self.tape.push(value, Some(back), true)
    }

    pub fn add(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(rhs, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(rhs, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(rhs, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(
            rhs,
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(
            rhs,
            |a, b| if a <= b { a } else { b },
            |a, b, g| if a <= b { g } else { F::zero() },
            |a, b, g| if a <= b { F::zero() } else { g },
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.binary(
            rhs,
            |a, b| if a >= b { a } else { b },
            |a, b, g| if a >= b { g } else { F::zero() },
            |a, b, g| if a >= b { F::zero() } else { g },
        )
    }

    pub fn neg(self) -> Var<'t, F> {
        self.unary(|x| -x, |_, _, g| -g)
    }

    /// Absolute value with sign subgradient (zero at the kink).
    pub fn abs(self) -> Var<'t, F> {
        self.unary(
            |x| x.abs(),
            |x, _, g| {
                if x > F::zero() {
                    g
                } else if x < F::zero() {
                    -g
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary(|x| x.sqrt(), |_, y, g| g / (F::c(2.0) * y))
    }

    pub fn ln(self) -> Var<'t, F> {
        self.unary(|x| x.ln(), |x, _, g| g / x)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary(|x| x.exp(), |_, y, g| g * y)
    }

    pub fn sin(self) -> Var<'t, F> {
        self.unary(|x| x.sin(), |x, _, g| g * x.cos())
    }

    pub fn cos(self) -> Var<'t, F> {
        self.unary(|x| x.cos(), |x, _, g| -g * x.sin())
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y, g| g * y * (F::one() - y),
        )
    }

    /// Exponential linear unit with unit slope.
    pub fn elu(self) -> Var<'t, F> {
        self.unary(
            |x| if x > F::zero() { x } else { x.exp() - F::one() },
            |x, y, g| if x > F::zero() { g } else { g * (y + F::one()) },
        )
    }

    /// max(x, 0); the kink routes its gradient to the zero side.
    pub fn relu(self) -> Var<'t, F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _, g| if x > F::zero() { g } else { F::zero() },
        )
    }

    /// Multiplies by a compile-time-known constant.
    pub fn scale(self, k: F) -> Var<'t, F> {
        self.unary(move |x| x * k, move |_, _, g| g * k)
    }

    /// Adds a compile-time-known constant.
    pub fn offset(self, k: F) -> Var<'t, F> {
        self.unary(move |x| x + k, |_, _, g| g)
    }

    pub fn recip(self) -> Var<'t, F> {
        self.unary(|x| F::one() / x, |_, y, g| -g * y * y)
    }

    /// Sum of all elements, as a zero-dimensional node.
    pub fn sum_all(self) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let (value, in_shape) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[ix];
            (
                scalar_array(v.iter().fold(F::zero(), |s, &x| s + x)),
                v.raw_dim(),
            )
        };
        if !needs {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            let gv = g[[]];
            accumulate(grads, ix, ArrayD::from_elem(in_shape.clone(), gv));
        });
        self.tape.push(value, Some(back), true)
    }

    /// Mean of all elements, as a zero-dimensional node.
    pub fn mean_all(self) -> Var<'t, F> {
        let n = self.tape.inner.borrow().values[self.idx].len();
        assert!(n > 0, "mean of empty array");
        self.sum_all().scale(F::one() / F::c(n as f64))
    }

    /// Sum over one axis.
    pub fn sum_axis(self, axis: usize) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let (value, in_shape) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[ix];
            (v.sum_axis(Axis(axis)), v.raw_dim())
        };
        if !needs {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            let expanded = g
                .clone()
                .insert_axis(Axis(axis))
                .broadcast(in_shape.clone())
                .expect("sum_axis backward broadcast")
                .to_owned();
            accumulate(grads, ix, expanded);
        });
        self.tape.push(value, Some(back), true)
    }

    /// Mean over one axis.
    pub fn mean_axis(self, axis: usize) -> Var<'t, F> {
        let n = self.tape.inner.borrow().values[self.idx].shape()[axis];
        assert!(n > 0, "mean over empty axis");
        self.sum_axis(axis).scale(F::one() / F::c(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let (value, in_shape) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[ix];
            (
                v.clone()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("reshape preserves element count"),
                v.raw_dim(),
            )
        };
        if !needs {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            let d = g
                .clone()
                .into_shape_with_order(in_shape.clone())
                .expect("reshape backward");
            accumulate(grads, ix, d);
        });
        self.tape.push(value, Some(back), true)
    }

    /// Contiguous sub-view given per-axis `(start, end)` bounds.
    pub fn slice_ranges(self, ranges: &[(usize, usize)]) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let info: Vec<SliceInfoElem> = ranges
            .iter()
            .map(|&(s, e)| SliceInfoElem::Slice {
                start: s as isize,
                end: Some(e as isize),
                step: 1,
            })
            .collect();
        let (value, in_shape) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[ix];
            assert_eq!(v.ndim(), ranges.len(), "slice rank mismatch");
            (v.slice(info.as_slice()).to_owned(), v.raw_dim())
        };
        if !needs {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            let mut full = ArrayD::zeros(in_shape.clone());
            full.slice_mut(info.as_slice()).assign(g);
            accumulate(grads, ix, full);
        });
        self.tape.push(value, Some(back), true)
    }

    /// Selects index `i` along the first axis, dropping that axis.
    pub fn index_axis0(self, i: usize) -> Var<'t, F> {
        let ix = self.idx;
        let needs = self.needs_grad();
        let (value, in_shape) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[ix];
            (v.index_axis(Axis(0), i).to_owned(), v.raw_dim())
        };
        if !needs {
            return self.tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            let mut full = ArrayD::zeros(in_shape.clone());
            full.index_axis_mut(Axis(0), i).assign(g);
            accumulate(grads, ix, full);
        });
        self.tape.push(value, Some(back), true)
    }

    /// Concatenates along `axis`.
    pub fn concat(axis: usize, parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tape = parts[0].tape;
        for p in parts {
            parts[0].same_tape(p);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let needs_each: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
        let any_needs = needs_each.iter().any(|&b| b);
        let (value, spans) = {
            let inner = tape.inner.borrow();
            let views: Vec<_> = idxs.iter().map(|&i| inner.values[i].view()).collect();
            let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
            let mut spans = Vec::with_capacity(idxs.len());
            let mut off = 0usize;
            for &i in &idxs {
                let w = inner.values[i].shape()[axis];
                spans.push((off, off + w));
                off += w;
            }
            (value, spans)
        };
        if !any_needs {
            return tape.constant(value);
        }
        let back: BackFn<F> = Box::new(move |_, g, grads| {
            for (k, &(s, e)) in spans.iter().enumerate() {
                if !needs_each[k] {
                    continue;
                }
                let piece = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(s as isize..e as isize))
                    .to_owned();
                accumulate(grads, idxs[k], piece);
            }
        });
        tape.push(value, Some(back), true)
    }
}

impl<'t, F: Real> std::ops::Add for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, F: Real> std::ops::Sub for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, F: Real> std::ops::Mul for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t, F: Real> std::ops::Div for Var<'t, F> {
    type Output = Var<'t, F>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'t, F: Real> std::ops::Neg for Var<'t, F> {
    type Output = Var<'t, F>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

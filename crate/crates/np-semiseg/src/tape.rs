//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each forward op as a node holding the output value and
//! a closure that scatters the incoming gradient to the node's parents.
//! [`Tape::backward`] walks the nodes in reverse and returns a gradient slot
//! per node; leaves created from parameter tensors keep their gradients
//! there for the caller to collect.
//!
//! Every op validates that its output is finite and fails with a numeric
//! error otherwise, so NaN/Inf never propagates silently.
//!
//! The tape is generic over the kernel scalar so the identical forward graph
//! can be rebuilt at `f64` inside the finite-difference oracle; training and
//! inference always run at `f32`.

use crate::tensor::{real, Real, Tensor};
use crate::{NpError, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut [Option<Tensor<T>>])>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    back: Option<BackFn<T>>,
}

/// Recorded computation graph.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adds `delta` into a gradient slot, allocating it on first touch.
pub(crate) fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *d;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Inserts a value with no parents (parameter, input, or constant).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back: None,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push(&self, value: Tensor<T>, back: BackFn<T>) -> Result<Var> {
        if !value.is_all_finite() {
            return Err(NpError::Numeric(
                "non-finite values produced by tensor op".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back: Some(back),
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient of a scalar node with respect to everything upstream.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(NpError::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        slots[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            let grad = match slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &nodes[id].back {
                back(&grad, &mut slots);
            }
            slots[id] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    // ---- elementwise and reduction ops ----

    fn binary_same_shape(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        back: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NpError::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut da = Tensor::zeros(ca.shape());
                let mut db = Tensor::zeros(cb.shape());
                for i in 0..g.numel() {
                    let (ga, gb) = back(ca.data()[i], cb.data()[i], g.data()[i]);
                    da.data_mut()[i] = ga;
                    db.data_mut()[i] = gb;
                }
                accumulate(&mut slots[a.0], da);
                accumulate(&mut slots[b.0], db);
            }),
        )
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(T) -> T,
        dfdx: impl Fn(T) -> T + 'static,
    ) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(&f);
        let ca = Rc::clone(&va);
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut da = Tensor::zeros(ca.shape());
                for i in 0..g.numel() {
                    da.data_mut()[i] = g.data()[i] * dfdx(ca.data()[i]);
                }
                accumulate(&mut slots[a.0], da);
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, move |_| c)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x + c, |_| T::one())
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), |x| T::one() / x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sqrt(), |x| {
            real::<T>(0.5) / x.sqrt()
        })
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, |x| real::<T>(2.0) * x)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Elementwise multiplication with a constant tensor (dropout masks,
    /// fixed noise); no gradient flows into the constant.
    pub fn mul_const(&self, a: Var, k: &Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != k.shape() {
            return Err(NpError::Shape(format!(
                "mul_const shapes {:?} vs {:?}",
                va.shape(),
                k.shape()
            )));
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .zip(k.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let mask = k.clone();
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut da = Tensor::zeros(mask.shape());
                for i in 0..g.numel() {
                    da.data_mut()[i] = g.data()[i] * mask.data()[i];
                }
                accumulate(&mut slots[a.0], da);
            }),
        )
    }

    /// Row-major sequential sum to a scalar.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut acc = T::zero();
        for &x in va.data() {
            acc = acc + x;
        }
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            Box::new(move |g, slots| {
                let go = g.data()[0];
                accumulate(&mut slots[a.0], Tensor::full(&shape, go));
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / real::<T>(n as f64))
    }

    /// Scalar `sum_i coeff_i * x_i`; all vars must be scalars.
    pub fn linear_combination(&self, terms: &[(T, Var)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(c, v) in terms {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(NpError::Shape(
                    "linear_combination expects scalar vars".into(),
                ));
            }
            acc = acc + c * val.data()[0];
        }
        let terms = terms.to_vec();
        self.push(
            Tensor::scalar(acc),
            Box::new(move |g, slots| {
                let go = g.data()[0];
                for &(c, v) in &terms {
                    accumulate(&mut slots[v.0], Tensor::scalar(go * c));
                }
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = va.reshaped(shape)?;
        let orig = va.shape().to_vec();
        self.push(
            out,
            Box::new(move |g, slots| {
                let back = g.reshaped(&orig).expect("reshape backward");
                accumulate(&mut slots[a.0], back);
            }),
        )
    }
}

/// Gradient slots produced by [`Tape::backward`].
pub struct Gradients<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. `v`; `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_product_and_sum() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, 3.0]));
        let y = tape.leaf(Tensor::from_vec(vec![5.0, 7.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum_all(p).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 31.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_var_accumulates_both_paths() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.square(x).unwrap();
        let tot = tape.add(sq, x).unwrap(); // x^2 + x
        let grads = tape.backward(tot).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 7.0);
    }

    #[test]
    fn nan_output_is_rejected() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0]));
        assert!(matches!(tape.ln(x), Err(NpError::Numeric(_))));
    }

    #[test]
    fn softplus_matches_closed_form_at_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

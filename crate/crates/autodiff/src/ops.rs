//! Differentiable primitives on [`Var`].

use std::ops;
use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use crate::sparse::SparseMap;
use crate::var::{Tensor, Var};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `t` down to `shape`, the reverse of broadcasting.
pub fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let extra = t.ndim() - shape.len();
    let mut out = t.clone();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    debug_assert_eq!(out.shape(), shape);
    out
}

fn binary_value(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let mut out = a.as_standard_layout().into_owned();
        ndarray::Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shapes(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn unary_value(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = a.as_standard_layout().into_owned();
    out.mapv_inplace(f);
    out
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = binary_value(self.value(), other.value(), |x, y| x + y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            "add",
            vec![self.clone(), other.clone()],
            move |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.sum_to(&sa)),
                    p[1].requires_grad().then(|| g.sum_to(&sb)),
                ]
            },
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = binary_value(self.value(), other.value(), |x, y| x - y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            "sub",
            vec![self.clone(), other.clone()],
            move |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.sum_to(&sa)),
                    p[1].requires_grad().then(|| g.neg().sum_to(&sb)),
                ]
            },
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = binary_value(self.value(), other.value(), |x, y| x * y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            "mul",
            vec![self.clone(), other.clone()],
            move |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.mul(&p[1]).sum_to(&sa)),
                    p[1].requires_grad().then(|| g.mul(&p[0]).sum_to(&sb)),
                ]
            },
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = binary_value(self.value(), other.value(), |x, y| x / y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            "div",
            vec![self.clone(), other.clone()],
            move |p, out, g| {
                vec![
                    p[0].requires_grad().then(|| g.div(&p[1]).sum_to(&sa)),
                    p[1].requires_grad()
                        .then(|| g.mul(out).div(&p[1]).neg().sum_to(&sb)),
                ]
            },
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = unary_value(self.value(), |x| x * c);
        Var::from_op(value, "scale", vec![self.clone()], move |_, _, g| {
            vec![Some(g.scale(c))]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = unary_value(self.value(), |x| x + c);
        Var::from_op(value, "add_scalar", vec![self.clone()], |_, _, g| {
            vec![Some(g.clone())]
        })
    }

    pub fn exp(&self) -> Var {
        let value = unary_value(self.value(), f64::exp);
        Var::from_op(value, "exp", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(out))]
        })
    }

    pub fn ln(&self) -> Var {
        let value = unary_value(self.value(), f64::ln);
        Var::from_op(value, "ln", vec![self.clone()], |p, _, g| {
            vec![Some(g.div(&p[0]))]
        })
    }

    pub fn sqrt(&self) -> Var {
        let value = unary_value(self.value(), f64::sqrt);
        Var::from_op(value, "sqrt", vec![self.clone()], |_, out, g| {
            vec![Some(g.scale(0.5).div(out))]
        })
    }

    pub fn square(&self) -> Var {
        let value = unary_value(self.value(), |x| x * x);
        Var::from_op(value, "square", vec![self.clone()], |p, _, g| {
            vec![Some(g.mul(&p[0]).scale(2.0))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = unary_value(self.value(), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Var::from_op(value, "sigmoid", vec![self.clone()], |_, out, g| {
            let slope = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(g.mul(&slope))]
        })
    }

    pub fn tanh(&self) -> Var {
        let value = unary_value(self.value(), f64::tanh);
        Var::from_op(value, "tanh", vec![self.clone()], |_, out, g| {
            let slope = out.square().neg().add_scalar(1.0);
            vec![Some(g.mul(&slope))]
        })
    }

    /// Multiplies by a mask fixed at forward time. The mask is piecewise
    /// constant in the input, so its own derivative is zero almost everywhere.
    fn masked(&self, op: &'static str, mask: Tensor) -> Var {
        let value = binary_value(self.value(), &mask, |x, m| x * m);
        Var::from_op(value, op, vec![self.clone()], move |_, _, g| {
            vec![Some(g.mul(&Var::constant(mask.clone())))]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = unary_value(self.value(), |x| if x > 0.0 { 1.0 } else { slope });
        self.masked("leaky_relu", mask)
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn abs(&self) -> Var {
        let mask = unary_value(self.value(), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.masked("abs", mask)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = unary_value(self.value(), |x| x.clamp(lo, hi));
        let mask = unary_value(self.value(), |x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
        Var::from_op(value, "clamp", vec![self.clone()], move |_, _, g| {
            vec![Some(g.mul(&Var::constant(mask.clone())))]
        })
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands.
    pub fn matmul(&self, other: &Var) -> Var {
        let value = matmul_value(self.value(), other.value());
        Var::from_op(
            value,
            "matmul",
            vec![self.clone(), other.clone()],
            |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.matmul(&p[1].transpose_last())),
                    p[1].requires_grad().then(|| p[0].transpose_last().matmul(g)),
                ]
            },
        )
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&self) -> Var {
        let n = self.ndim();
        assert!(n >= 2, "transpose_last needs at least two axes");
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, "permute", vec![self.clone()], move |_, _, g| {
            vec![Some(g.permute(&inverse))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let src = self.shape().to_vec();
        if src == shape {
            return self.clone();
        }
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", src, shape));
        Var::from_op(value, "reshape", vec![self.clone()], move |_, _, g| {
            vec![Some(g.reshape(&src))]
        })
    }

    pub fn sum(&self) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(value, "sum", vec![self.clone()], move |_, _, g| {
            vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        let mut value = self.value().clone();
        for &a in axes {
            value = value.sum_axis(Axis(a)).insert_axis(Axis(a));
        }
        let shape = self.shape().to_vec();
        Var::from_op(value, "sum_axes", vec![self.clone()], move |_, _, g| {
            vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(1.0 / n.max(1) as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        let src = self.shape().to_vec();
        Var::from_op(value, "broadcast_to", vec![self.clone()], move |_, _, g| {
            vec![Some(g.sum_to(&src))]
        })
    }

    /// Reverse of [`Var::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = reduce_to(self.value(), shape);
        let src = self.shape().to_vec();
        Var::from_op(value, "sum_to", vec![self.clone()], move |_, _, g| {
            vec![Some(g.broadcast_to(&src))]
        })
    }

    pub fn sparse(&self, map: &Rc<SparseMap>) -> Var {
        let value = map.apply(self.value());
        let map = map.clone();
        Var::from_op(value, "sparse", vec![self.clone()], move |_, _, g| {
            vec![Some(g.sparse(&map.transpose()))]
        })
    }

    /// Softmax along the last axis, shifted by the (detached) row maximum.
    pub fn softmax_last(&self) -> Var {
        let last = self.ndim() - 1;
        let max = self
            .value()
            .map_axis(Axis(last), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .insert_axis(Axis(last));
        let shifted = self.sub(&Var::constant(max));
        let e = shifted.exp();
        let z = e.sum_axes(&[last]);
        e.div(&z)
    }
}

fn matmul_value(a: &Tensor, b: &Tensor) -> Tensor {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2d");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("2d");
            assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimensions");
            a2.dot(&b2).into_dyn()
        }
        (3, 3) => {
            let a3 = a.view().into_dimensionality::<Ix3>().expect("3d");
            let b3 = b.view().into_dimensionality::<Ix3>().expect("3d");
            let (batch, m, k) = a3.dim();
            let (bb, k2, n) = b3.dim();
            assert_eq!(batch, bb, "matmul batch sizes");
            assert_eq!(k, k2, "matmul inner dimensions");
            let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
            for i in 0..batch {
                let mut c = out.index_axis_mut(Axis(0), i);
                general_mat_mul(1.0, &a3.index_axis(Axis(0), i), &b3.index_axis(Axis(0), i), 0.0, &mut c);
            }
            out.into_dyn()
        }
        (x, y) => panic!("matmul expects 2-D or 3-D operands, got {x}-D and {y}-D"),
    }
}

/// Dense 2-D array view of a rank-2 tensor.
pub fn as_matrix(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor").to_owned()
}

macro_rules! binary_trait {
    ($trait:ident, $method:ident, $call:ident) => {
        impl ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.$call(rhs)
            }
        }
        impl ops::$trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                (&self).$call(&rhs)
            }
        }
        impl ops::$trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                (&self).$call(rhs)
            }
        }
        impl ops::$trait<f64> for &Var {
            type Output = Var;
            fn $method(self, rhs: f64) -> Var {
                self.$call(&Var::scalar(rhs))
            }
        }
    };
}

binary_trait!(Add, add, add);
binary_trait!(Sub, sub, sub);
binary_trait!(Mul, mul, mul);
binary_trait!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl ops::Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}

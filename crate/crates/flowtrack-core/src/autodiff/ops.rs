//! Elementwise, shape, reduction, and matrix operations on [`Var`].

use super::{Tape, Var};
use crate::real::Real;
use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn};

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        // df(input, output) -> local derivative
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |x| x.mapv(&f));
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                let x = args.inputs[0];
                let mut out = args.grad.clone();
                out.zip_mut_with(x, |g, &xv| *g *= df(xv, T::zero()));
                vec![out]
            })),
        )
    }

    /// Unary op whose derivative is a function of the output value.
    fn unary_from_output(
        self,
        f: impl Fn(T) -> T,
        df_out: impl Fn(T) -> T + 'static,
    ) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |x| x.mapv(&f));
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                let mut out = args.grad.clone();
                out.zip_mut_with(args.output, |g, &yv| *g *= df_out(yv));
                vec![out]
            })),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of_f64(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of_f64(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary_from_output(|x| x.tanh(), |y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary_from_output(
            |x| T::one() / (T::one() + (-x).exp()),
            |y| y * (T::one() - y),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let k = T::of_f64(0.7978845608028654); // sqrt(2/pi)
        let a = T::of_f64(0.044715);
        let half = T::of_f64(0.5);
        let three = T::of_f64(3.0);
        self.unary(
            move |x| half * x * (T::one() + (k * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + a * x * x * x);
                let t = u.tanh();
                let sech2 = T::one() - t * t;
                half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * a * x * x)
            },
        )
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| T::of_f64(2.0) * x)
    }

    /// Elementwise smooth-L1: `x^2/(2b)` below the threshold `b`, `|x| - b/2`
    /// above it.
    pub fn smooth_l1(self, beta: f64) -> Var<'t, T> {
        let b = T::of_f64(beta);
        let half = T::of_f64(0.5);
        self.unary(
            move |x| {
                if x.abs() < b {
                    half * x * x / b
                } else {
                    x.abs() - half * b
                }
            },
            move |x, _| {
                if x.abs() < b {
                    x / b
                } else if x > T::zero() {
                    T::one()
                } else {
                    -T::one()
                }
            },
        )
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        value: ArrayD<T>,
        backward: impl Fn(&super::BackwardArgs<'_, T>) -> Vec<ArrayD<T>> + 'static,
    ) -> Var<'t, T> {
        self.tape
            .push(value, vec![self.index, rhs.index], Some(Box::new(backward)))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            self.tape.with_value(rhs.index, |b| {
                assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
                a + b
            })
        });
        self.binary(rhs, value, |args| {
            vec![args.grad.clone(), args.grad.clone()]
        })
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            self.tape.with_value(rhs.index, |b| {
                assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
                a - b
            })
        });
        self.binary(rhs, value, |args| {
            vec![args.grad.clone(), args.grad.mapv(|g| -g)]
        })
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            self.tape.with_value(rhs.index, |b| {
                assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
                a * b
            })
        });
        self.binary(rhs, value, |args| {
            vec![args.grad * args.inputs[1], args.grad * args.inputs[0]]
        })
    }

    /// Elementwise multiply by a constant array (no gradient to the constant).
    pub fn mul_const(self, c: &ArrayD<T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            assert_eq!(a.shape(), c.shape(), "mul_const: shape mismatch");
            a * c
        });
        let c = c.clone();
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| vec![args.grad * &c])),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            a.clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: incompatible element count")
        });
        let from: Vec<usize> = self.shape();
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                vec![args
                    .grad
                    .clone()
                    .into_shape_with_order(IxDyn(&from))
                    .unwrap()]
            })),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            to_standard(a.view().permuted_axes(IxDyn(axes)).to_owned())
        });
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                vec![to_standard(
                    args.grad.view().permuted_axes(IxDyn(&inverse)).to_owned(),
                )]
            })),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            to_standard(
                a.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                    .to_owned(),
            )
        });
        let full_shape = self.shape();
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                let mut out = ArrayD::zeros(IxDyn(&full_shape));
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(args.grad);
                vec![out]
            })),
        )
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let value = self
            .tape
            .with_value(self.index, |a| a.sum_axis(Axis(axis)));
        let in_shape = self.shape();
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                let expanded = args.grad.clone().insert_axis(Axis(axis));
                vec![expanded.broadcast(IxDyn(&in_shape)).unwrap().to_owned()]
            })),
        )
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            ArrayD::from_elem(IxDyn(&[]), a.iter().copied().sum::<T>())
        });
        let in_shape = self.shape();
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |args| {
                let g = *args.grad.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&in_shape), g)]
            })),
        )
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.tape.with_value(self.index, |a| a.len());
        self.sum_all().scale(1.0 / n as f64)
    }

    /// 2-D matrix product.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            self.tape.with_value(rhs.index, |b| {
                let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs");
                let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs");
                a2.dot(&b2).into_dyn()
            })
        });
        self.binary(rhs, value, |args| {
            let a = args.inputs[0].view().into_dimensionality::<Ix2>().unwrap();
            let b = args.inputs[1].view().into_dimensionality::<Ix2>().unwrap();
            let g = args.grad.view().into_dimensionality::<Ix2>().unwrap();
            vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
        })
    }

    /// Batched 3-D matrix product: `(B, m, k) x (B, k, n) -> (B, m, n)`.
    pub fn bmm(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self.index, |a| {
            self.tape.with_value(rhs.index, |b| {
                let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs");
                let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs");
                assert_eq!(a3.shape()[0], b3.shape()[0], "bmm: batch mismatch");
                let (bs, m, _k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
                let n = b3.shape()[2];
                let mut out = ndarray::Array3::<T>::zeros((bs, m, n));
                for i in 0..bs {
                    out.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
                }
                out.into_dyn()
            })
        });
        self.binary(rhs, value, |args| {
            let a = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
            let b = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
            let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
            let bs = a.shape()[0];
            let mut da = ndarray::Array3::<T>::zeros((bs, a.shape()[1], a.shape()[2]));
            let mut db = ndarray::Array3::<T>::zeros((bs, b.shape()[1], b.shape()[2]));
            for i in 0..bs {
                let gi = g.index_axis(Axis(0), i);
                da.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&b.index_axis(Axis(0), i).t()));
                db.index_axis_mut(Axis(0), i)
                    .assign(&a.index_axis(Axis(0), i).t().dot(&gi));
            }
            vec![da.into_dyn(), db.into_dyn()]
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let value = self
            .tape
            .with_value(self.index, |a| softmax_last_array(a));
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(|args| {
                // dx = y * (g - sum(g * y, last axis))
                let y = args.output;
                let g = args.grad;
                let last = y.ndim() - 1;
                let cols = y.shape()[last];
                let out = g * y;
                let rows = out.len() / cols;
                let mut flat = out.into_shape_with_order(IxDyn(&[rows, cols])).unwrap();
                let yflat = y.view().into_shape_with_order((rows, cols)).unwrap();
                for r in 0..rows {
                    let mut row = flat.index_axis_mut(Axis(0), r);
                    let dot: T = row.iter().copied().sum();
                    row.zip_mut_with(&yflat.index_axis(Axis(0), r), |o, &yv| {
                        *o -= dot * yv;
                    });
                }
                vec![flat.into_shape_with_order(IxDyn(y.shape())).unwrap()]
            })),
        )
    }
}

pub(crate) fn softmax_last_array<T: Real>(a: &ArrayD<T>) -> ArrayD<T> {
    let last = a.ndim() - 1;
    let cols = a.shape()[last];
    let rows = a.len() / cols;
    let mut out = a
        .clone()
        .into_shape_with_order(IxDyn(&[rows, cols]))
        .unwrap();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / sum);
    }
    out.into_shape_with_order(IxDyn(a.shape())).unwrap()
}

fn to_standard<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.shape().to_vec();
        ArrayD::from_shape_vec(IxDyn(&shape), a.iter().copied().collect()).unwrap()
    }
}

/// Concatenate along an existing axis.
pub fn concat<'t, T: Real>(axis: usize, parts: &[Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty());
    let tape: &'t Tape<T> = parts[0].tape();
    let values: Vec<ArrayD<T>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = to_standard(ndarray::concatenate(Axis(axis), &views).expect("concat"));
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    tape.push(
        value,
        parts.iter().map(|p| p.index).collect(),
        Some(Box::new(move |args| {
            let mut out = Vec::with_capacity(lens.len());
            let mut start = 0usize;
            for &len in &lens {
                out.push(to_standard(
                    args.grad
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned(),
                ));
                start += len;
            }
            out
        })),
    )
}

/// Stack along a fresh leading axis.
pub fn stack<'t, T: Real>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    let expanded: Vec<Var<'t, T>> = parts
        .iter()
        .map(|p| {
            let mut shape = p.shape();
            shape.insert(0, 1);
            p.reshape(&shape)
        })
        .collect();
    concat(0, &expanded)
}

//! Elementwise, broadcast, reduction, matrix and shape operations.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::{math, Tensor};

/// `C = op(A) * op(B)` (+ `C` when `accumulate`), row-major, via matrixmultiply.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn assert_same_shape(g: &Graph, a: Var, b: Var, op: &str) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{op}: shape mismatch {:?} vs {:?}",
        g.shape(a),
        g.shape(b)
    );
}

impl Graph {
    /// Elementwise map with derivative `df(x, y)` in terms of input and output.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                let g = xs
                    .iter()
                    .zip(ys)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "add");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a), data);
        self.custom(
            value,
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad.to_vec();
                vec![
                    ctx.needs[0].then(|| g.clone()),
                    ctx.needs[1].then_some(g),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "sub");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_parts(self.shape(a), data);
        self.custom(
            value,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "mul");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a), data);
        self.custom(
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, y)| g * y).collect()),
                    ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "div");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::from_parts(self.shape(a), data);
        self.custom(
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, y)| g / y).collect()),
                    ctx.needs[1].then(|| {
                        ctx.grad
                            .iter()
                            .zip(x.iter().zip(y))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect()
                    }),
                ]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |x| x * c, move |_, _| c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |x| if x > 0.0 { x } else { math::exp(x) - 1.0 },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
        const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
        self.unary(
            x,
            |x| 0.5 * x * (1.0 + math::erf(x * INV_SQRT2)),
            |x, _| {
                let cdf = 0.5 * (1.0 + math::erf(x * INV_SQRT2));
                cdf + x * INV_SQRT_2PI * math::exp(-0.5 * x * x)
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, math::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, math::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            f64::abs,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, math::sqrt, |_, y| 0.5 / y)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |x| x * x, |x, _| 2.0 * x)
    }

    /// `x + b` with `b` broadcast along the last axis (`b.len()` = last dim).
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Var {
        let k = self.value(b).numel();
        let xs = self.value(x);
        assert!(
            k > 0 && xs.shape().last() == Some(&k),
            "add_col_bias: {:?} vs bias {:?}",
            xs.shape(),
            self.shape(b)
        );
        let bs = self.value(b).data();
        let data = xs
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(bs).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::from_parts(xs.shape(), data);
        self.custom(
            value,
            &[x, b],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; k];
                    for row in ctx.grad.chunks(k) {
                        for (a, g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            }),
        )
    }

    /// `x * v` with `v` broadcast along the last axis.
    pub fn mul_cols(&mut self, x: Var, v: Var) -> Var {
        let k = self.value(v).numel();
        let xs = self.value(x);
        assert!(
            k > 0 && xs.shape().last() == Some(&k),
            "mul_cols: {:?} vs {:?}",
            xs.shape(),
            self.shape(v)
        );
        let vs = self.value(v).data();
        let data = xs
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(vs).map(|(x, v)| x * v))
            .collect();
        let value = Tensor::from_parts(xs.shape(), data);
        self.custom(
            value,
            &[x, v],
            Box::new(move |ctx| {
                let (xs, vs) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs[0].then(|| {
                    ctx.grad
                        .chunks(k)
                        .flat_map(|row| row.iter().zip(vs).map(|(g, v)| g * v))
                        .collect()
                });
                let gv = ctx.needs[1].then(|| {
                    let mut gv = vec![0.0; k];
                    for (grow, xrow) in ctx.grad.chunks(k).zip(xs.chunks(k)) {
                        for ((a, g), x) in gv.iter_mut().zip(grow).zip(xrow) {
                            *a += g * x;
                        }
                    }
                    gv
                });
                vec![gx, gv]
            }),
        )
    }

    /// `x + b` with `b` broadcast along every axis but the first
    /// (per-channel bias on `[C, ...]`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let r = self.value(b).numel();
        let xs = self.value(x);
        assert!(
            r > 0 && xs.shape().first() == Some(&r),
            "add_row_bias: {:?} vs {:?}",
            xs.shape(),
            self.shape(b)
        );
        let inner = xs.numel() / r;
        let bs = self.value(b).data();
        let data = xs
            .data()
            .chunks(inner.max(1))
            .zip(bs)
            .flat_map(|(row, b)| row.iter().map(move |x| x + b))
            .collect();
        let value = Tensor::from_parts(xs.shape(), data);
        self.custom(
            value,
            &[x, b],
            Box::new(move |ctx| {
                let gb = ctx.needs[1]
                    .then(|| ctx.grad.chunks(inner.max(1)).map(|c| c.iter().sum()).collect());
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            }),
        )
    }

    /// `x * v` with `v` broadcast along every axis but the first.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Var {
        let r = self.value(v).numel();
        let xs = self.value(x);
        assert!(
            r > 0 && xs.shape().first() == Some(&r),
            "mul_rows: {:?} vs {:?}",
            xs.shape(),
            self.shape(v)
        );
        let inner = (xs.numel() / r).max(1);
        let vs = self.value(v).data();
        let data = xs
            .data()
            .chunks(inner)
            .zip(vs)
            .flat_map(|(row, v)| row.iter().map(move |x| x * v))
            .collect();
        let value = Tensor::from_parts(xs.shape(), data);
        self.custom(
            value,
            &[x, v],
            Box::new(move |ctx| {
                let (xs, vs) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs[0].then(|| {
                    ctx.grad
                        .chunks(inner)
                        .zip(vs)
                        .flat_map(|(row, v)| row.iter().map(move |g| g * v))
                        .collect()
                });
                let gv = ctx.needs[1].then(|| {
                    ctx.grad
                        .chunks(inner)
                        .zip(xs.chunks(inner))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect()
                });
                vec![gx, gv]
            }),
        )
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "scale_by: scale must be a scalar");
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|x| x * sv);
        self.custom(
            value,
            &[x, s],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let sv = ctx.inputs[1].data()[0];
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * sv).collect()),
                    ctx.needs[1].then(|| vec![ctx.grad.iter().zip(xs).map(|(g, x)| g * x).sum()]),
                ]
            }),
        )
    }

    /// `x / s` for a single-element `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "div_by: divisor must be a scalar");
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|x| x / sv);
        self.custom(
            value,
            &[x, s],
            Box::new(move |ctx| {
                let sv = ctx.inputs[1].data()[0];
                let ys = ctx.output.data();
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().map(|g| g / sv).collect()),
                    ctx.needs[1]
                        .then(|| vec![-ctx.grad.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / sv]),
                ]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let n = self.value(x).numel();
        self.custom(
            Tensor::scalar(s),
            &[x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        assert!(n > 0, "mean of an empty tensor");
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.custom(
            Tensor::scalar(s),
            &[x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] / n as f64; n])]),
        )
    }

    /// Sum of squares over every axis but the first: `[R, ...] -> [R]`.
    pub fn row_sum_squares(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let r = xs.shape()[0];
        let inner = (xs.numel() / r.max(1)).max(1);
        let data = xs
            .data()
            .chunks(inner)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        self.custom(
            Tensor::from_parts(&[r], data),
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let g = xs
                    .chunks(inner)
                    .zip(ctx.grad)
                    .flat_map(|(c, g)| c.iter().map(move |x| 2.0 * g * x))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Mean over the leading axis: `[C, ...] -> [1, ...]`.
    pub fn mean_leading(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let c = xs.shape()[0];
        let inner = xs.numel() / c;
        let mut out = vec![0.0; inner];
        for chunk in xs.data().chunks(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let mut shape = xs.shape().to_vec();
        shape[0] = 1;
        self.custom(
            Tensor::from_parts(&shape, out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(c * inner);
                for _ in 0..c {
                    g.extend(ctx.grad.iter().map(|g| g / c as f64));
                }
                vec![Some(g)]
            }),
        )
    }

    /// Elementwise minimum across same-shaped inputs; the gradient flows to
    /// the first input attaining the minimum.
    pub fn min_elementwise(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "min_elementwise of nothing");
        for &x in &xs[1..] {
            assert_same_shape(self, xs[0], x, "min_elementwise");
        }
        let n = self.value(xs[0]).numel();
        let mut out = self.value(xs[0]).data().to_vec();
        let mut arg = vec![0u32; n];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(self.value(x).data()) {
                if v < *o {
                    *o = v;
                    *a = k as u32;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(xs[0]), out);
        let count = xs.len();
        self.custom(
            value,
            xs,
            Box::new(move |ctx| {
                (0..count)
                    .map(|k| {
                        ctx.needs[k].then(|| {
                            ctx.grad
                                .iter()
                                .zip(&arg)
                                .map(|(&g, &a)| if a as usize == k { g } else { 0.0 })
                                .collect()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.custom(
            Tensor::from_parts(&[m, n], out),
            &[a, b],
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, ctx.grad, false, bv, true, &mut ga, false);
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av, true, ctx.grad, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "transpose needs a matrix, got {:?}", s);
        let (r, c) = (s[0], s[1]);
        let value = Tensor::from_parts(&[c, r], transpose_data(self.value(x).data(), r, c));
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(transpose_data(ctx.grad, c, r))]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.custom(value, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x);
        assert!(s.len() == 2 && start < end && end <= s[1], "slice_cols {start}..{end} of {s:?}");
        let (r, c) = (s[0], s[1]);
        let w = end - start;
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.custom(
            Tensor::from_parts(&[r, w], data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; r * c];
                for (grow, orow) in g.chunks_mut(c).zip(ctx.grad.chunks(w)) {
                    grow[start..end].copy_from_slice(orow);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let r = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let s = self.shape(x);
                assert!(s.len() == 2 && s[0] == r, "concat_cols: {:?}", s);
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        self.custom(
            Tensor::from_parts(&[r, total], data),
            xs,
            Box::new(move |ctx| {
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let o = offset;
                        offset += w;
                        ctx.needs[k].then(|| {
                            ctx.grad
                                .chunks(total)
                                .flat_map(|row| row[o..o + w].iter().copied())
                                .collect()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start < end && end <= s[0], "slice_rows {start}..{end} of {s:?}");
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let total = s[0] * inner;
        self.custom(
            Tensor::from_parts(&shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; total];
                g[start * inner..end * inner].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut sizes = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[1..], &tail[..], "concat_rows: trailing shapes differ");
            rows += s[0];
            sizes.push(self.value(x).numel());
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.custom(
            Tensor::from_parts(&shape, data),
            xs,
            Box::new(move |ctx| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| {
                        let o = offset;
                        offset += n;
                        ctx.needs[k].then(|| ctx.grad[o..o + n].to_vec())
                    })
                    .collect()
            }),
        )
    }

    /// Forward difference along the last axis of `[.., H, W]`: `[.., H, W-1]`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let w = *s.last().expect("diff_x on a scalar");
        assert!(w >= 2, "diff_x needs width >= 2");
        let rows = self.value(x).numel() / w;
        let data = self
            .value(x)
            .data()
            .chunks(w)
            .flat_map(|r| r.windows(2).map(|p| p[1] - p[0]))
            .collect();
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = w - 1;
        self.custom(
            Tensor::from_parts(&shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; rows * w];
                for (grow, orow) in g.chunks_mut(w).zip(ctx.grad.chunks(w - 1)) {
                    for (j, &d) in orow.iter().enumerate() {
                        grow[j + 1] += d;
                        grow[j] -= d;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Forward difference along the second-to-last axis: `[.., H-1, W]`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() >= 2 && s[s.len() - 2] >= 2, "diff_y needs height >= 2");
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).numel() / (h * w);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(planes * (h - 1) * w);
        for p in 0..planes {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for y in 0..h - 1 {
                for j in 0..w {
                    data.push(plane[(y + 1) * w + j] - plane[y * w + j]);
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = h - 1;
        self.custom(
            Tensor::from_parts(&shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gp = &mut g[p * h * w..(p + 1) * h * w];
                    let op = &ctx.grad[p * (h - 1) * w..(p + 1) * (h - 1) * w];
                    for y in 0..h - 1 {
                        for j in 0..w {
                            let d = op[y * w + j];
                            gp[(y + 1) * w + j] += d;
                            gp[y * w + j] -= d;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

pub(crate) fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

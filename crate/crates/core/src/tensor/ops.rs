//! Tape operations: elementwise arithmetic, activations, reductions,
//! shape changes, pooling, Gram products and the convolution wrappers.

use super::{conv, reduce_to_shape, BackArgs, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, IxDyn};

fn broadcast_to<F: Scalar>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

pub(crate) fn reshape_arr<F: Scalar>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    a.to_shape(IxDyn(shape))
        .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", a.shape(), shape))
        .into_owned()
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Tape<F> {
    // ---- binary ops; rhs broadcasts to lhs shape -------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a).view() + &broadcast_to(self.value(b), self.shape(a));
        let bshape = self.shape(b).to_vec();
        self.push(
            out,
            false,
            None,
            vec![a, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| reduce_to_shape(args.grad, &bshape)),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a).view() - &broadcast_to(self.value(b), self.shape(a));
        let bshape = self.shape(b).to_vec();
        self.push(
            out,
            false,
            None,
            vec![a, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| reduce_to_shape(&-args.grad.clone(), &bshape)),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bb = broadcast_to(self.value(b), self.shape(a));
        let out = &self.value(a).view() * &bb;
        let bshape = self.shape(b).to_vec();
        self.push(
            out,
            false,
            None,
            vec![a, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                let ga = args.needs[0].then(|| args.grad * &bb);
                let gb = args.needs[1]
                    .then(|| reduce_to_shape(&(args.grad * &args.inputs[0].view()), &bshape));
                vec![ga, gb]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let bb = broadcast_to(self.value(b), self.shape(a));
        let out = &self.value(a).view() / &bb;
        let bshape = self.shape(b).to_vec();
        self.push(
            out,
            false,
            None,
            vec![a, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                let ga = args.needs[0].then(|| args.grad / &bb);
                let gb = args.needs[1].then(|| {
                    let g = args.grad * &(-args.inputs[0] / &(&bb * &bb));
                    reduce_to_shape(&g, &bshape)
                });
                vec![ga, gb]
            })),
        )
    }

    // ---- scalar and unary ops -------------------------------------------

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.unary(a, out, move |args| args.grad.mapv(|g| g * c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.unary(a, out, |args| args.grad.clone())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x);
        self.unary(a, out, |args| -args.grad.clone())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        self.unary(a, out, |args| {
            ndarray::Zip::from(args.grad)
                .and(args.inputs[0])
                .map_collect(|&g, &x| if x > F::zero() { g } else { F::zero() })
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        self.unary(a, out, move |args| {
            ndarray::Zip::from(args.grad)
                .and(args.inputs[0])
                .map_collect(|&g, &x| if x > F::zero() { g } else { g * slope })
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(stable_sigmoid);
        self.unary(a, out, |args| {
            ndarray::Zip::from(args.grad)
                .and(args.output)
                .map_collect(|&g, &y| g * y * (F::one() - y))
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        self.unary(a, out, |args| {
            ndarray::Zip::from(args.grad)
                .and(args.output)
                .map_collect(|&g, &y| g * (F::one() - y * y))
        })
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| x.max(F::zero()) + (-x.abs()).exp().ln_1p());
        self.unary(a, out, |args| {
            ndarray::Zip::from(args.grad)
                .and(args.inputs[0])
                .map_collect(|&g, &x| g * stable_sigmoid(x))
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.abs());
        self.unary(a, out, |args| {
            ndarray::Zip::from(args.grad)
                .and(args.inputs[0])
                .map_collect(|&g, &x| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                })
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.sqrt());
        let half = F::from_f64(0.5);
        self.unary(a, out, move |args| {
            ndarray::Zip::from(args.grad)
                .and(args.output)
                .map_collect(|&g, &y| g * half / y)
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let two = F::from_f64(2.0);
        self.unary(a, out, move |args| {
            ndarray::Zip::from(args.grad)
                .and(args.inputs[0])
                .map_collect(|&g, &x| g * two * x)
        })
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = reshape_arr(self.value(a), shape);
        let in_shape = self.shape(a).to_vec();
        self.unary(a, out, move |args| reshape_arr(args.grad, &in_shape))
    }

    // ---- reductions ---------------------------------------------------------

    /// Mean over every element, producing a 0-d scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let inv = F::from_f64(1.0 / n as f64);
        let m = self.value(a).iter().copied().sum::<F>() * inv;
        let out = ArrayD::from_elem(IxDyn(&[]), m);
        let in_shape = self.shape(a).to_vec();
        self.unary(a, out, move |args| {
            let g = args.grad.iter().copied().next().unwrap() * inv;
            ArrayD::from_elem(IxDyn(&in_shape), g)
        })
    }

    /// Mean over the two trailing spatial axes of a `[B, C, H, W]` tensor,
    /// keeping dims: result is `[B, C, 1, 1]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let shp = self.shape(a).to_vec();
        assert_eq!(shp.len(), 4, "spatial_mean expects [B, C, H, W]");
        let (h, w) = (shp[2], shp[3]);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let summed = self.value(a).sum_axis(Axis(3)).sum_axis(Axis(2));
        let out = (summed * inv)
            .into_shape_with_order(IxDyn(&[shp[0], shp[1], 1, 1]))
            .unwrap();
        self.unary(a, out, move |args| {
            let g = broadcast_to(args.grad, &shp);
            g.mapv(|v| v * inv)
        })
    }

    // ---- convolution ----------------------------------------------------

    /// 2-d convolution, weight layout `[OC, IC, KH, KW]`, bias `[OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = conv::conv_fwd(self.value(x), self.value(w), stride, pad);
        let mut out = y;
        {
            let bias = self.value(b);
            let oc = bias.len();
            let bias4 = reshape_arr(bias, &[1, oc, 1, 1]);
            out += &bias4.broadcast(out.raw_dim()).unwrap();
        }
        let in_hw = (self.shape(x)[2], self.shape(x)[3]);
        let khw = (self.shape(w)[2], self.shape(w)[3]);
        self.push(
            out,
            false,
            None,
            vec![x, w, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                let gx = args.needs[0]
                    .then(|| conv::conv_bwd_data(args.grad, args.inputs[1], stride, pad, in_hw));
                let gw = args.needs[1]
                    .then(|| conv::conv_bwd_weight(args.inputs[0], args.grad, stride, pad, khw));
                let gb = args.needs[2].then(|| {
                    args.grad
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0))
                        .into_dyn()
                });
                vec![gx, gw, gb]
            })),
        )
    }

    /// Transposed 2-d convolution (fractionally strided upsampling).
    /// Weight layout `[IC, OC, KH, KW]`; output spatial size is
    /// `(in − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (kh, kw) = (self.shape(w)[2], self.shape(w)[3]);
        let (ih, iw) = (self.shape(x)[2], self.shape(x)[3]);
        let oh = (ih - 1) * stride + kh - 2 * pad;
        let ow = (iw - 1) * stride + kw - 2 * pad;
        let mut out = conv::conv_bwd_data(self.value(x), self.value(w), stride, pad, (oh, ow));
        {
            let bias = self.value(b);
            let oc = bias.len();
            let bias4 = reshape_arr(bias, &[1, oc, 1, 1]);
            out += &bias4.broadcast(out.raw_dim()).unwrap();
        }
        self.push(
            out,
            false,
            None,
            vec![x, w, b],
            Some(Box::new(move |args: &BackArgs<F>| {
                let gx = args.needs[0].then(|| conv::conv_fwd(args.grad, args.inputs[1], stride, pad));
                let gw = args.needs[1]
                    .then(|| conv::conv_bwd_weight(args.grad, args.inputs[0], stride, pad, (kh, kw)));
                let gb = args.needs[2].then(|| {
                    args.grad
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0))
                        .into_dyn()
                });
                vec![gx, gw, gb]
            })),
        )
    }

    /// 2×2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let shp = x.shape();
        assert_eq!(shp.len(), 4);
        assert!(shp[2] % 2 == 0 && shp[3] % 2 == 0, "maxpool2 needs even H, W");
        let (b, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h / 2, w / 2]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let mut m = x[[bi, ci, 2 * i, 2 * j]];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > m {
                                m = v;
                            }
                        }
                        out[[bi, ci, i, j]] = m;
                    }
                }
            }
        }
        self.unary(a, out, move |args| {
            let x = args.inputs[0];
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            // first max wins on ties, matching the forward scan
                            let (mut mi, mut mj) = (2 * i, 2 * j);
                            let mut m = x[[bi, ci, mi, mj]];
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                                if v > m {
                                    m = v;
                                    mi = 2 * i + di;
                                    mj = 2 * j + dj;
                                }
                            }
                            gx[[bi, ci, mi, mj]] =
                                gx[[bi, ci, mi, mj]] + args.grad[[bi, ci, i, j]];
                        }
                    }
                }
            }
            gx
        })
    }

    /// Per-item Gram product of a `[B, C, H, W]` tensor: `G_b = X X^T / (C·H·W)`
    /// with `X` the `C×(H·W)` unfolding. Output is `[B, C, C]`.
    pub fn gram(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let shp = x.shape();
        assert_eq!(shp.len(), 4);
        let (b, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
        let norm = F::from_f64(1.0 / (c * h * w) as f64);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, c]));
        for bi in 0..b {
            let xi = reshape_arr(&x.index_axis(Axis(0), bi).to_owned().into_dyn(), &[c, h * w]);
            let x2 = xi.into_dimensionality::<ndarray::Ix2>().unwrap();
            let g = x2.dot(&x2.t()) * norm;
            out.index_axis_mut(Axis(0), bi).assign(&g);
        }
        self.unary(a, out, move |args| {
            let x = args.inputs[0];
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                let xi =
                    reshape_arr(&x.index_axis(Axis(0), bi).to_owned().into_dyn(), &[c, h * w]);
                let x2 = xi.into_dimensionality::<ndarray::Ix2>().unwrap();
                let gg = args
                    .grad
                    .index_axis(Axis(0), bi)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let sym = &gg + &gg.t();
                let gxi = sym.dot(&x2) * norm;
                gx.index_axis_mut(Axis(0), bi)
                    .assign(&gxi.into_shape_with_order((c, h, w)).unwrap());
            }
            gx
        })
    }
}

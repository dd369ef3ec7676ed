//! Minimal reverse-mode autodiff tape over `ndarray`, sized for this model:
//! 2-D matmuls, 3x3/1x1 convolutions via im2col, group norm, nearest
//! upsampling, softmax cross-attention pieces and the two losses. One tape is
//! built per sample per step and dropped after the backward pass.

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use crate::num::{s, Scalar};

pub type Var = usize;

pub const DICE_EPS: f64 = 1e-6;

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Scale(Var, F),
    /// y = a * b elementwise
    Mul(Var, Var),
    /// y = a [M,K] . b [K,N]
    Matmul(Var, Var),
    /// y = a [M,K] . b[N,K]^T
    MatmulTB(Var, Var),
    /// y [M,N] = a + bias[N]
    AddRowBias(Var, Var),
    /// y [C,H,W] = a + bias[C]
    AddChanBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        kernel: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: ArrayD<F>,
        inv_std: Vec<F>,
    },
    Upsample2x(Var),
    ConcatChan(Var, Var),
    Reshape(Var),
    Transpose2(Var),
    MeanAll(Var),
    /// mean((pred - target)^2) against a constant target
    Mse { pred: Var, target: ArrayD<F> },
    /// 1 - 2*sum(g*p) / (sum(g) + sum(p) + eps), p already in [0,1]
    Dice { pred: Var, gt: ArrayD<F> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        *self.nodes[v].value.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a].value.mapv(|v| v * c);
        let g = self.ng(a);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), g)
    }

    fn as2(&self, v: Var) -> ndarray::ArrayView2<'_, F> {
        self.nodes[v]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D node")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.as2(a).dot(&self.as2(b)).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Matmul(a, b), g)
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let value = self.as2(a).dot(&self.as2(b).t()).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::MatmulTB(a, b), g)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let bias1 = self.nodes[bias]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D bias");
        let value = (&self.as2(a) + &bias1).into_dyn();
        let g = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRowBias(a, bias), g)
    }

    pub fn add_chan_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-D input");
        let b = self.nodes[bias]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D bias");
        let (c, h, w) = x.dim();
        let mut value = x.to_owned();
        for ch in 0..c {
            let bc = b[ch];
            for y in 0..h {
                for xx in 0..w {
                    value[[ch, y, xx]] += bc;
                }
            }
        }
        let g = self.ng(a) || self.ng(bias);
        self.push(value.into_dyn(), Op::AddChanBias(a, bias), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a]
            .value
            .mapv(|x| x * (F::one() / (F::one() + (-x).exp())));
        let g = self.ng(a);
        self.push(value, Op::Silu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a]
            .value
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        let g = self.ng(a);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.as2(a);
        let (m, n) = x.dim();
        let mut value = Array2::<F>::zeros((m, n));
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                value[[i, j]] = e;
                sum += e;
            }
            for j in 0..n {
                value[[i, j]] /= sum;
            }
        }
        let g = self.ng(a);
        self.push(value.into_dyn(), Op::SoftmaxRows(a), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xin = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input 3-D");
        let wv = self.nodes[w].value.view();
        let wshape = wv.shape();
        let (cout, cin, kernel) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(wshape[3], kernel, "square kernels only");
        assert_eq!(xin.dim().0, cin, "conv channel mismatch");
        let cols = im2col(&xin.to_owned(), kernel, stride, pad);
        let wmat = wv
            .to_shape((cout, cin * kernel * kernel))
            .expect("weight reshape")
            .to_owned();
        let mut ymat = wmat.dot(&cols);
        let bias = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias 1-D");
        for (i, mut row) in ymat.rows_mut().into_iter().enumerate() {
            let bi = bias[i];
            row.mapv_inplace(|v| v + bi);
        }
        let (h, wdt) = (xin.dim().1, xin.dim().2);
        let hout = (h + 2 * pad - kernel) / stride + 1;
        let wout = (wdt + 2 * pad - kernel) / stride + 1;
        let value = ymat
            .into_shape((cout, hout, wout))
            .expect("conv output reshape")
            .into_dyn();
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
            },
            g,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xin = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("gn input 3-D");
        let (c, h, w) = xin.dim();
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let per = c / groups;
        let eps = s::<F>(1e-5);
        let m = s::<F>((per * h * w) as f64);
        let mut xhat = xin.to_owned();
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let lo = g * per;
            let hi = lo + per;
            let mut mean = F::zero();
            for ch in lo..hi {
                for y in 0..h {
                    for xx in 0..w {
                        mean += xin[[ch, y, xx]];
                    }
                }
            }
            mean /= m;
            let mut var = F::zero();
            for ch in lo..hi {
                for y in 0..h {
                    for xx in 0..w {
                        let d = xin[[ch, y, xx]] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = F::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for ch in lo..hi {
                for y in 0..h {
                    for xx in 0..w {
                        xhat[[ch, y, xx]] = (xhat[[ch, y, xx]] - mean) * istd;
                    }
                }
            }
        }
        let gm = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma 1-D")
            .to_owned();
        let bt = self.nodes[beta]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta 1-D")
            .to_owned();
        let mut value = xhat.clone();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    value[[ch, y, xx]] = value[[ch, y, xx]] * gm[ch] + bt[ch];
                }
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: xhat.into_dyn(),
                inv_std,
            },
            g,
        )
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("upsample input 3-D");
        let (c, h, w) = x.dim();
        let mut value = ndarray::Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ch, y, xx]];
                    value[[ch, 2 * y, 2 * xx]] = v;
                    value[[ch, 2 * y + 1, 2 * xx]] = v;
                    value[[ch, 2 * y, 2 * xx + 1]] = v;
                    value[[ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        let g = self.ng(a);
        self.push(value.into_dyn(), Op::Upsample2x(a), g)
    }

    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let xa = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("concat a 3-D");
        let xb = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("concat b 3-D");
        let value = ndarray::concatenate(ndarray::Axis(0), &[xa, xb])
            .expect("concat")
            .into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatChan(a, b), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape");
        let g = self.ng(a);
        self.push(value, Op::Reshape(a), g)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        // force standard layout so later reshape/slice calls stay valid
        let value = self.as2(a).t().as_standard_layout().to_owned().into_dyn();
        let g = self.ng(a);
        self.push(value, Op::Transpose2(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = s::<F>(self.nodes[a].value.len() as f64);
        let mean = self.nodes[a].value.iter().cloned().sum::<F>() / n;
        let g = self.ng(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            Op::MeanAll(a),
            g,
        )
    }

    pub fn mse(&mut self, pred: Var, target: ArrayD<F>) -> Var {
        assert_eq!(self.nodes[pred].value.shape(), target.shape());
        let n = s::<F>(target.len() as f64);
        let loss = self.nodes[pred]
            .value
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        let g = self.ng(pred);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Mse { pred, target },
            g,
        )
    }

    pub fn dice(&mut self, pred: Var, gt: ArrayD<F>) -> Var {
        assert_eq!(self.nodes[pred].value.shape(), gt.shape());
        let p = &self.nodes[pred].value;
        let s_gp: F = p.iter().zip(gt.iter()).map(|(&a, &b)| a * b).sum();
        let s_g: F = gt.iter().cloned().sum();
        let s_p: F = p.iter().cloned().sum();
        let denom = s_g + s_p + s::<F>(DICE_EPS);
        let loss = F::one() - s::<F>(2.0) * s_gp / denom;
        let g = self.ng(pred);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Dice { pred, gt },
            g,
        )
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients
    /// (None for nodes not on a grad path).
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));
        for i in (0..=loss).rev() {
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(gout);
                continue;
            }
            let acc = |grads: &mut Vec<Option<ArrayD<F>>>, v: Var, g: ArrayD<F>| {
                if !self.nodes[v].needs_grad {
                    return;
                }
                match &mut grads[v] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gout.mapv(|v| v * *c)),
                Op::Mul(a, b) => {
                    let ga = &gout * &self.nodes[*b].value;
                    let gb = &gout * &self.nodes[*a].value;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Matmul(a, b) => {
                    let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = g2.dot(&self.as2(*b).t()).into_dyn();
                    let gb = self.as2(*a).t().dot(&g2).into_dyn();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatmulTB(a, b) => {
                    let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = g2.dot(&self.as2(*b)).into_dyn();
                    let gb = g2.t().dot(&self.as2(*a)).into_dyn();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRowBias(a, bias) => {
                    let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let gb = g2.sum_axis(ndarray::Axis(0)).into_dyn();
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *bias, gb);
                }
                Op::AddChanBias(a, bias) => {
                    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h, w) = g3.dim();
                    let mut gb = Array1::<F>::zeros(c);
                    for ch in 0..c {
                        let mut sum = F::zero();
                        for y in 0..h {
                            for x in 0..w {
                                sum += g3[[ch, y, x]];
                            }
                        }
                        gb[ch] = sum;
                    }
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *bias, gb.into_dyn());
                }
                Op::Silu(a) => {
                    let xin = &self.nodes[*a].value;
                    let gx = ndarray::Zip::from(&gout)
                        .and(xin)
                        .map_collect(|&g, &x| {
                            let sg = F::one() / (F::one() + (-x).exp());
                            g * sg * (F::one() + x * (F::one() - sg))
                        });
                    acc(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let gx = ndarray::Zip::from(&gout)
                        .and(y)
                        .map_collect(|&g, &yv| g * yv * (F::one() - yv));
                    acc(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let (m, n) = y.dim();
                    let mut gx = Array2::<F>::zeros((m, n));
                    for r in 0..m {
                        let mut dot = F::zero();
                        for cidx in 0..n {
                            dot += g2[[r, cidx]] * y[[r, cidx]];
                        }
                        for cidx in 0..n {
                            gx[[r, cidx]] = y[[r, cidx]] * (g2[[r, cidx]] - dot);
                        }
                    }
                    acc(&mut grads, *a, gx.into_dyn());
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    kernel,
                } => {
                    let xin = self.nodes[*x]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .to_owned();
                    let wshape = self.nodes[*w].value.shape().to_vec();
                    let (cout, cin, k) = (wshape[0], wshape[1], *kernel);
                    let gy = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (_, hout, wout) = gy.dim();
                    let gymat = gy
                        .to_shape((cout, hout * wout))
                        .unwrap()
                        .to_owned();
                    // bias grad
                    let gb = gymat.sum_axis(ndarray::Axis(1)).into_dyn();
                    acc(&mut grads, *b, gb);
                    let cols = im2col(&xin, k, *stride, *pad);
                    if self.nodes[*w].needs_grad {
                        let gw = gymat
                            .dot(&cols.t())
                            .into_shape((cout, cin, k, k))
                            .unwrap()
                            .into_dyn();
                        acc(&mut grads, *w, gw);
                    }
                    if self.nodes[*x].needs_grad {
                        let wmat = self.nodes[*w]
                            .value
                            .view()
                            .to_shape((cout, cin * k * k))
                            .unwrap()
                            .to_owned();
                        let gcols = wmat.t().dot(&gymat);
                        let gx = col2im(&gcols, xin.dim(), k, *stride, *pad);
                        acc(&mut grads, *x, gx.into_dyn());
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let xh = xhat.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h, w) = g3.dim();
                    let per = c / groups;
                    let gm = self.nodes[*gamma]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap()
                        .to_owned();
                    let mut ggamma = Array1::<F>::zeros(c);
                    let mut gbeta = Array1::<F>::zeros(c);
                    for ch in 0..c {
                        let mut sg = F::zero();
                        let mut sb = F::zero();
                        for y in 0..h {
                            for xx in 0..w {
                                sg += g3[[ch, y, xx]] * xh[[ch, y, xx]];
                                sb += g3[[ch, y, xx]];
                            }
                        }
                        ggamma[ch] = sg;
                        gbeta[ch] = sb;
                    }
                    acc(&mut grads, *gamma, ggamma.into_dyn());
                    acc(&mut grads, *beta, gbeta.into_dyn());
                    if self.nodes[*x].needs_grad {
                        let m = s::<F>((per * h * w) as f64);
                        let mut gx = ndarray::Array3::<F>::zeros((c, h, w));
                        for g in 0..*groups {
                            let lo = g * per;
                            let hi = lo + per;
                            // dyhat = gamma * gout; means over the group
                            let mut mean_dy = F::zero();
                            let mut mean_dyxh = F::zero();
                            for ch in lo..hi {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let dy = g3[[ch, y, xx]] * gm[ch];
                                        mean_dy += dy;
                                        mean_dyxh += dy * xh[[ch, y, xx]];
                                    }
                                }
                            }
                            mean_dy /= m;
                            mean_dyxh /= m;
                            let istd = inv_std[g];
                            for ch in lo..hi {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let dy = g3[[ch, y, xx]] * gm[ch];
                                        gx[[ch, y, xx]] = (dy
                                            - mean_dy
                                            - xh[[ch, y, xx]] * mean_dyxh)
                                            * istd;
                                    }
                                }
                            }
                        }
                        acc(&mut grads, *x, gx.into_dyn());
                    }
                }
                Op::Upsample2x(a) => {
                    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h2, w2) = g3.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut gx = ndarray::Array3::<F>::zeros((c, h, w));
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[ch, y, xx]] = g3[[ch, 2 * y, 2 * xx]]
                                    + g3[[ch, 2 * y + 1, 2 * xx]]
                                    + g3[[ch, 2 * y, 2 * xx + 1]]
                                    + g3[[ch, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                    acc(&mut grads, *a, gx.into_dyn());
                }
                Op::ConcatChan(a, b) => {
                    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let ca = self.nodes[*a].value.shape()[0];
                    let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                    let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let ga = gout
                        .as_standard_layout()
                        .to_owned()
                        .into_shape(IxDyn(&shape))
                        .unwrap();
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose2(a) => {
                    let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = g2.t().as_standard_layout().to_owned().into_dyn();
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let gscalar = *gout.iter().next().unwrap();
                    let n = s::<F>(self.nodes[*a].value.len() as f64);
                    let ga = ArrayD::from_elem(
                        IxDyn(self.nodes[*a].value.shape()),
                        gscalar / n,
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Mse { pred, target } => {
                    let gscalar = *gout.iter().next().unwrap();
                    let n = s::<F>(target.len() as f64);
                    let two = s::<F>(2.0);
                    let gp = ndarray::Zip::from(&self.nodes[*pred].value)
                        .and(target)
                        .map_collect(|&p, &t| gscalar * two * (p - t) / n);
                    acc(&mut grads, *pred, gp);
                }
                Op::Dice { pred, gt } => {
                    let gscalar = *gout.iter().next().unwrap();
                    let p = &self.nodes[*pred].value;
                    let s_gp: F = p.iter().zip(gt.iter()).map(|(&a, &b)| a * b).sum();
                    let s_g: F = gt.iter().cloned().sum();
                    let s_p: F = p.iter().cloned().sum();
                    let denom = s_g + s_p + s::<F>(DICE_EPS);
                    let two = s::<F>(2.0);
                    let gp = gt.mapv(|g| {
                        gscalar * (two * s_gp / (denom * denom) - two * g / denom)
                    });
                    acc(&mut grads, *pred, gp);
                }
            }
            grads[i] = Some(gout);
        }
        grads
    }
}

pub fn im2col<F: Scalar>(
    x: &ndarray::Array3<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let hout = (h + 2 * pad - kernel) / stride + 1;
    let wout = (w + 2 * pad - kernel) / stride + 1;
    let mut cols = Array2::<F>::zeros((c * kernel * kernel, hout * wout));
    for ch in 0..c {
        for dy in 0..kernel {
            for dx in 0..kernel {
                let row = (ch * kernel + dy) * kernel + dx;
                for oy in 0..hout {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wout + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    dim: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<F> {
    let (c, h, w) = dim;
    let hout = (h + 2 * pad - kernel) / stride + 1;
    let wout = (w + 2 * pad - kernel) / stride + 1;
    let mut gx = ndarray::Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..kernel {
            for dx in 0..kernel {
                let row = (ch * kernel + dy) * kernel + dx;
                for oy in 0..hout {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ch, iy as usize, ix as usize]] += gcols[[row, oy * wout + ox]];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};
    use rand::Rng;

    use crate::rng::stream_rng;

    /// Central-difference check of d(loss)/d(leaves) for an arbitrary graph.
    fn check_grads(
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut r = stream_rng(7, "gradcheck");
        let inits: Vec<ArrayD<f64>> = shapes
            .iter()
            .map(|s| {
                ArrayD::from_shape_fn(IxDyn(s), |_| r.gen_range(-1.0..1.0))
            })
            .collect();
        let run = |values: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values
                .iter()
                .map(|v| tape.leaf(v.clone(), true))
                .collect();
            let loss = build(&mut tape, &vars);
            let grads = tape.backward(loss);
            (tape.scalar_value(loss), grads, vars)
        };
        let (_, grads, vars) = run(&inits);
        let h = 1e-5;
        for (leaf_idx, init) in inits.iter().enumerate() {
            let analytic = grads[vars[leaf_idx]]
                .as_ref()
                .unwrap_or_else(|| panic!("no grad for leaf {leaf_idx}"));
            for (flat, _) in init.iter().enumerate() {
                let mut plus = inits.clone();
                plus[leaf_idx].as_slice_mut().unwrap()[flat] += h;
                let mut minus = inits.clone();
                minus[leaf_idx].as_slice_mut().unwrap()[flat] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "leaf {leaf_idx} elem {flat}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_add_scale_mul() {
        check_grads(&[&[2, 3], &[2, 3]], |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.scale(a, 1.7);
            let c = t.mul(b, v[0]);
            t.mean_all(c)
        }, 1e-6);
    }

    #[test]
    fn grad_matmuls() {
        check_grads(&[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.mean_all(y)
        }, 1e-6);
        check_grads(&[&[3, 4], &[2, 4]], |t, v| {
            let y = t.matmul_tb(v[0], v[1]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_biases() {
        check_grads(&[&[3, 4], &[4]], |t, v| {
            let y = t.add_row_bias(v[0], v[1]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
        check_grads(&[&[2, 3, 3], &[2]], |t, v| {
            let y = t.add_chan_bias(v[0], v[1]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_activations_softmax() {
        check_grads(&[&[2, 5]], |t, v| {
            let a = t.silu(v[0]);
            let b = t.sigmoid(a);
            let c = t.softmax_rows(b);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_conv2d_stride1_and_2() {
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            check_grads(&[&[2, 6, 6], &[3, 2, 3, 3], &[3]], move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }, 1e-5);
        }
        // 1x1 conv
        check_grads(&[&[3, 4, 4], &[2, 3, 1, 1], &[2]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_group_norm() {
        check_grads(&[&[4, 3, 3], &[4], &[4]], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-4);
    }

    #[test]
    fn grad_shape_ops() {
        check_grads(&[&[2, 4, 4], &[2, 8, 8]], |t, v| {
            let up = t.upsample2x(v[0]);
            let cat = t.concat_chan(up, v[1]);
            let flat = t.reshape(cat, &[4, 64]);
            let tr = t.transpose2(flat);
            let sq = t.mul(tr, tr);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_losses() {
        let target = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |ix| {
            ((ix[0] + ix[1] + ix[2]) % 2) as f64
        });
        let tgt = target.clone();
        check_grads(&[&[2, 3, 3]], move |t, v| t.mse(v[0], tgt.clone()), 1e-6);
        let gt = target.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        check_grads(&[&[2, 3, 3]], move |t, v| {
            let p = t.sigmoid(v[0]);
            t.dice(p, gt.clone())
        }, 1e-5);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = stream_rng(3, "convref");
        let x = Array3::from_shape_fn((2, 5, 5), |_| r.gen_range(-1.0..1.0f64));
        let w = ndarray::Array4::from_shape_fn((3, 2, 3, 3), |_| r.gen_range(-1.0..1.0f64));
        let b = ndarray::Array1::from_shape_fn(3, |_| r.gen_range(-1.0..1.0f64));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let wv = tape.constant(w.clone().into_dyn());
        let bv = tape.constant(b.clone().into_dyn());
        let y = tape.conv2d(xv, wv, bv, 1, 1);
        let yv = tape.value(y);
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let iy = oy as isize + dy as isize - 1;
                                let ix = ox as isize + dx as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                    continue;
                                }
                                acc += x[[ci, iy as usize, ix as usize]]
                                    * w[[co, ci, dy, dx]];
                            }
                        }
                    }
                    let got = yv[[co, oy, ox]];
                    assert!((got - acc).abs() < 1e-12, "({co},{oy},{ox})");
                }
            }
        }
    }

    #[test]
    fn dice_fixture_values() {
        let gt = ArrayD::from_elem(IxDyn(&[4]), 1.0f64);
        let mut tape = Tape::<f64>::new();
        let perfect = tape.constant(gt.clone());
        let d = tape.dice(perfect, gt.clone());
        let v = tape.scalar_value(d);
        assert!((v - (1.0 - 8.0 / (8.0 + DICE_EPS))).abs() < 1e-15);
        let zero = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 0.0f64));
        let d0 = tape.dice(zero, gt.clone());
        assert!((tape.scalar_value(d0) - 1.0).abs() < 1e-15);
        let half = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 0.5f64));
        let dh = tape.dice(half, gt);
        let expect = 1.0 - 2.0 * 2.0 / (4.0 + 2.0 + DICE_EPS);
        assert!((tape.scalar_value(dh) - expect).abs() < 1e-15);
    }
}


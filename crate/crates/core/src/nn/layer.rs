//! Layer kinds and their hand-written forward/backward kernels.
//!
//! All reductions accumulate in `f64` regardless of the storage precision and
//! run in a fixed sequential order, so results are bit-reproducible.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Linear<F> {
    /// `[out, in]`
    pub weight: Tensor<F>,
    /// `[out]`
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Conv2d<F> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor<F>,
    /// `[out_ch]`
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "F: Scalar")]
pub enum Layer<F> {
    Linear(Linear<F>),
    Conv2d(Conv2d<F>),
    Relu,
    Flatten,
}

fn he_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-limit, limit).expect("finite He bound");
    Tensor::from_fn(shape, |_| F::of(dist.sample(rng)))
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Dimension("linear dims must be > 0".into()));
        }
        Ok(Self {
            weight: he_uniform(&[out_dim, in_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn from_parts(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        let l = Self { weight, bias };
        l.validate()?;
        Ok(l)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 2 || self.bias.shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "linear weight {ws:?} / bias {:?} inconsistent",
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Dimension("conv2d dims and stride must be > 0".into()));
        }
        Ok(Self {
            weight: he_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || self.bias.shape() != [ws[0]] || self.stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d weight {ws:?} / bias {:?} / stride {} inconsistent",
                self.bias.shape(),
                self.stride
            )));
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::Dimension(format!(
                "kernel {k} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

impl<F: Scalar> Layer<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    /// Whether this layer carries a weight tensor subject to sparsity masks.
    pub fn is_maskable(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_))
    }

    pub fn weight(&self) -> Option<&Tensor<F>> {
        match self {
            Layer::Linear(l) => Some(&l.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<F>> {
        match self {
            Layer::Linear(l) => Some(&mut l.weight),
            Layer::Conv2d(c) => Some(&mut c.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<F>> {
        match self {
            Layer::Linear(l) => Some(&l.bias),
            Layer::Conv2d(c) => Some(&c.bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<F>> {
        match self {
            Layer::Linear(l) => Some(&mut l.bias),
            Layer::Conv2d(c) => Some(&mut c.bias),
            _ => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Layer::Linear(l) => l.validate(),
            Layer::Conv2d(c) => c.validate(),
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear(l) => {
                if input != [l.in_dim()] {
                    return Err(Error::Dimension(format!(
                        "linear expects input [{}], got {input:?}",
                        l.in_dim()
                    )));
                }
                Ok(vec![l.out_dim()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_ch() {
                    return Err(Error::Dimension(format!(
                        "conv2d expects input [{}, H, W], got {input:?}",
                        c.in_ch()
                    )));
                }
                let (ho, wo) = c.output_hw(input[1], input[2])?;
                Ok(vec![c.out_ch(), ho, wo])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Batched forward pass. `input` has shape `[B, ..per_sample]`.
    pub(crate) fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let batch = input.rows();
        let out_shape = self.output_shape(&input.shape()[1..])?;
        let mut full = Vec::with_capacity(out_shape.len() + 1);
        full.push(batch);
        full.extend_from_slice(&out_shape);
        match self {
            Layer::Linear(l) => Ok(linear_forward(l, input, full)),
            Layer::Conv2d(c) => Ok(conv_forward(c, input, full)),
            Layer::Relu => Ok(Tensor::from_fn(input.shape(), |i| {
                let v = input.data()[i];
                if v > F::zero() {
                    v
                } else {
                    F::zero()
                }
            })),
            Layer::Flatten => input.clone().reshape(full),
        }
    }

    /// Given the layer input and upstream gradient, returns
    /// `(grad wrt input, optional (weight grad, bias grad))`.
    pub(crate) fn backward(
        &self,
        input: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Result<(Tensor<F>, Option<(Tensor<F>, Tensor<F>)>)> {
        match self {
            Layer::Linear(l) => {
                let (gi, gw, gb) = linear_backward(l, input, grad_out);
                Ok((gi, Some((gw, gb))))
            }
            Layer::Conv2d(c) => {
                let (gi, gw, gb) = conv_backward(c, input, grad_out);
                Ok((gi, Some((gw, gb))))
            }
            Layer::Relu => {
                let gi = Tensor::from_fn(input.shape(), |i| {
                    if input.data()[i] > F::zero() {
                        grad_out.data()[i]
                    } else {
                        F::zero()
                    }
                });
                Ok((gi, None))
            }
            Layer::Flatten => Ok((grad_out.clone().reshape(input.shape().to_vec())?, None)),
        }
    }

    pub(crate) fn cast<G: Scalar>(&self) -> Layer<G> {
        match self {
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::Relu => Layer::Relu,
            Layer::Flatten => Layer::Flatten,
        }
    }
}

fn linear_forward<F: Scalar>(l: &Linear<F>, input: &Tensor<F>, shape: Vec<usize>) -> Tensor<F> {
    let (n_in, n_out) = (l.in_dim(), l.out_dim());
    let w = l.weight.data();
    let b = l.bias.data();
    let mut out = Vec::with_capacity(input.rows() * n_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o].as_f64();
            for (wi, xi) in wr.iter().zip(x) {
                acc += wi.as_f64() * xi.as_f64();
            }
            out.push(F::of(acc));
        }
    }
    Tensor::new(shape, out).expect("linear output shape")
}

fn linear_backward<F: Scalar>(
    l: &Linear<F>,
    input: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n_in, n_out) = (l.in_dim(), l.out_dim());
    let batch = input.rows();
    let w = l.weight.data();

    let mut gw = vec![0.0f64; n_out * n_in];
    let mut gb = vec![0.0f64; n_out];
    let mut gi = vec![0.0f64; batch * n_in];
    for r in 0..batch {
        let x = input.row(r);
        let d = grad_out.row(r);
        let gi_row = &mut gi[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let dv = d[o].as_f64();
            if dv == 0.0 {
                continue;
            }
            gb[o] += dv;
            let gw_row = &mut gw[o * n_in..(o + 1) * n_in];
            let w_row = &w[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gw_row[i] += dv * x[i].as_f64();
                gi_row[i] += dv * w_row[i].as_f64();
            }
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(F::of).collect::<Vec<_>>();
    (
        Tensor::new(input.shape().to_vec(), conv(gi)).expect("grad input shape"),
        Tensor::new(vec![n_out, n_in], conv(gw)).expect("grad weight shape"),
        Tensor::new(vec![n_out], conv(gb)).expect("grad bias shape"),
    )
}

/// Maps output coordinate + kernel offset to an input coordinate, or `None`
/// when it falls in the zero padding.
#[inline]
fn src_coord(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    if pos < 0 || pos as usize >= extent {
        None
    } else {
        Some(pos as usize)
    }
}

fn conv_forward<F: Scalar>(c: &Conv2d<F>, input: &Tensor<F>, shape: Vec<usize>) -> Tensor<F> {
    let (ic, oc, k) = (c.in_ch(), c.out_ch(), c.kernel());
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (ho, wo) = (shape[2], shape[3]);
    let wt = c.weight.data();
    let bias = c.bias.data();
    let mut out = Vec::with_capacity(input.rows() * oc * ho * wo);
    for r in 0..input.rows() {
        let x = input.row(r);
        for o in 0..oc {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias[o].as_f64();
                    for ci in 0..ic {
                        for ky in 0..k {
                            let Some(iy) = src_coord(y, ky, c.stride, c.padding, h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = src_coord(xo, kx, c.stride, c.padding, w) else {
                                    continue;
                                };
                                let wv = wt[((o * ic + ci) * k + ky) * k + kx].as_f64();
                                acc += wv * x[(ci * h + iy) * w + ix].as_f64();
                            }
                        }
                    }
                    out.push(F::of(acc));
                }
            }
        }
    }
    Tensor::new(shape, out).expect("conv output shape")
}

fn conv_backward<F: Scalar>(
    c: &Conv2d<F>,
    input: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (ic, oc, k) = (c.in_ch(), c.out_ch(), c.kernel());
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let wt = c.weight.data();
    let batch = input.rows();

    let mut gw = vec![0.0f64; wt.len()];
    let mut gb = vec![0.0f64; oc];
    let mut gi = vec![0.0f64; input.len()];
    let in_row = ic * h * w;
    for r in 0..batch {
        let x = input.row(r);
        let d = grad_out.row(r);
        let gi_row = &mut gi[r * in_row..(r + 1) * in_row];
        for o in 0..oc {
            for y in 0..ho {
                for xo in 0..wo {
                    let dv = d[(o * ho + y) * wo + xo].as_f64();
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for ci in 0..ic {
                        for ky in 0..k {
                            let Some(iy) = src_coord(y, ky, c.stride, c.padding, h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = src_coord(xo, kx, c.stride, c.padding, w) else {
                                    continue;
                                };
                                let wi = ((o * ic + ci) * k + ky) * k + kx;
                                let xi = (ci * h + iy) * w + ix;
                                gw[wi] += dv * x[xi].as_f64();
                                gi_row[xi] += dv * wt[wi].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(F::of).collect::<Vec<_>>();
    (
        Tensor::new(input.shape().to_vec(), conv(gi)).expect("grad input shape"),
        Tensor::new(c.weight.shape().to_vec(), conv(gw)).expect("grad weight shape"),
        Tensor::new(vec![oc], conv(gb)).expect("grad bias shape"),
    )
}

use super::tape::{Backward, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

fn shape_err(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        op,
        dim,
        expected,
        found,
    }
}

/// Unfolds a zero-padded `[c, h, w]` image into a `[c * 9, h * w]` patch
/// matrix for a 3x3 / stride 1 / pad 1 convolution.
fn im2col<T: Float>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c * TAPS * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // dst[x] = src[x + kx - 1] where in range
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
fn col2im<T: Float>(col: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    d.iter_mut().zip(s).for_each(|(a, b)| *a = *a + *b);
                }
            }
        }
    }
    out
}

struct Conv2d<T> {
    inputs: [Var; 3],
    col: Vec<T>,
    dims: (usize, usize, usize, usize),
}

impl<T: Float> Backward<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        tape: &Tape<T>,
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (c_in, c_out, h, w) = self.dims;
        let hw = h * w;
        let k = c_in * TAPS;

        let d_input = needs[0].then(|| {
            let weight = tape.value(self.inputs[1]).data();
            let mut d_col = vec![T::zero(); k * hw];
            T::gemm(
                k,
                c_out,
                hw,
                T::one(),
                weight,
                (1, k as isize),
                grad,
                (hw as isize, 1),
                T::zero(),
                &mut d_col,
            );
            col2im(&d_col, c_in, h, w)
        });
        let d_weight = needs[1].then(|| {
            let mut dw = vec![T::zero(); c_out * k];
            T::gemm(
                c_out,
                hw,
                k,
                T::one(),
                grad,
                (hw as isize, 1),
                &self.col,
                (1, hw as isize),
                T::zero(),
                &mut dw,
            );
            dw
        });
        let d_bias = needs[2].then(|| {
            grad.chunks_exact(hw)
                .map(|plane| plane.iter().copied().sum())
                .collect()
        });
        vec![d_input, d_weight, d_bias]
    }
}

struct Relu {
    inputs: [Var; 1],
}

impl<T: Float> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = tape.value(self.inputs[0]).data();
        let g = x
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    }
}

struct ChannelNorm<T> {
    inputs: [Var; 1],
    inv_std: Vec<T>,
}

impl<T: Float> Backward<T> for ChannelNorm<T> {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _: &Tape<T>, out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let hw = out.shape()[1] * out.shape()[2];
        let n = T::from_usize(hw).unwrap();
        let mut dx = vec![T::zero(); grad.len()];
        for (c, &inv_std) in self.inv_std.iter().enumerate() {
            let range = c * hw..(c + 1) * hw;
            let y = &out.data()[range.clone()];
            let g = &grad[range.clone()];
            let sum_g: T = g.iter().copied().sum();
            let sum_gy: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
            for ((d, &gi), &yi) in dx[range].iter_mut().zip(g).zip(y) {
                *d = inv_std * (gi - (sum_g + yi * sum_gy) / n);
            }
        }
        vec![Some(dx)]
    }
}

struct ChannelAffine {
    inputs: [Var; 3],
}

impl<T: Float> Backward<T> for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = tape.value(self.inputs[0]);
        let gamma = tape.value(self.inputs[1]).data();
        let hw = x.shape()[1] * x.shape()[2];
        let dx = needs[0].then(|| {
            grad.iter()
                .enumerate()
                .map(|(i, &g)| g * gamma[i / hw])
                .collect()
        });
        let dgamma = needs[1].then(|| {
            grad.chunks_exact(hw)
                .zip(x.data().chunks_exact(hw))
                .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
                .collect()
        });
        let dbeta = needs[2].then(|| grad.chunks_exact(hw).map(|g| g.iter().copied().sum()).collect());
        vec![dx, dgamma, dbeta]
    }
}

struct SoftmaxChannels {
    inputs: [Var; 1],
}

impl<T: Float> Backward<T> for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _: &Tape<T>, out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
        let hw = h * w;
        let y = out.data();
        let mut dx = vec![T::zero(); y.len()];
        for p in 0..hw {
            let dot: T = (0..c).map(|ch| grad[ch * hw + p] * y[ch * hw + p]).sum();
            for ch in 0..c {
                let i = ch * hw + p;
                dx[i] = y[i] * (grad[i] - dot);
            }
        }
        vec![Some(dx)]
    }
}

struct Reduce<T> {
    inputs: [Var; 1],
    kind: ReduceKind<T>,
}

enum ReduceKind<T> {
    Sum,
    SumSquares,
    Weighted(Vec<T>),
}

impl<T: Float> Backward<T> for Reduce<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::SumSquares => "sum_squares",
            ReduceKind::Weighted(_) => "weighted_sum",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = tape.value(self.inputs[0]).data();
        let g = grad[0];
        let dx = match &self.kind {
            ReduceKind::Sum => vec![g; x.len()],
            ReduceKind::SumSquares => x.iter().map(|&v| (v + v) * g).collect(),
            ReduceKind::Weighted(w) => w.iter().map(|&v| v * g).collect(),
        };
        vec![Some(dx)]
    }
}

struct LinearCombination<T> {
    inputs: Vec<Var>,
    coefficients: Vec<T>,
}

impl<T: Float> Backward<T> for LinearCombination<T> {
    fn name(&self) -> &'static str {
        "linear_combination"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        self.coefficients
            .iter()
            .map(|&c| Some(grad.iter().map(|&g| g * c).collect()))
            .collect()
    }
}

impl<T: Float> Tape<T> {
    /// 3x3 convolution with stride 1 and zero padding 1.
    ///
    /// `input` is `[c_in, h, w]`, `weight` is `[c_out, c_in, 3, 3]` and
    /// `bias` is `[c_out]`. Any other stride, padding or kernel size is
    /// rejected.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride != 1 || pad != 1 {
            return Err(Error::Unsupported(format!(
                "conv2d supports only stride 1 / pad 1, got stride {stride} / pad {pad}"
            )));
        }
        let (c_in, h, w) = self.value(input).dims3(OP)?;
        let ws = self.value(weight).shape();
        if ws.len() != 4 {
            return Err(Error::Rank {
                op: OP,
                expected: 4,
                found: ws.to_vec(),
            });
        }
        if ws[2] != KERNEL || ws[3] != KERNEL {
            return Err(Error::Unsupported(format!(
                "conv2d supports only 3x3 kernels, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if ws[1] != c_in {
            return Err(shape_err(OP, "weight input channels", c_in, ws[1]));
        }
        let c_out = ws[0];
        let bs = self.value(bias).shape();
        if bs != [c_out] {
            return Err(shape_err(OP, "bias length", c_out, bs.iter().product()));
        }
        if h == 0 || w == 0 {
            return Err(Error::ImageTooSmall { height: h, width: w });
        }

        let hw = h * w;
        let k = c_in * TAPS;
        let col = im2col(self.value(input).data(), c_in, h, w);
        let mut out = Vec::with_capacity(c_out * hw);
        for &b in self.value(bias).data() {
            out.extend(std::iter::repeat_n(b, hw));
        }
        T::gemm(
            c_out,
            k,
            hw,
            T::one(),
            self.value(weight).data(),
            (k as isize, 1),
            &col,
            (hw as isize, 1),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([c_out, h, w], out)?;
        let needs_col = self.requires_grad(weight);
        Ok(self.record(
            value,
            Box::new(Conv2d {
                inputs: [input, weight, bias],
                col: if needs_col { col } else { Vec::new() },
                dims: (c_in, c_out, h, w),
            }),
        ))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(value, Box::new(Relu { inputs: [x] }))
    }

    /// Per-channel standardization over the spatial plane:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let input = self.value(x);
        let (c, h, w) = input.dims3("channel_norm")?;
        let hw = h * w;
        let n = T::from_usize(hw).unwrap();
        let mut out = Vec::with_capacity(input.numel());
        let mut inv_std = Vec::with_capacity(c);
        for plane in input.data().chunks_exact(hw) {
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            out.extend(plane.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new([c, h, w], out)?;
        Ok(self.record(value, Box::new(ChannelNorm { inputs: [x], inv_std })))
    }

    /// Per-channel `gamma[c] * x + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const OP: &str = "channel_affine";
        let input = self.value(x);
        let (c, h, w) = input.dims3(OP)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] {
            return Err(shape_err(OP, "scale length", c, g.numel()));
        }
        if b.shape() != [c] {
            return Err(shape_err(OP, "shift length", c, b.numel()));
        }
        let hw = h * w;
        let out = input
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| g.data()[i / hw] * v + b.data()[i / hw])
            .collect();
        let value = Tensor::new([c, h, w], out)?;
        Ok(self.record(value, Box::new(ChannelAffine { inputs: [x, gamma, beta] })))
    }

    /// Softmax across channels at every pixel, computed after subtracting
    /// the per-pixel maximum.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (c, h, w) = input.dims3("softmax_channels")?;
        let hw = h * w;
        let src = input.data();
        let mut out = vec![T::zero(); src.len()];
        for p in 0..hw {
            let max = (0..c)
                .map(|ch| src[ch * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ch in 0..c {
                let e = (src[ch * hw + p] - max).exp();
                out[ch * hw + p] = e;
                total = total + e;
            }
            for ch in 0..c {
                out[ch * hw + p] = out[ch * hw + p] / total;
            }
        }
        let value = Tensor::new([c, h, w], out)?;
        Ok(self.record(value, Box::new(SoftmaxChannels { inputs: [x] })))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.record(
            Tensor::scalar(s),
            Box::new(Reduce {
                inputs: [x],
                kind: ReduceKind::Sum,
            }),
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.record(
            Tensor::scalar(s),
            Box::new(Reduce {
                inputs: [x],
                kind: ReduceKind::SumSquares,
            }),
        )
    }

    /// `sum(weights * x)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let data = self.value(x).data();
        if weights.len() != data.len() {
            return Err(shape_err("weighted_sum", "weight count", data.len(), weights.len()));
        }
        let s = data.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.record(
            Tensor::scalar(s),
            Box::new(Reduce {
                inputs: [x],
                kind: ReduceKind::Weighted(weights),
            }),
        ))
    }

    /// `sum_i coefficients[i] * terms[i]` over same-shaped values.
    pub fn linear_combination(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidConfig("empty linear combination".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    "linear_combination",
                    "term element count",
                    acc.len(),
                    t.numel(),
                ));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, &b)| *a = *a + c * b);
        }
        let value = Tensor::new(shape, acc)?;
        Ok(self.record(
            value,
            Box::new(LinearCombination {
                inputs: terms.iter().map(|t| t.0).collect(),
                coefficients: terms.iter().map(|t| t.1).collect(),
            }),
        ))
    }
}

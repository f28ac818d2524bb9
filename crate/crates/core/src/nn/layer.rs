use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{AdamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Layer types. Spatial activations are laid out `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        units: usize,
    },
    /// 3x3 kernel, stride 1, "same" zero padding.
    Conv2d {
        in_channels: usize,
        filters: usize,
    },
    /// 2x2 window, stride 2, floor on odd sides.
    MaxPool,
    GlobalAvgPool,
    Activation(Activation),
    Flatten,
    /// Zero-pads a vector to `side * side` and lays it out row-major as `[1, side, side]`.
    Reshape {
        side: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
    pub trainable: bool,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn param_shapes(kind: &LayerKind) -> Vec<Vec<usize>> {
        match *kind {
            LayerKind::Dense { inputs, units } => vec![vec![units, inputs], vec![units]],
            LayerKind::Conv2d {
                in_channels,
                filters,
            } => vec![vec![filters, in_channels, 3, 3], vec![filters]],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Err(AdamError::ShapeMismatch(format!(
                "{what} cannot accept input shape {input:?}"
            )))
        };
        match *kind {
            LayerKind::Dense { inputs, units } => {
                if input != [inputs] {
                    return bad("dense");
                }
                Ok(vec![units])
            }
            LayerKind::Conv2d {
                in_channels,
                filters,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad("conv2d");
                }
                Ok(vec![filters, input[1], input[2]])
            }
            LayerKind::MaxPool => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad("maxpool");
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 || input[1] == 0 || input[2] == 0 {
                    return bad("global_avg_pool");
                }
                Ok(vec![input[0]])
            }
            LayerKind::Activation(_) => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Reshape { side } => {
                if input.len() != 1 || input[0] > side * side {
                    return bad("reshape");
                }
                Ok(vec![1, side, side])
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self.kind {
            LayerKind::Dense { inputs, units } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let xs = x.data();
                let out = (0..units)
                    .map(|u| {
                        let row = &w[u * inputs..(u + 1) * inputs];
                        b[u] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                Tensor::vector(out)
            }
            LayerKind::Conv2d {
                in_channels,
                filters,
            } => conv_forward(x, &self.params[0], &self.params[1], in_channels, filters),
            LayerKind::MaxPool => maxpool_forward(x).0,
            LayerKind::GlobalAvgPool => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = h * w;
                let out = (0..c)
                    .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::vector(out)
            }
            LayerKind::Activation(a) => {
                let f: fn(f64) -> f64 = match a {
                    Activation::Relu => |v| v.max(0.0),
                    Activation::Tanh => f64::tanh,
                    Activation::Sigmoid => sigmoid,
                };
                let data = x.data().iter().map(|&v| f(v)).collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            }
            LayerKind::Flatten => x.clone().reshaped(vec![x.len()]),
            LayerKind::Reshape { side } => {
                let mut data = vec![0.0; side * side];
                data[..x.len()].copy_from_slice(x.data());
                Tensor::new(vec![1, side, side], data).expect("padded grid")
            }
        }
    }

    /// Back-propagates `dy` through the layer.
    ///
    /// Parameter gradients are added into `grad` (this layer's slice of the
    /// flat gradient) when it is `Some`. Returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        grad: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Option<Tensor> {
        match self.kind {
            LayerKind::Dense { inputs, units } => {
                let w = self.params[0].data();
                if let Some(g) = grad {
                    let (gw, gb) = g.split_at_mut(units * inputs);
                    for u in 0..units {
                        let d = dy.data()[u];
                        if d != 0.0 {
                            for (gi, xi) in
                                gw[u * inputs..(u + 1) * inputs].iter_mut().zip(x.data())
                            {
                                *gi += d * xi;
                            }
                        }
                        gb[u] += d;
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![0.0; inputs];
                    for u in 0..units {
                        let d = dy.data()[u];
                        if d != 0.0 {
                            for (o, wi) in dx.iter_mut().zip(&w[u * inputs..(u + 1) * inputs]) {
                                *o += d * wi;
                            }
                        }
                    }
                    Tensor::vector(dx)
                })
            }
            LayerKind::Conv2d {
                in_channels,
                filters,
            } => conv_backward(x, dy, &self.params[0], in_channels, filters, grad, need_dx),
            LayerKind::MaxPool => need_dx.then(|| {
                let (_, argmax) = maxpool_forward(x);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += dy.data()[o];
                }
                dx
            }),
            LayerKind::GlobalAvgPool => need_dx.then(|| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = h * w;
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    let v = dy.data()[ch] / hw as f64;
                    dx.data_mut()[ch * hw..(ch + 1) * hw].fill(v);
                }
                dx
            }),
            LayerKind::Activation(a) => need_dx.then(|| {
                let data = match a {
                    Activation::Relu => x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xi, &d)| if xi > 0.0 { d } else { 0.0 })
                        .collect(),
                    Activation::Tanh => y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&yi, &d)| d * (1.0 - yi * yi))
                        .collect(),
                    Activation::Sigmoid => y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&yi, &d)| d * yi * (1.0 - yi))
                        .collect(),
                };
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            }),
            LayerKind::Flatten => need_dx.then(|| dy.clone().reshaped(x.shape().to_vec())),
            LayerKind::Reshape { .. } => {
                need_dx.then(|| Tensor::vector(dy.data()[..x.len()].to_vec()))
            }
        }
    }
}

/// Row/column ranges of output positions that read input offset `d` in `0..n`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, channels: usize, filters: usize) -> Tensor {
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let hw = h * wd;
    let mut out = vec![0.0; filters * hw];
    let xs = x.data();
    let ws = w.data();
    for f in 0..filters {
        let of = &mut out[f * hw..(f + 1) * hw];
        of.fill(b.data()[f]);
        for c in 0..channels {
            let xc = &xs[c * hw..(c + 1) * hw];
            for ki in 0..3 {
                let di = ki as isize - 1;
                let (i0, i1) = valid_range(di, h);
                for kj in 0..3 {
                    let dj = kj as isize - 1;
                    let (j0, j1) = valid_range(dj, wd);
                    let k = ws[((f * channels + c) * 3 + ki) * 3 + kj];
                    for i in i0..i1 {
                        let src = ((i as isize + di) as usize) * wd;
                        let orow = &mut of[i * wd + j0..i * wd + j1];
                        let irow = &xc[(src as isize + j0 as isize + dj) as usize..];
                        for (o, v) in orow.iter_mut().zip(irow) {
                            *o += k * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![filters, h, wd], out).expect("conv output")
}

fn conv_backward(
    x: &Tensor,
    dy: &Tensor,
    w: &Tensor,
    channels: usize,
    filters: usize,
    grad: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let hw = h * wd;
    let xs = x.data();
    let ds = dy.data();
    let ws = w.data();
    if let Some(g) = grad {
        let (gw, gb) = g.split_at_mut(filters * channels * 9);
        for f in 0..filters {
            let df = &ds[f * hw..(f + 1) * hw];
            gb[f] += df.iter().sum::<f64>();
            for c in 0..channels {
                let xc = &xs[c * hw..(c + 1) * hw];
                for ki in 0..3 {
                    let di = ki as isize - 1;
                    let (i0, i1) = valid_range(di, h);
                    for kj in 0..3 {
                        let dj = kj as isize - 1;
                        let (j0, j1) = valid_range(dj, wd);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let src = ((i as isize + di) as usize) * wd;
                            let drow = &df[i * wd + j0..i * wd + j1];
                            let irow = &xc[(src as isize + j0 as isize + dj) as usize..];
                            acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[((f * channels + c) * 3 + ki) * 3 + kj] += acc;
                    }
                }
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![0.0; channels * hw];
        for f in 0..filters {
            let df = &ds[f * hw..(f + 1) * hw];
            for c in 0..channels {
                let dxc = &mut dx[c * hw..(c + 1) * hw];
                for ki in 0..3 {
                    let di = ki as isize - 1;
                    let (i0, i1) = valid_range(di, h);
                    for kj in 0..3 {
                        let dj = kj as isize - 1;
                        let (j0, j1) = valid_range(dj, wd);
                        let k = ws[((f * channels + c) * 3 + ki) * 3 + kj];
                        if k == 0.0 {
                            continue;
                        }
                        for i in i0..i1 {
                            let src = ((i as isize + di) as usize) * wd;
                            let start = (src as isize + j0 as isize + dj) as usize;
                            let drow = &df[i * wd + j0..i * wd + j1];
                            for (o, d) in dxc[start..start + drow.len()].iter_mut().zip(drow) {
                                *o += k * d;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("conv input grad")
    })
}

/// Pooled output plus, per output cell, the flat input index of its maximum
/// (first in scan order on ties).
fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let xs = x.data();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * i + a) * w + 2 * j + b;
                    if best == usize::MAX || xs[idx] > best_v {
                        best = idx;
                        best_v = xs[idx];
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).expect("pool output"), arg)
}

//! Forward and backward passes.

use crate::error::{NnError, Result};
use crate::layer::LayerSpec;
use crate::model::{Gradients, Model, Param};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Upper bound on the im2col buffer, in elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 22;

/// Every layer output of one forward pass, plus the input that produced them.
#[derive(Clone, Debug)]
pub struct Activations<T: Scalar = f32> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Layer outputs in order; the last one is the network output.
    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs.pop().unwrap_or(self.input)
    }
}

fn check_input<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<()> {
    if batch.shape().len() != model.input_shape().len() + 1 || &batch.shape()[1..] != model.input_shape() {
        return Err(NnError::Shape {
            layer: 0,
            detail: format!(
                "batch shape {:?} does not match model input [N, {:?}]",
                batch.shape(),
                model.input_shape()
            ),
        });
    }
    Ok(())
}

/// Runs the network on an `N × input_shape` batch and keeps every layer output.
pub fn forward<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<Activations<T>> {
    check_input(model, batch)?;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(model.layers().len());
    for i in 0..model.layers().len() {
        let input = if i == 0 { batch } else { &outputs[i - 1] };
        let out = layer_forward(model, i, input, &outputs)?;
        outputs.push(out);
    }
    Ok(Activations { input: batch.clone(), outputs })
}

/// Network output only.
pub fn predict<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    forward(model, batch).map(Activations::into_output)
}

/// Recomputes layers `start..` reusing cached outputs of earlier layers.
/// Used by the finite-difference checker.
pub(crate) fn forward_from<T: Scalar>(
    model: &Model<T>,
    cached: &Activations<T>,
    start: usize,
) -> Result<Activations<T>> {
    let n = model.layers().len();
    // Positions below `start` keep their cached values.
    let mut outputs: Vec<Tensor<T>> = cached.outputs[..start.min(n)].to_vec();
    for i in start..n {
        let input = if i == 0 { &cached.input } else { &outputs[i - 1] };
        let out = layer_forward(model, i, input, &outputs)?;
        outputs.push(out);
    }
    Ok(Activations { input: cached.input.clone(), outputs })
}

/// True when a ReLU input changed sign or a max-pool window changed its winner
/// between two passes, i.e. the loss is not differentiable along the path
/// between them.
pub(crate) fn crosses_kink<T: Scalar>(model: &Model<T>, a: &Activations<T>, b: &Activations<T>, start: usize) -> bool {
    for i in start..model.layers().len() {
        let (ia, ib) = if i == 0 {
            (&a.input, &b.input)
        } else {
            (&a.outputs[i - 1], &b.outputs[i - 1])
        };
        match model.layers()[i] {
            LayerSpec::Relu => {
                if ia.data().iter().zip(ib.data()).any(|(&x, &y)| (x > T::zero()) != (y > T::zero())) {
                    return true;
                }
            }
            LayerSpec::MaxPool2d { .. } => {
                // A changed winner shows up as an output that no longer equals the
                // same-position winner of the other pass.
                let in_shape: &[usize] = if i == 0 { model.input_shape() } else { &model.shapes()[i - 1] };
                if pool_argmax(model, i, in_shape, ia) != pool_argmax(model, i, in_shape, ib) {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

fn pool_argmax<T: Scalar>(model: &Model<T>, i: usize, in_shape: &[usize], x: &Tensor<T>) -> Vec<usize> {
    let LayerSpec::MaxPool2d { size, stride } = model.layers()[i] else { return Vec::new() };
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (model.shapes()[i][1], model.shapes()[i][2]);
    let mut out = Vec::with_capacity(x.batch() * c * ho * wo);
    for plane in 0..x.batch() * c {
        let xp = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut at = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if xp[idx] > best {
                            best = xp[idx];
                            at = idx;
                        }
                    }
                }
                out.push(at);
            }
        }
    }
    out
}

fn out_tensor<T: Scalar>(model: &Model<T>, i: usize, batch: usize) -> Tensor<T> {
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.shapes()[i]);
    Tensor::zeros(shape)
}

fn layer_forward<T: Scalar>(
    model: &Model<T>,
    i: usize,
    input: &Tensor<T>,
    earlier: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let n = input.batch();
    let mut out = out_tensor(model, i, n);
    let in_shape: &[usize] = if i == 0 { model.input_shape() } else { &model.shapes()[i - 1] };
    match model.layers()[i] {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let p = model.params()[i].as_ref().expect("conv params");
            let geo = ConvGeo::new(in_channels, in_shape[1], in_shape[2], kernel, stride, padding, &model.shapes()[i]);
            conv_forward(&geo, out_channels, p, input.data(), out.data_mut(), n);
        }
        LayerSpec::MaxPool2d { size, stride } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (ho, wo) = (model.shapes()[i][1], model.shapes()[i][2]);
            let x = input.data();
            let y = out.data_mut();
            for plane in 0..n * c {
                let xp = &x[plane * h * w..(plane + 1) * h * w];
                let yp = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        for ky in 0..size {
                            let row = (oy * stride + ky) * w + ox * stride;
                            for &v in &xp[row..row + size] {
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        yp[oy * wo + ox] = best;
                    }
                }
            }
        }
        LayerSpec::Relu => {
            for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                *o = if v > T::zero() { v } else { T::zero() };
            }
        }
        LayerSpec::Dense { in_features, out_features } => {
            let p = model.params()[i].as_ref().expect("dense params");
            let y = out.data_mut();
            for row in y.chunks_mut(out_features) {
                row.copy_from_slice(p.bias.data());
            }
            matmul(n, in_features, out_features, input.data(), false, p.weight.data(), true, y, true);
        }
        LayerSpec::Upsample2d { factor } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (ho, wo) = (h * factor, w * factor);
            let x = input.data();
            let y = out.data_mut();
            for plane in 0..n * c {
                let xp = &x[plane * h * w..(plane + 1) * h * w];
                let yp = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    let src = &xp[(oy / factor) * w..(oy / factor + 1) * w];
                    for (ox, o) in yp[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                        *o = src[ox / factor];
                    }
                }
            }
        }
        LayerSpec::Softmax => {
            let k = in_shape[0];
            let plane: usize = in_shape[1..].iter().product();
            softmax_channels(input.data(), out.data_mut(), n, k, plane);
        }
        LayerSpec::Concat { skip } => {
            let skipped = &earlier[skip];
            let a = input.item_len();
            let b = skipped.item_len();
            let y = out.data_mut();
            for s in 0..n {
                y[s * (a + b)..s * (a + b) + a].copy_from_slice(input.item(s));
                y[s * (a + b) + a..(s + 1) * (a + b)].copy_from_slice(skipped.item(s));
            }
        }
    }
    Ok(out)
}

/// Softmax over `k` channels at each of `plane` positions, accumulated in f64.
pub(crate) fn softmax_channels<T: Scalar>(x: &[T], y: &mut [T], n: usize, k: usize, plane: usize) {
    let mut buf = vec![0.0f64; k];
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(x[base + c * plane + p].as_f64());
            }
            let mut sum = 0.0;
            for c in 0..k {
                buf[c] = (x[base + c * plane + p].as_f64() - max).exp();
                sum += buf[c];
            }
            for c in 0..k {
                y[base + c * plane + p] = T::of_f64(buf[c] / sum);
            }
        }
    }
}

struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out: &[usize]) -> Self {
        Self { c, h, w, k, stride, pad, ho: out[1], wo: out[2] }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self, n: usize) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, n)
    }

    /// Writes the patches of one item into columns `[col_off, col_off + plane)` of a
    /// `rows × ld` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T], ld: usize, col_off: usize) {
        let (ho, wo) = (self.ho, self.wo);
        for ci in 0..self.c {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * ld + col_off..row * ld + col_off + ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Accumulates columns back into an item gradient.
    fn col2im<T: Scalar>(&self, col: &[T], ld: usize, col_off: usize, dx: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for ci in 0..self.c {
            let dxc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * ld + col_off..row * ld + col_off + ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(geo: &ConvGeo, cout: usize, p: &Param<T>, x: &[T], y: &mut [T], n: usize) {
    let (rows, plane) = (geo.rows(), geo.plane());
    let in_len = geo.c * geo.h * geo.w;
    let chunk = geo.chunk(n);
    let mut col = vec![T::zero(); rows * plane * chunk];
    let mut tmp = vec![T::zero(); cout * plane * chunk];
    let mut start = 0;
    while start < n {
        let m = chunk.min(n - start);
        let ld = m * plane;
        for s in 0..m {
            geo.im2col(&x[(start + s) * in_len..(start + s + 1) * in_len], &mut col, ld, s * plane);
        }
        matmul(cout, rows, ld, p.weight.data(), false, &col[..rows * ld], false, &mut tmp[..cout * ld], false);
        for s in 0..m {
            let item = &mut y[(start + s) * cout * plane..(start + s + 1) * cout * plane];
            for co in 0..cout {
                let b = p.bias.data()[co];
                let src = &tmp[co * ld + s * plane..co * ld + (s + 1) * plane];
                for (o, &v) in item[co * plane..(co + 1) * plane].iter_mut().zip(src) {
                    *o = v + b;
                }
            }
        }
        start += m;
    }
}

/// Gradients of the loss with respect to every parameter, given the gradient
/// at the network output.
pub fn backward<T: Scalar>(
    model: &Model<T>,
    acts: &Activations<T>,
    output_grad: &Tensor<T>,
) -> Result<Gradients<T>> {
    let layers = model.layers();
    if acts.outputs.len() != layers.len() {
        return Err(NnError::Mismatch(format!(
            "{} activations for {} layers",
            acts.outputs.len(),
            layers.len()
        )));
    }
    let n = acts.input.batch();
    for (i, out) in acts.outputs.iter().enumerate() {
        if out.batch() != n || out.shape()[1..] != model.shapes()[i][..] {
            return Err(NnError::Mismatch(format!("layer {i} output shape {:?}", out.shape())));
        }
    }
    if output_grad.shape() != acts.output().shape() {
        return Err(NnError::Shape {
            layer: layers.len().saturating_sub(1),
            detail: format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                acts.output().shape()
            ),
        });
    }

    let mut grads = Gradients::zeros_like(model);
    let mut out_grads: Vec<Option<Tensor<T>>> = vec![None; layers.len()];
    out_grads[layers.len() - 1] = Some(output_grad.clone());

    for i in (0..layers.len()).rev() {
        let Some(dy) = out_grads[i].take() else { continue };
        let input = if i == 0 { &acts.input } else { &acts.outputs[i - 1] };
        let in_shape: &[usize] = if i == 0 { model.input_shape() } else { &model.shapes()[i - 1] };
        // The input gradient of layer 0 is never needed.
        let need_dx = i > 0;
        let mut dx: Option<Tensor<T>> = None;
        match layers[i] {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let p = model.params()[i].as_ref().expect("conv params");
                let g = grads.per_layer[i].as_mut().expect("conv grads");
                let geo = ConvGeo::new(in_channels, in_shape[1], in_shape[2], kernel, stride, padding, &model.shapes()[i]);
                let mut dxt = need_dx.then(|| Tensor::zeros(input.shape().to_vec()));
                conv_backward(&geo, out_channels, p, g, input.data(), dy.data(), dxt.as_mut().map(|t| t.data_mut()), n);
                dx = dxt;
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if need_dx {
                    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                    let (ho, wo) = (model.shapes()[i][1], model.shapes()[i][2]);
                    let mut dxt = Tensor::zeros(input.shape().to_vec());
                    let x = input.data();
                    let d = dxt.data_mut();
                    for plane in 0..n * c {
                        let xp = &x[plane * h * w..(plane + 1) * h * w];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        let gp = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                // First maximum in scan order, matching the forward pass.
                                let mut best = T::neg_infinity();
                                let mut at = 0;
                                for ky in 0..size {
                                    for kx in 0..size {
                                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                                        if xp[idx] > best {
                                            best = xp[idx];
                                            at = idx;
                                        }
                                    }
                                }
                                dp[at] += gp[oy * wo + ox];
                            }
                        }
                    }
                    dx = Some(dxt);
                }
            }
            LayerSpec::Relu => {
                if need_dx {
                    let mut dxt = dy;
                    for (d, &v) in dxt.data_mut().iter_mut().zip(input.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    dx = Some(dxt.reshape(input.shape().to_vec())?);
                }
            }
            LayerSpec::Dense { in_features, out_features } => {
                let p = model.params()[i].as_ref().expect("dense params");
                let g = grads.per_layer[i].as_mut().expect("dense grads");
                matmul(out_features, n, in_features, dy.data(), true, input.data(), false, g.weight.data_mut(), true);
                for (o, b) in g.bias.data_mut().iter_mut().enumerate() {
                    let sum: f64 = (0..n).map(|s| dy.data()[s * out_features + o].as_f64()).sum();
                    *b += T::of_f64(sum);
                }
                if need_dx {
                    let mut dxt = Tensor::zeros(input.shape().to_vec());
                    matmul(n, out_features, in_features, dy.data(), false, p.weight.data(), false, dxt.data_mut(), false);
                    dx = Some(dxt);
                }
            }
            LayerSpec::Upsample2d { factor } => {
                if need_dx {
                    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                    let (ho, wo) = (h * factor, w * factor);
                    let mut dxt = Tensor::zeros(input.shape().to_vec());
                    let d = dxt.data_mut();
                    for plane in 0..n * c {
                        let gp = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dp[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
                            }
                        }
                    }
                    dx = Some(dxt);
                }
            }
            LayerSpec::Softmax => {
                if need_dx {
                    let k = in_shape[0];
                    let plane: usize = in_shape[1..].iter().product();
                    let y = acts.outputs[i].data();
                    let mut dxt = Tensor::zeros(input.shape().to_vec());
                    let d = dxt.data_mut();
                    for s in 0..n {
                        let base = s * k * plane;
                        for p in 0..plane {
                            let dot: f64 = (0..k)
                                .map(|c| dy.data()[base + c * plane + p].as_f64() * y[base + c * plane + p].as_f64())
                                .sum();
                            for c in 0..k {
                                let idx = base + c * plane + p;
                                d[idx] = T::of_f64(y[idx].as_f64() * (dy.data()[idx].as_f64() - dot));
                            }
                        }
                    }
                    dx = Some(dxt);
                }
            }
            LayerSpec::Concat { skip } => {
                let a = input.item_len();
                let b = acts.outputs[skip].item_len();
                let mut skip_grad = Tensor::zeros(acts.outputs[skip].shape().to_vec());
                let mut dxt = Tensor::zeros(input.shape().to_vec());
                for s in 0..n {
                    let row = &dy.data()[s * (a + b)..(s + 1) * (a + b)];
                    dxt.data_mut()[s * a..(s + 1) * a].copy_from_slice(&row[..a]);
                    skip_grad.data_mut()[s * b..(s + 1) * b].copy_from_slice(&row[a..]);
                }
                accumulate(&mut out_grads[skip], skip_grad);
                if need_dx {
                    dx = Some(dxt);
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(&mut out_grads[i - 1], dx);
        }
    }
    Ok(grads)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    geo: &ConvGeo,
    cout: usize,
    p: &Param<T>,
    g: &mut Param<T>,
    x: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    n: usize,
) {
    let (rows, plane) = (geo.rows(), geo.plane());
    let in_len = geo.c * geo.h * geo.w;
    let chunk = geo.chunk(n);
    let mut col = vec![T::zero(); rows * plane * chunk];
    let mut dyg = vec![T::zero(); cout * plane * chunk];
    let mut dcol = if dx.is_some() { vec![T::zero(); rows * plane * chunk] } else { Vec::new() };
    let mut bias_acc = vec![0.0f64; cout];
    let mut start = 0;
    while start < n {
        let m = chunk.min(n - start);
        let ld = m * plane;
        for s in 0..m {
            geo.im2col(&x[(start + s) * in_len..(start + s + 1) * in_len], &mut col, ld, s * plane);
            let item = &dy[(start + s) * cout * plane..(start + s + 1) * cout * plane];
            for co in 0..cout {
                let src = &item[co * plane..(co + 1) * plane];
                dyg[co * ld + s * plane..co * ld + (s + 1) * plane].copy_from_slice(src);
                bias_acc[co] += src.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        matmul(cout, ld, rows, &dyg[..cout * ld], false, &col[..rows * ld], true, g.weight.data_mut(), true);
        if let Some(dx) = dx.as_deref_mut() {
            matmul(rows, cout, ld, p.weight.data(), true, &dyg[..cout * ld], false, &mut dcol[..rows * ld], false);
            for s in 0..m {
                geo.col2im(&dcol, ld, s * plane, &mut dx[(start + s) * in_len..(start + s + 1) * in_len]);
            }
        }
        start += m;
    }
    for (b, acc) in g.bias.data_mut().iter_mut().zip(bias_acc) {
        *b += T::of_f64(acc);
    }
}

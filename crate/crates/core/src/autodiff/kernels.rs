//! Forward and backward kernels for every primitive operation.
//!
//! These are plain functions over tensors so that tape recording and
//! tape-free inference share one numeric path. All reductions run in fixed
//! row-major order, which makes results bitwise reproducible.

use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before any logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn check_conv_shapes(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "conv2d input must be HxWxC, got {:?}",
            input.shape()
        )));
    }
    if kernels.rank() != 4 || kernels.shape()[0] != kernels.shape()[1] {
        return Err(CoreError::InvalidArgument(format!(
            "conv2d kernels must be kxkxCinxCout, got {:?}",
            kernels.shape()
        )));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kcin, cout) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    if kcin != cin {
        return Err(CoreError::shape_mismatch(
            "conv2d input channels vs kernel channels",
            input.shape(),
            kernels.shape(),
        ));
    }
    if let Some(bias) = bias {
        if bias.rank() != 1 || bias.shape()[0] != cout {
            return Err(CoreError::shape_mismatch(
                "conv2d bias vs kernel output channels",
                bias.shape(),
                kernels.shape(),
            ));
        }
    }
    if stride == 0 {
        return Err(CoreError::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(CoreError::InvalidArgument(format!(
            "kernel {k}x{k} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((h, w, cin, k, cout))
}

/// Cross-correlation of an HxWxCin input with kxkxCinxCout kernels.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (h, w, cin, k, cout) = check_conv_shapes(input, kernels, Some(bias), stride, padding)?;
    let oh = conv2d_output_extent(h, k, stride, padding);
    let ow = conv2d_output_extent(w, k, stride, padding);
    let x = input.data();
    let ker = kernels.data();
    let b = bias.data();
    let mut out = vec![0.0f64; oh * ow * cout];

    for orow in 0..oh {
        let ibase_row = orow as isize * stride as isize - padding as isize;
        for ocol in 0..ow {
            let ibase_col = ocol as isize * stride as isize - padding as isize;
            let acc = &mut out[(orow * ow + ocol) * cout..(orow * ow + ocol + 1) * cout];
            acc.copy_from_slice(b);
            for krow in 0..k {
                let irow = ibase_row + krow as isize;
                if irow < 0 || irow >= h as isize {
                    continue;
                }
                for kcol in 0..k {
                    let icol = ibase_col + kcol as isize;
                    if icol < 0 || icol >= w as isize {
                        continue;
                    }
                    let xoff = ((irow as usize) * w + icol as usize) * cin;
                    let koff = (krow * k + kcol) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        let krow_slice = &ker[koff + ci * cout..koff + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow_slice) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

/// Gradients of conv2d with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, cin, k, cout) = check_conv_shapes(input, kernels, None, stride, padding)?;
    let oh = conv2d_output_extent(h, k, stride, padding);
    let ow = conv2d_output_extent(w, k, stride, padding);
    assert_eq!(grad_out.shape(), &[oh, ow, cout], "grad_out shape");

    let x = input.data();
    let ker = kernels.data();
    let go = grad_out.data();
    let mut gin = vec![0.0f64; x.len()];
    let mut gker = vec![0.0f64; ker.len()];
    let mut gbias = vec![0.0f64; cout];

    for orow in 0..oh {
        let ibase_row = orow as isize * stride as isize - padding as isize;
        for ocol in 0..ow {
            let ibase_col = ocol as isize * stride as isize - padding as isize;
            let g = &go[(orow * ow + ocol) * cout..(orow * ow + ocol + 1) * cout];
            for (gb, &gv) in gbias.iter_mut().zip(g) {
                *gb += gv;
            }
            for krow in 0..k {
                let irow = ibase_row + krow as isize;
                if irow < 0 || irow >= h as isize {
                    continue;
                }
                for kcol in 0..k {
                    let icol = ibase_col + kcol as isize;
                    if icol < 0 || icol >= w as isize {
                        continue;
                    }
                    let xoff = ((irow as usize) * w + icol as usize) * cin;
                    let koff = (krow * k + kcol) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        let kslice = &ker[koff + ci * cout..koff + (ci + 1) * cout];
                        let gkslice = &mut gker[koff + ci * cout..koff + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += kslice[co] * g[co];
                            gkslice[co] += xv * g[co];
                        }
                        gin[xoff + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), gin)?,
        Tensor::from_vec(kernels.shape(), gker)?,
        Tensor::from_vec(&[cout], gbias)?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("relu preserves shape")
}

/// Subgradient at zero is taken as zero: gradient passes only where v > 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("relu preserves shape")
}

/// Per-pixel softmax over the channel axis, computed with max-subtraction.
pub fn pixel_softmax_forward(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 3 || logits.shape()[2] < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "pixel_softmax needs HxWx|C| logits with |C| >= 2, got {:?}",
            logits.shape()
        )));
    }
    let classes = logits.shape()[2];
    let mut out = Vec::with_capacity(logits.len());
    for pixel in logits.data().chunks_exact(classes) {
        let max = pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let start = out.len();
        for &v in pixel {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Jacobian-vector product of the per-pixel softmax:
/// g_logit_i = p_i * (g_i - sum_j g_j p_j).
pub fn pixel_softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let classes = probs.shape()[2];
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs
        .data()
        .chunks_exact(classes)
        .zip(grad_out.data().chunks_exact(classes))
    {
        let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
        for (&pi, &gi) in p.iter().zip(g) {
            out.push(pi * (gi - dot));
        }
    }
    Tensor::from_vec(probs.shape(), out).expect("softmax backward preserves shape")
}

fn check_ce_shapes(probs: &Tensor, labels: &LabelMap, mask: Option<&[bool]>) -> Result<usize> {
    if probs.rank() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "cross entropy needs HxWx|C| probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (h, w, classes) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    if labels.height() != h || labels.width() != w {
        return Err(CoreError::shape_mismatch(
            "cross entropy probabilities vs labels",
            probs.shape(),
            &[labels.height(), labels.width()],
        ));
    }
    labels.validate_classes(classes)?;
    if let Some(mask) = mask {
        if mask.len() != h * w {
            return Err(CoreError::InvalidArgument(format!(
                "mask length {} does not cover {h}x{w} pixels",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(CoreError::InvalidArgument(
                "cross entropy mask selects no pixels".into(),
            ));
        }
    }
    Ok(classes)
}

/// Mean over (masked) pixels of -log p(y_z), with probabilities clamped at
/// `LOG_CLAMP` before the logarithm.
pub fn cross_entropy_forward(
    probs: &Tensor,
    labels: &LabelMap,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let classes = check_ce_shapes(probs, labels, mask)?;
    let data = probs.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, &label) in labels.ids().iter().enumerate() {
        if let Some(mask) = mask {
            if !mask[z] {
                continue;
            }
        }
        let p = data[z * classes + label as usize].max(LOG_CLAMP);
        total -= p.ln();
        count += 1;
    }
    Ok(total / count as f64)
}

/// Gradient with respect to the probabilities. Pixels whose probability sat
/// at the clamp get zero gradient (the clamp is active there).
pub fn cross_entropy_backward(
    probs: &Tensor,
    labels: &LabelMap,
    mask: Option<&[bool]>,
    upstream: f64,
) -> Result<Tensor> {
    let classes = check_ce_shapes(probs, labels, mask)?;
    let data = probs.data();
    let count = match mask {
        Some(mask) => mask.iter().filter(|&&m| m).count(),
        None => labels.len(),
    };
    let mut grad = vec![0.0f64; probs.len()];
    for (z, &label) in labels.ids().iter().enumerate() {
        if let Some(mask) = mask {
            if !mask[z] {
                continue;
            }
        }
        let p = data[z * classes + label as usize];
        if p > LOG_CLAMP {
            grad[z * classes + label as usize] = -upstream / (count as f64 * p);
        }
    }
    Tensor::from_vec(probs.shape(), grad)
}

pub fn sum_forward(input: &Tensor) -> f64 {
    input.data().iter().sum()
}

pub fn sum_backward(input: &Tensor, upstream: f64) -> Tensor {
    Tensor::filled(input.shape(), upstream)
}

/// Mean over the spatial grid per channel: HxWxC -> C.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "global_avg_pool needs HxWxC input, got {:?}",
            input.shape()
        )));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = vec![0.0f64; c];
    for pixel in input.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(pixel) {
            *o += v;
        }
    }
    let scale = 1.0 / (h * w) as f64;
    for o in &mut out {
        *o *= scale;
    }
    Tensor::from_vec(&[c], out)
}

pub fn global_avg_pool_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Vec::with_capacity(input.len());
    for _ in 0..h * w {
        grad.extend(grad_out.data().iter().map(|&g| g * scale));
    }
    Tensor::from_vec(&[h, w, c], grad).expect("pool backward preserves shape")
}

/// Dot product with a weight vector plus bias: (x, w, b) -> scalar.
pub fn affine_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<f64> {
    if input.len() != weights.len() {
        return Err(CoreError::shape_mismatch(
            "affine input vs weights",
            input.shape(),
            weights.shape(),
        ));
    }
    if bias.len() != 1 {
        return Err(CoreError::InvalidArgument("affine bias must be a scalar".into()));
    }
    let dot: f64 = input
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&x, &w)| x * w)
        .sum();
    Ok(dot + bias.item())
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("sigmoid preserves shape")
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| p * (1.0 - p) * g)
        .collect();
    Tensor::from_vec(output.shape(), data).expect("sigmoid backward preserves shape")
}

/// Binary cross entropy of a single predicted probability against a 0/1
/// target, with the same log clamp as the pixel loss.
pub fn bce_forward(prob: f64, target: f64) -> f64 {
    -(target * prob.max(LOG_CLAMP).ln() + (1.0 - target) * (1.0 - prob).max(LOG_CLAMP).ln())
}

pub fn bce_backward(prob: f64, target: f64, upstream: f64) -> f64 {
    let mut grad = 0.0;
    if prob > LOG_CLAMP {
        grad -= target / prob;
    }
    if 1.0 - prob > LOG_CLAMP {
        grad += (1.0 - target) / (1.0 - prob);
    }
    grad * upstream
}

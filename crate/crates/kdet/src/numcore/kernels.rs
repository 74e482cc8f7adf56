//! Forward and backward kernels on plain tensors.
//!
//! These are pure functions with no graph bookkeeping; the tape calls them
//! and so does the no-grad inference path. Convolutions are lowered to
//! im2col + GEMM.

use super::tensor::{sigmoid, Tensor};
use crate::error::{Error, Result};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Output spatial size of a convolution; the division must be exact.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if k > padded {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {} exceeds padded input {}", k, padded),
        ));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "non-exact output size: ({} + 2*{} - {}) not divisible by stride {}",
                input, pad, k, stride
            ),
        ));
    }
    Ok(span / stride + 1)
}

/// Gather one image into a [C*kh*kw, Ho*Wo] column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let l = ho * wo;
    for ch in 0..c {
        let img_ch = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ch * kh + ky) * kw + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..][..wo];
                    if iy < 0 || iy as usize >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &img_ch[iy as usize * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix as usize >= w {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into one image (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let l = ho * wo;
    for ch in 0..c {
        let img_ch = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ch * kh + ky) * kw + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst_row = &mut img_ch[iy as usize * w..][..w];
                    for (ox, &s) in row[oy * wo..][..wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<()> {
    let (_, c, _, _) = input.dims4()?;
    let (o, kc, _, _) = kernel.dims4()?;
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", c, kc),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), o),
        ));
    }
    Ok(())
}

/// Cross-correlation of a batch with a kernel bank.
pub fn conv2d_fwd(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    check_conv_shapes(input, kernel, bias)?;
    let (n, c, h, w) = input.dims4()?;
    let (o, _, kh, kw) = kernel.dims4()?;
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(w, kw, stride, pad)?;
    let ck = c * kh * kw;
    let l = ho * wo;

    let mut out = vec![0.0; n * o * l];
    let mut col = vec![0.0; ck * l];
    for img in 0..n {
        im2col(
            &input.data()[img * c * h * w..][..c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut col,
        );
        let out_n = &mut out[img * o * l..][..o * l];
        // out_n[O, L] = kernel[O, CK] * col[CK, L]
        unsafe {
            matrixmultiply::dgemm(
                o,
                ck,
                l,
                1.0,
                kernel.data().as_ptr(),
                ck as isize,
                1,
                col.as_ptr(),
                l as isize,
                1,
                0.0,
                out_n.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        for oc in 0..o {
            let b = bias.data()[oc];
            for v in &mut out_n[oc * l..(oc + 1) * l] {
                *v += b;
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, kernel and bias.
/// `need_input` skips the (relatively expensive) input gradient when the
/// input is a constant leaf.
pub fn conv2d_bwd(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = input.dims4().expect("checked in forward");
    let (o, _, kh, kw) = kernel.dims4().expect("checked in forward");
    let (_, _, ho, wo) = grad_out.dims4().expect("grad shape matches forward output");
    let ck = c * kh * kw;
    let l = ho * wo;

    let mut grad_kernel = vec![0.0; o * ck];
    let mut grad_bias = vec![0.0; o];
    let mut grad_input = if need_input {
        Some(vec![0.0; n * c * h * w])
    } else {
        None
    };

    let mut col = vec![0.0; ck * l];
    let mut dcol = vec![0.0; ck * l];
    for img in 0..n {
        let go_n = &grad_out.data()[img * o * l..][..o * l];
        im2col(
            &input.data()[img * c * h * w..][..c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut col,
        );
        // grad_kernel[O, CK] += go_n[O, L] * col^T[L, CK]
        unsafe {
            matrixmultiply::dgemm(
                o,
                l,
                ck,
                1.0,
                go_n.as_ptr(),
                l as isize,
                1,
                col.as_ptr(),
                1,
                l as isize,
                1.0,
                grad_kernel.as_mut_ptr(),
                ck as isize,
                1,
            );
        }
        for oc in 0..o {
            grad_bias[oc] += go_n[oc * l..(oc + 1) * l].iter().sum::<f64>();
        }
        if let Some(gi) = grad_input.as_mut() {
            // dcol[CK, L] = kernel^T[CK, O] * go_n[O, L]
            unsafe {
                matrixmultiply::dgemm(
                    ck,
                    o,
                    l,
                    1.0,
                    kernel.data().as_ptr(),
                    1,
                    ck as isize,
                    go_n.as_ptr(),
                    l as isize,
                    1,
                    0.0,
                    dcol.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            col2im_add(
                &dcol,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut gi[img * c * h * w..][..c * h * w],
            );
        }
    }

    (
        grad_input.map(|g| Tensor::new(vec![n, c, h, w], g).unwrap()),
        Tensor::new(vec![o, c, kh, kw], grad_kernel).unwrap(),
        Tensor::new(vec![o], grad_bias).unwrap(),
    )
}

/// Non-overlapping max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of its maximum (first index wins ties).
pub fn max_pool2d_fwd(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 {
        return Err(Error::invalid("max_pool2d", "window must be positive"));
    }
    let (n, c, h, w) = input.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::invalid(
            "max_pool2d",
            format!("spatial dims {}x{} not divisible by window {}", h, w, k),
        ));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; n * c * ho * wo];
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (oy * k) * w + ox * k;
                let mut best = data[best_idx];
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + (ox * k + kx);
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oi = plane * ho * wo + oy * wo + ox;
                out[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

pub fn max_pool2d_bwd(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (i, &src) in argmax.iter().enumerate() {
        g[src] += grad_out.data()[i];
    }
    grad
}

pub fn leaky_relu_fwd(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::invalid(
            "leaky_relu",
            format!("slope must be in [0, 1), got {}", slope),
        ));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

/// The subgradient at 0 uses the positive branch.
pub fn leaky_relu_bwd(x: &Tensor, slope: f64, grad_out: &Tensor) -> Tensor {
    let mut grad = grad_out.clone();
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v < 0.0 {
            *g *= slope;
        }
    }
    grad
}

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Backward through sigmoid given the forward *output* y.
pub fn sigmoid_bwd(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad = grad_out.clone();
    for (g, &yv) in grad.data_mut().iter_mut().zip(y.data()) {
        *g *= yv * (1.0 - yv);
    }
    grad
}

/// Elementwise sigmoid cross entropy in the overflow-safe form
/// max(z,0) - t*z + ln(1 + exp(-|z|)). The target is a constant.
pub fn sigmoid_ce_fwd(target: &Tensor, logit: &Tensor) -> Result<Tensor> {
    if !target.same_shape(logit) {
        return Err(Error::shape(
            "sigmoid_cross_entropy",
            format!("target {:?} vs logit {:?}", target.shape(), logit.shape()),
        ));
    }
    if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::invalid(
            "sigmoid_cross_entropy",
            "targets must lie in [0, 1]",
        ));
    }
    let mut out = logit.clone();
    for (o, &t) in out.data_mut().iter_mut().zip(target.data()) {
        let z = *o;
        *o = z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
    }
    Ok(out)
}

/// d/dz of sigmoid cross entropy: sigma(z) - t.
pub fn sigmoid_ce_bwd(target: &Tensor, logit: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad = grad_out.clone();
    for ((g, &t), &z) in grad.data_mut().iter_mut().zip(target.data()).zip(logit.data()) {
        *g *= sigmoid(z) - t;
    }
    grad
}

pub fn zip_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

pub fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_check("add", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

pub fn sub_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_check("sub", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= bv;
    }
    Ok(out)
}

pub fn mul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_check("mul", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    Ok(out)
}

pub fn square_fwd(x: &Tensor) -> Tensor {
    x.map(|v| v * v)
}

pub fn scale_fwd(x: &Tensor, alpha: f64) -> Tensor {
    x.map(|v| alpha * v)
}

pub fn sum_fwd(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn mean_fwd(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
}

/// Concatenate two [N, C, H, W] tensors along the channel axis.
pub fn concat_channels_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity((ca + cb) * na * plane);
    for img in 0..na {
        out.extend_from_slice(&a.data()[img * ca * plane..][..ca * plane]);
        out.extend_from_slice(&b.data()[img * cb * plane..][..cb * plane]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], out)
}

/// Split a channel-concat gradient back into its two inputs.
pub fn concat_channels_bwd(grad_out: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    let (n, _, h, w) = grad_out.dims4().expect("checked in forward");
    let plane = h * w;
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    for img in 0..n {
        let base = img * (ca + cb) * plane;
        ga.extend_from_slice(&grad_out.data()[base..][..ca * plane]);
        gb.extend_from_slice(&grad_out.data()[base + ca * plane..][..cb * plane]);
    }
    (
        Tensor::new(vec![n, ca, h, w], ga).unwrap(),
        Tensor::new(vec![n, cb, h, w], gb).unwrap(),
    )
}

/// Reorder axes; `axes[d]` names the input axis that becomes output axis `d`.
pub fn permute_fwd(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = x.shape().len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(
            "permute",
            format!("axes {:?} is not a permutation of 0..{}", axes, nd),
        ));
    }
    let in_strides = row_major_strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; x.numel()];
    let mut idx = vec![0usize; nd];
    let mut in_off = 0usize;
    for o in out.iter_mut() {
        *o = x.data()[in_off];
        // odometer increment over the output multi-index
        for d in (0..nd).rev() {
            idx[d] += 1;
            in_off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

/// Take `[start, start+len)` along the final axis.
pub fn slice_last_fwd(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let nd = x.shape().len();
    if nd == 0 {
        return Err(Error::shape("slice_last", "cannot slice a scalar"));
    }
    let last = x.shape()[nd - 1];
    if start + len > last || len == 0 {
        return Err(Error::invalid(
            "slice_last",
            format!("range {}..{} out of axis of size {}", start, start + len, last),
        ));
    }
    let rows = x.numel() / last;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * last + start..][..len]);
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 1] = len;
    Tensor::new(shape, out)
}

pub fn slice_last_bwd(input_shape: &[usize], start: usize, grad_out: &Tensor) -> Tensor {
    let last = input_shape[input_shape.len() - 1];
    let len = grad_out.shape()[grad_out.shape().len() - 1];
    let rows = grad_out.numel() / len;
    let mut grad = Tensor::zeros(input_shape);
    for r in 0..rows {
        grad.data_mut()[r * last + start..][..len]
            .copy_from_slice(&grad_out.data()[r * len..][..len]);
    }
    grad
}

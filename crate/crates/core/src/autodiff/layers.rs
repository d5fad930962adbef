//! Forward and backward passes for the layer set used by the network.
//!
//! Every function works on one sample in `[channels, height, width]`
//! layout. Backward functions accumulate parameter gradients in place so
//! that a mini-batch gradient is the running sum over its samples.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp for probabilities that later go through a `log`.
pub const PROB_EPS: f64 = 1e-7;

thread_local! {
    static COL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static DCOL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_buffer<R>(
    key: &'static std::thread::LocalKey<RefCell<Vec<f64>>>,
    len: usize,
    f: impl FnOnce(&mut [f64]) -> R,
) -> R {
    key.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`;
/// `a_t`/`b_t` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted extents.
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

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::ShapeMismatch(format!("{what}: expected [C, H, W], got {s:?}"))),
    }
}

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub const SAME_3X3: Conv2d = Conv2d { stride: 1, pad: 1 };

    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || input + 2 * self.pad < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} does not fit input {input} with pad {}",
                self.pad
            )));
        }
        Ok((input + 2 * self.pad - kernel) / self.stride + 1)
    }
}

struct ConvShape {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn new(input: &Tensor, weight: &Tensor, conv: Conv2d) -> Result<Self> {
        let (c, h, w) = dims3(input, "conv2d input")?;
        let [o, wc, kh, kw] = *weight.shape() else {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernels: expected [O, C, k, k], got {:?}",
                weight.shape()
            )));
        };
        if wc != c || kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernels {:?} incompatible with input {:?}",
                weight.shape(),
                input.shape()
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            o,
            k: kh,
            ho: conv.output_size(h, kh)?,
            wo: conv.output_size(w, kw)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Valid output-column range `[lo, hi)` for kernel offset `kx`.
fn valid_cols(s: &ConvShape, conv: Conv2d, kx: usize) -> (usize, usize) {
    let pad = conv.pad as isize;
    let stride = conv.stride as isize;
    let kx = kx as isize;
    // need 0 <= ox*stride + kx - pad < w
    let lo = ((pad - kx).max(0) + stride - 1) / stride;
    let hi = ((s.w as isize + pad - kx + stride - 1) / stride).clamp(0, s.wo as isize);
    (lo as usize, (hi as usize).max(lo as usize))
}

fn im2col(input: &[f64], s: &ConvShape, conv: Conv2d, col: &mut [f64]) {
    let p = s.pixels();
    for c in 0..s.c {
        let plane = &input[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(s, conv, kx);
                for oy in 0..s.ho {
                    let out = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= s.h as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if conv.stride == 1 {
                        let start = lo + kx - conv.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in out[lo..hi].iter_mut().enumerate() {
                            *v = src[(ox + lo) * conv.stride + kx - conv.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], s: &ConvShape, conv: Conv2d, out: &mut [f64]) {
    let p = s.pixels();
    for c in 0..s.c {
        let plane = &mut out[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(s, conv, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..s.ho {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let g = &src[oy * s.wo..(oy + 1) * s.wo];
                    for ox in lo..hi {
                        dst[ox * conv.stride + kx - conv.pad] += g[ox];
                    }
                }
            }
        }
    }
}

// Few output channels: shift-and-add directly, no column buffer.
fn use_direct(s: &ConvShape, conv: Conv2d) -> bool {
    s.o <= 2 && conv.stride == 1
}

/// Calls `f(c, ky, kx, oy, iy, lo, hi)` for every valid row segment of a
/// stride-1 convolution; output columns `lo..hi` read input columns
/// `lo + kx - pad..hi + kx - pad`.
fn for_each_segment(s: &ConvShape, conv: Conv2d, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    for c in 0..s.c {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let (lo, hi) = valid_cols(s, conv, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..s.ho {
                    let iy = (oy + ky) as isize - conv.pad as isize;
                    if iy >= 0 && (iy as usize) < s.h {
                        f(c, ky, kx, oy, iy as usize, lo, hi);
                    }
                }
            }
        }
    }
}

fn direct_forward(input: &[f64], weight: &[f64], s: &ConvShape, conv: Conv2d, out: &mut [f64]) {
    let p = s.pixels();
    for o in 0..s.o {
        let dst_plane = &mut out[o * p..(o + 1) * p];
        for_each_segment(s, conv, |c, ky, kx, oy, iy, lo, hi| {
            let wv = weight[((o * s.c + c) * s.k + ky) * s.k + kx];
            let start = (c * s.h + iy) * s.w + lo + kx - conv.pad;
            let src = &input[start..start + (hi - lo)];
            let dst = &mut dst_plane[oy * s.wo + lo..oy * s.wo + hi];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += wv * x;
            }
        });
    }
}

fn direct_weight_grad(input: &[f64], go: &[f64], s: &ConvShape, conv: Conv2d, wg: &mut [f64]) {
    let p = s.pixels();
    for o in 0..s.o {
        let g_plane = &go[o * p..(o + 1) * p];
        for_each_segment(s, conv, |c, ky, kx, oy, iy, lo, hi| {
            let start = (c * s.h + iy) * s.w + lo + kx - conv.pad;
            let src = &input[start..start + (hi - lo)];
            let g = &g_plane[oy * s.wo + lo..oy * s.wo + hi];
            wg[((o * s.c + c) * s.k + ky) * s.k + kx] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        });
    }
}

fn direct_input_grad(weight: &[f64], go: &[f64], s: &ConvShape, conv: Conv2d, gi: &mut [f64]) {
    let p = s.pixels();
    for o in 0..s.o {
        let g_plane = &go[o * p..(o + 1) * p];
        for_each_segment(s, conv, |c, ky, kx, oy, iy, lo, hi| {
            let wv = weight[((o * s.c + c) * s.k + ky) * s.k + kx];
            let start = (c * s.h + iy) * s.w + lo + kx - conv.pad;
            let dst = &mut gi[start..start + (hi - lo)];
            for (d, g) in dst.iter_mut().zip(&g_plane[oy * s.wo + lo..oy * s.wo + hi]) {
                *d += wv * g;
            }
        });
    }
}

/// Cross-correlation of `input: [C, H, W]` with `weight: [O, C, k, k]`
/// plus a per-channel `bias: [O]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, conv: Conv2d) -> Result<Tensor> {
    let s = ConvShape::new(input, weight, conv)?;
    if bias.len() != s.o {
        return Err(Error::ShapeMismatch(format!("conv2d bias has {} values for {} kernels", bias.len(), s.o)));
    }
    let p = s.pixels();
    let mut out = vec![0.0; s.o * p];
    for (o, b) in bias.data().iter().enumerate() {
        out[o * p..(o + 1) * p].fill(*b);
    }
    if use_direct(&s, conv) {
        direct_forward(input.data(), weight.data(), &s, conv, &mut out);
    } else {
        with_buffer(&COL, s.rows() * p, |col| {
            im2col(input.data(), &s, conv, col);
            gemm(s.o, s.rows(), p, weight.data(), false, col, false, 1.0, &mut out);
        });
    }
    Tensor::new(vec![s.o, s.ho, s.wo], out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, conv: Conv2d) -> Result<ConvGrads> {
    let mut wg = Tensor::zeros(weight.shape());
    let mut bg = Tensor::zeros(&[weight.shape()[0]]);
    let gi = conv2d_backward_accumulate(
        input,
        weight,
        grad_out,
        conv,
        Some((wg.data_mut(), bg.data_mut())),
        true,
    )?
    .expect("input gradient requested");
    Ok(ConvGrads {
        input: gi,
        weight: wg,
        bias: bg,
    })
}

/// Adds kernel and bias gradients into `param_grads` when given, and returns
/// the input gradient when `need_input` is set.
pub fn conv2d_backward_accumulate(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    conv: Conv2d,
    param_grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let s = ConvShape::new(input, weight, conv)?;
    if grad_out.shape() != [s.o, s.ho, s.wo] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [s.o, s.ho, s.wo]
        )));
    }
    let p = s.pixels();
    let k = s.rows();
    let go = grad_out.data();
    let direct = use_direct(&s, conv);
    if let Some((wg, bg)) = param_grads {
        for (o, b) in bg.iter_mut().enumerate() {
            *b += go[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        if direct {
            direct_weight_grad(input.data(), go, &s, conv, wg);
        } else {
            with_buffer(&COL, k * p, |col| {
            im2col(input.data(), &s, conv, col);
                gemm(s.o, p, k, go, false, col, true, 1.0, wg);
            });
        }
    }
    if !need_input {
        return Ok(None);
    }
    let mut gi = vec![0.0; s.c * s.h * s.w];
    if direct {
        direct_input_grad(weight.data(), go, &s, conv, &mut gi);
    } else {
        with_buffer(&DCOL, k * p, |dcol| {
            gemm(k, s.o, p, weight.data(), true, go, false, 0.0, dcol);
            col2im(dcol, &s, conv, &mut gi);
        });
    }
    Tensor::new(vec![s.c, s.h, s.w], gi).map(Some)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output, the flat input index of the
/// (first) maximum.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = dims3(input, "maxpool2")?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::ShapeMismatch(format!("maxpool2 input {h}x{w} too small")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch("maxpool2 backward: argmax/grad length differ".into()));
    }
    let mut gi = Tensor::zeros(input_shape);
    let g = gi.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i as usize] += v;
    }
    Ok(gi)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("relu backward shapes differ".into()));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// `W x + b` for `x: [K]`, `W: [O, K]`, `b: [O]`.
pub fn fully_connected(input: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [o, k] = *weight.shape() else {
        return Err(Error::ShapeMismatch(format!("fc weight must be 2-D, got {:?}", weight.shape())));
    };
    if k != input.len() || bias.len() != o {
        return Err(Error::ShapeMismatch(format!(
            "fc weight {:?} with input {} and bias {}",
            weight.shape(),
            input.len(),
            bias.len()
        )));
    }
    let w = weight.data();
    let out = (0..o)
        .map(|r| {
            let row = &w[r * k..(r + 1) * k];
            bias.data()[r] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(vec![o], out)
}

/// Accumulates `dW += g x^T`, `db += g` when `param_grads` is given and
/// returns `W^T g` when `need_input` is set.
pub fn fully_connected_backward(
    input: &[f64],
    weight: &Tensor,
    grad_out: &[f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Result<Option<Vec<f64>>> {
    let [o, k] = *weight.shape() else {
        return Err(Error::ShapeMismatch("fc weight must be 2-D".into()));
    };
    if grad_out.len() != o || input.len() != k {
        return Err(Error::ShapeMismatch("fc backward shapes differ".into()));
    }
    if let Some((wg, bg)) = param_grads {
        for r in 0..o {
            let g = grad_out[r];
            bg[r] += g;
            if g != 0.0 {
                for (d, x) in wg[r * k..(r + 1) * k].iter_mut().zip(input) {
                    *d += g * x;
                }
            }
        }
    }
    if !need_input {
        return Ok(None);
    }
    let w = weight.data();
    let mut gi = vec![0.0; k];
    for r in 0..o {
        let g = grad_out[r];
        for (d, wv) in gi.iter_mut().zip(&w[r * k..(r + 1) * k]) {
            *d += g * wv;
        }
    }
    Ok(Some(gi))
}

fn nearest_index(out: usize, out_len: usize, in_len: usize) -> usize {
    out * in_len / out_len
}

/// Nearest-neighbor resize of `[C, H, W]` to `[C, out_h, out_w]`.
pub fn upsample_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "upsample")?;
    if out_h < h || out_w < w {
        return Err(Error::ShapeMismatch(format!("upsample {h}x{w} -> {out_h}x{out_w} shrinks")));
    }
    let x = input.data();
    let cols: Vec<usize> = (0..out_w).map(|ox| nearest_index(ox, out_w, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            let src = &x[(ch * h + nearest_index(oy, out_h, h)) * w..][..w];
            out.extend(cols.iter().map(|&ix| src[ix]));
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Exact 2x nearest-neighbor upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims3(input, "upsample2")?;
    upsample_nearest(input, 2 * h, 2 * w)
}

pub fn upsample_nearest_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::ShapeMismatch("upsample backward needs [C, H, W]".into()));
    };
    let (_, oh, ow) = dims3(grad_out, "upsample backward")?;
    let cols: Vec<usize> = (0..ow).map(|ox| nearest_index(ox, ow, w)).collect();
    let mut gi = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = gi.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            let dst = &mut d[(ch * h + nearest_index(oy, oh, h)) * w..][..w];
            let src = &g[(ch * oh + oy) * ow..][..ow];
            for (&ix, &v) in cols.iter().zip(src) {
                dst[ix] += v;
            }
        }
    }
    Ok(gi)
}

fn pool_bins(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| (i * len / bins, ((i + 1) * len).div_ceil(bins)))
        .collect()
}

/// Average pooling of `[C, H, W]` onto a fixed `[C, gh, gw]` grid; bin `i`
/// covers `[floor(i H / gh), ceil((i + 1) H / gh))`.
pub fn adaptive_avg_pool(input: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "adaptive_avg_pool")?;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::ShapeMismatch(format!("cannot pool {h}x{w} onto {gh}x{gw}")));
    }
    let x = input.data();
    let (rows, cols) = (pool_bins(h, gh), pool_bins(w, gw));
    let mut out = Vec::with_capacity(c * gh * gw);
    for ch in 0..c {
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut sum = 0.0;
                for y in y0..y1 {
                    sum += x[(ch * h + y) * w + x0..(ch * h + y) * w + x1].iter().sum::<f64>();
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

pub fn adaptive_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::ShapeMismatch("pool backward needs [C, H, W]".into()));
    };
    let (gc, gh, gw) = dims3(grad_out, "pool backward")?;
    if gc != c {
        return Err(Error::ShapeMismatch("pool backward channel count differs".into()));
    }
    let (rows, cols) = (pool_bins(h, gh), pool_bins(w, gw));
    let mut gi = Tensor::zeros(input_shape);
    let d = gi.data_mut();
    let g = grad_out.data();
    for ch in 0..c {
        for (by, &(y0, y1)) in rows.iter().enumerate() {
            for (bx, &(x0, x1)) in cols.iter().enumerate() {
                let v = g[(ch * gh + by) * gw + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        d[(ch * h + y) * w + x] += v;
                    }
                }
            }
        }
    }
    Ok(gi)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Logistic function clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Derivative of the clamped sigmoid, given its output.
pub fn sigmoid_derivative(y: f64) -> f64 {
    if y <= PROB_EPS || y >= 1.0 - PROB_EPS {
        0.0
    } else {
        y * (1.0 - y)
    }
}

//! Layer kernels. Each forward has a matching `*_backward` that maps the
//! upstream gradient onto the inputs of the forward call.

use super::{NnError, Shape, Tensor};

/// Output spatial extent of a convolution, or `None` when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: Shape, weight: Shape, bias_len: usize, stride: usize, padding: usize) -> Result<Self, NnError> {
        let [n, c, h, w] = input.0;
        let [f, wc, kh, kw] = weight.0;
        if wc != c || bias_len != f {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: weight,
            });
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let oh = conv_output_extent(h, kh, stride, padding);
        let ow = conv_output_extent(w, kw, stride, padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeometry {
                n,
                c,
                h,
                w,
                f,
                kh,
                kw,
                oh,
                ow,
                stride,
                padding,
            }),
            _ => Err(NnError::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: weight,
            }),
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one batch item into a `[C*kh*kw, OH*OW]` column matrix.
    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * self.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                image[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto one batch item.
    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            image[(ci * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`, each
/// optionally read transposed from row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents passed in.
    unsafe {
        matrixmultiply::sgemm(
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

/// Cross-correlation of `input[N,C,H,W]` with `weight[F,C,kh,kw]` plus a per-filter bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &[f32], stride: usize, padding: usize) -> Result<Tensor, NnError> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.len(), stride, padding)?;
    let (kdim, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0f32; g.n * g.f * p];
    let mut cols = vec![0.0f32; kdim * p];
    let in_per = g.c * g.h * g.w;
    for i in 0..g.n {
        g.im2col(&input.data()[i * in_per..(i + 1) * in_per], &mut cols);
        let dst = &mut out[i * g.f * p..(i + 1) * g.f * p];
        for (fi, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[fi]);
        }
        gemm(g.f, kdim, p, weight.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::new(Shape::new(g.n, g.f, g.oh, g.ow), out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>), NnError> {
    let f = weight.shape().n();
    let g = ConvGeometry::new(input.shape(), weight.shape(), f, stride, padding)?;
    let expected = Shape::new(g.n, g.f, g.oh, g.ow);
    if grad_out.shape() != expected {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_backward",
            left: expected,
            right: grad_out.shape(),
        });
    }
    let (kdim, p) = (g.patch_len(), g.positions());
    let in_per = g.c * g.h * g.w;
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = vec![0.0f32; g.f * kdim];
    let mut db = vec![0.0f32; g.f];
    let mut cols = vec![0.0f32; kdim * p];
    let mut dcols = vec![0.0f32; kdim * p];
    for i in 0..g.n {
        let go = &grad_out.data()[i * g.f * p..(i + 1) * g.f * p];
        for (fi, row) in go.chunks(p).enumerate() {
            db[fi] += row.iter().sum::<f32>();
        }
        g.im2col(&input.data()[i * in_per..(i + 1) * in_per], &mut cols);
        gemm(g.f, p, kdim, go, false, &cols, true, 1.0, &mut dw);
        gemm(kdim, g.f, p, weight.data(), true, go, false, 0.0, &mut dcols);
        g.col2im(&dcols, &mut dx.data_mut()[i * in_per..(i + 1) * in_per]);
    }
    Ok((dx, Tensor::new(weight.shape(), dw)?, db))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat input offset that won the window (first maximum on ties).
pub fn maxpool2d_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    let [n, c, h, w] = input.shape().0;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(NnError::OddPool(input.shape()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let o = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[o] > data[best] {
                        best = o;
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(Shape::new(n, c, oh, ow), out)?, idx))
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor, NnError> {
    maxpool2d_with_indices(input).map(|(t, _)| t)
}

pub fn maxpool2d_backward(input_shape: Shape, indices: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Per-channel spatial mean, `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, NnError> {
    let [n, c, h, w] = input.shape().0;
    let hw = h * w;
    if hw == 0 {
        return Err(NnError::Empty("global_avg_pool"));
    }
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .map(|m| m as f32)
        .collect();
    Tensor::new(Shape::new(n, c, 1, 1), data)
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    let hw = input_shape.h() * input_shape.w();
    let scale = 1.0 / hw as f32;
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    dx
}

fn check_linear(input: Shape, weight: Shape, bias_len: usize) -> Result<(usize, usize, usize), NnError> {
    let [n, d, h, w] = input.0;
    let [dout, wd, wh, ww] = weight.0;
    if h != 1 || w != 1 || wh != 1 || ww != 1 || wd != d || bias_len != dout {
        return Err(NnError::ShapeMismatch {
            op: "linear",
            left: input,
            right: weight,
        });
    }
    Ok((n, d, dout))
}

/// Affine map `y = W x + b` per batch row; `weight` is stored as `[D_out, D, 1, 1]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor, NnError> {
    let (n, d, dout) = check_linear(input.shape(), weight.shape(), bias.len())?;
    let mut out = Vec::with_capacity(n * dout);
    for row in input.data().chunks(d) {
        for (wrow, &b) in weight.data().chunks(d).zip(bias) {
            let dot: f32 = wrow.iter().zip(row).map(|(a, x)| a * x).sum();
            out.push(dot + b);
        }
    }
    Tensor::new(Shape::new(n, dout, 1, 1), out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>), NnError> {
    let (n, d, dout) = check_linear(input.shape(), weight.shape(), weight.shape().n())?;
    if grad_out.shape() != Shape::new(n, dout, 1, 1) {
        return Err(NnError::ShapeMismatch {
            op: "linear_backward",
            left: Shape::new(n, dout, 1, 1),
            right: grad_out.shape(),
        });
    }
    let mut dx = vec![0.0f32; n * d];
    let mut dw = vec![0.0f32; dout * d];
    let mut db = vec![0.0f32; dout];
    for i in 0..n {
        let x = &input.data()[i * d..(i + 1) * d];
        let g = &grad_out.data()[i * dout..(i + 1) * dout];
        let dxi = &mut dx[i * d..(i + 1) * d];
        for (o, &go) in g.iter().enumerate() {
            db[o] += go;
            let wrow = &weight.data()[o * d..(o + 1) * d];
            let dwrow = &mut dw[o * d..(o + 1) * d];
            for j in 0..d {
                dwrow[j] += go * x[j];
                dxi[j] += go * wrow[j];
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        db,
    ))
}

/// Concatenates tensors along the channel axis; all other extents must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, NnError> {
    let first = parts.first().ok_or(NnError::Empty("concat_channels"))?;
    let [n, _, h, w] = first.shape().0;
    for p in parts {
        let s = p.shape();
        if s.n() != n || s.h() != h || s.w() != w {
            return Err(NnError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape(),
                right: s,
            });
        }
    }
    let c_total: usize = parts.iter().map(|p| p.shape().c()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for i in 0..n {
        for p in parts {
            let per = p.shape().c() * h * w;
            data.extend_from_slice(&p.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor::new(Shape::new(n, c_total, h, w), data)
}

pub fn concat_channels_backward(shapes: &[Shape], grad_out: &Tensor) -> Vec<Tensor> {
    let [n, _, h, w] = grad_out.shape().0;
    let mut outs: Vec<Vec<f32>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    let mut cursor = 0;
    for _ in 0..n {
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let per = s.c() * h * w;
            out.extend_from_slice(&grad_out.data()[cursor..cursor + per]);
            cursor += per;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::new(*s, d).expect("split matches concat"))
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// `-ln p[target]`.
pub fn cross_entropy(probabilities: &[f32], target: usize) -> Result<f32, NnError> {
    let p = probabilities.get(target).ok_or(NnError::ClassIndex {
        index: target,
        classes: probabilities.len(),
    })?;
    Ok(-(*p as f64).max(f64::MIN_POSITIVE).ln() as f32)
}

/// Mean softmax cross-entropy over a `[N,K,1,1]` logit batch.
///
/// Returns the loss, the per-row probabilities and the gradient with respect
/// to the logits, `(p - onehot(target)) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor, Tensor), NnError> {
    let [n, k, h, w] = logits.shape().0;
    if h != 1 || w != 1 || n != targets.len() || n == 0 {
        return Err(NnError::InvalidArgument(format!(
            "softmax_cross_entropy expects [N,K,1,1] logits with N targets; got {} and {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let mut loss = 0.0f64;
    let mut probs = Vec::with_capacity(n * k);
    let mut grad = Vec::with_capacity(n * k);
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        if t >= k {
            return Err(NnError::ClassIndex { index: t, classes: k });
        }
        // log-sum-exp form keeps the loss exact for confident predictions
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[t] as f64;
        let p = softmax(row);
        for (j, &pj) in p.iter().enumerate() {
            let onehot = if j == t { 1.0 } else { 0.0 };
            grad.push((pj - onehot) / n as f32);
        }
        probs.extend(p);
    }
    let shape = logits.shape();
    Ok(((loss / n as f64) as f32, Tensor::new(shape, probs)?, Tensor::new(shape, grad)?))
}

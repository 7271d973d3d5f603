//! Dense row-major tensors and the spatial primitives used by the layers.
//!
//! Convolutions are cross-correlations: `conv2d_valid` slides each kernel over
//! the input without padding, `conv2d_full` zero-pads by `h - 1` on every side
//! so that it maps a valid-correlation output back onto the input extents.
//! Decoders pair `conv2d_full` with [`flip2`]ed kernels, which makes the
//! decoder the exact adjoint of the encoder.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "data length",
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// A rank-1 tensor holding `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "element count",
                expected: self.data.len(),
                found: n,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        self.expect_same_shape("add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("shape {:?} does not match {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dimension {
                op,
                axis: "rank",
                expected: 3,
                found: self.rank(),
            }),
        }
    }

    fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [m, c, h, w] => Ok((m, c, h, w)),
            _ => Err(Error::Dimension {
                op,
                axis: "kernel rank",
                expected: 4,
                found: self.rank(),
            }),
        }
    }
}

/// Argmax memory of a max-pooling pass, consumed by unpooling and by the
/// pooling backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndexMap {
    /// Extents of the pooled output, `[C, H / p1, W / p2]`.
    pub shape: Vec<usize>,
    pub window: (usize, usize),
    /// Per pooled cell, in row-major order, the `(row, col)` of the winning
    /// input element within its channel.
    pub indices: Vec<(usize, usize)>,
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, maps: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != maps {
            return Err(Error::Dimension {
                op,
                axis: "bias length",
                expected: maps,
                found: b.len(),
            });
        }
    }
    Ok(())
}

fn conv_operands(
    op: &'static str,
    input: &Tensor,
    kernels: &Tensor,
) -> Result<((usize, usize, usize), (usize, usize, usize, usize))> {
    let (c, h, w) = input.dims3(op)?;
    let (m, kc, kh, kw) = kernels.dims4(op)?;
    if kc != c {
        return Err(Error::Dimension {
            op,
            axis: "channels",
            expected: c,
            found: kc,
        });
    }
    Ok(((c, h, w), (m, kc, kh, kw)))
}

/// Valid-mode cross-correlation with stride 1:
/// `out[i] = sum_j kernels[i, j] * input[j] + bias[i]`.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "conv2d_valid";
    let ((c, h, w), (m, _, kh, kw)) = conv_operands(OP, input, kernels)?;
    if kh > h {
        return Err(Error::Dimension {
            op: OP,
            axis: "height",
            expected: h,
            found: kh,
        });
    }
    if kw > w {
        return Err(Error::Dimension {
            op: OP,
            axis: "width",
            expected: w,
            found: kw,
        });
    }
    check_bias(OP, bias, m)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; m * oh * ow];
    let x = input.data();
    let k = kernels.data();
    for i in 0..m {
        let plane = &mut out[i * oh * ow..(i + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b.data()[i]);
        }
        for j in 0..c {
            let xin = &x[j * h * w..(j + 1) * h * w];
            let kern = &k[(i * c + j) * kh * kw..(i * c + j + 1) * kh * kw];
            for a in 0..kh {
                for b in 0..kw {
                    let kv = kern[a * kw + b];
                    for y in 0..oh {
                        let src = &xin[(y + a) * w + b..(y + a) * w + b + ow];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![m, oh, ow], out)
}

/// Gradients of [`conv2d_valid`] with respect to its input, kernels and bias.
pub fn conv2d_valid_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    const OP: &str = "conv2d_valid_backward";
    let ((c, h, w), (m, _, kh, kw)) = conv_operands(OP, input, kernels)?;
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    if grad_out.shape() != [m, oh, ow] {
        return Err(Error::shape(
            OP,
            format!(
                "gradient shape {:?}, expected {:?}",
                grad_out.shape(),
                [m, oh, ow]
            ),
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    let mut gk = vec![0.0; m * c * kh * kw];
    let mut gb = vec![0.0; m];
    for i in 0..m {
        let gplane = &g[i * oh * ow..(i + 1) * oh * ow];
        gb[i] = gplane.iter().sum();
        for j in 0..c {
            let xin = &x[j * h * w..(j + 1) * h * w];
            let gxin = &mut gx[j * h * w..(j + 1) * h * w];
            let base = (i * c + j) * kh * kw;
            for a in 0..kh {
                for b in 0..kw {
                    let kv = k[base + a * kw + b];
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let off = (y + a) * w + b;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        let xrow = &xin[off..off + ow];
                        let gxrow = &mut gxin[off..off + ow];
                        for t in 0..ow {
                            acc += grow[t] * xrow[t];
                            gxrow[t] += kv * grow[t];
                        }
                    }
                    gk[base + a * kw + b] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], gx)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(vec![m], gb)?,
    ))
}

/// Full-mode cross-correlation: the input is zero-padded by `kh - 1` rows and
/// `kw - 1` columns on each side, so `[C, H, W]` maps to
/// `[M, H + kh - 1, W + kw - 1]`.
pub fn conv2d_full(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "conv2d_full";
    let ((c, h, w), (m, _, kh, kw)) = conv_operands(OP, input, kernels)?;
    check_bias(OP, bias, m)?;
    let (oh, ow) = (h + kh - 1, w + kw - 1);
    let mut out = vec![0.0; m * oh * ow];
    let x = input.data();
    let k = kernels.data();
    for i in 0..m {
        let plane = &mut out[i * oh * ow..(i + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b.data()[i]);
        }
        for j in 0..c {
            let xin = &x[j * h * w..(j + 1) * h * w];
            let kern = &k[(i * c + j) * kh * kw..(i * c + j + 1) * kh * kw];
            // Input (r, s) lands on output (r + kh-1-a, s + kw-1-b).
            for a in 0..kh {
                for b in 0..kw {
                    let kv = kern[a * kw + b];
                    for r in 0..h {
                        let off = (r + kh - 1 - a) * ow + (kw - 1 - b);
                        let dst = &mut plane[off..off + w];
                        let src = &xin[r * w..(r + 1) * w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![m, oh, ow], out)
}

/// Gradients of [`conv2d_full`] with respect to its input, kernels and bias.
pub fn conv2d_full_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    const OP: &str = "conv2d_full_backward";
    let ((c, h, w), (m, _, kh, kw)) = conv_operands(OP, input, kernels)?;
    let (oh, ow) = (h + kh - 1, w + kw - 1);
    if grad_out.shape() != [m, oh, ow] {
        return Err(Error::shape(
            OP,
            format!(
                "gradient shape {:?}, expected {:?}",
                grad_out.shape(),
                [m, oh, ow]
            ),
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    let mut gk = vec![0.0; m * c * kh * kw];
    let mut gb = vec![0.0; m];
    for i in 0..m {
        let gplane = &g[i * oh * ow..(i + 1) * oh * ow];
        gb[i] = gplane.iter().sum();
        for j in 0..c {
            let xin = &x[j * h * w..(j + 1) * h * w];
            let gxin = &mut gx[j * h * w..(j + 1) * h * w];
            let base = (i * c + j) * kh * kw;
            for a in 0..kh {
                for b in 0..kw {
                    let kv = k[base + a * kw + b];
                    let mut acc = 0.0;
                    for r in 0..h {
                        let off = (r + kh - 1 - a) * ow + (kw - 1 - b);
                        let grow = &gplane[off..off + w];
                        let xrow = &xin[r * w..(r + 1) * w];
                        let gxrow = &mut gxin[r * w..(r + 1) * w];
                        for t in 0..w {
                            acc += grow[t] * xrow[t];
                            gxrow[t] += kv * grow[t];
                        }
                    }
                    gk[base + a * kw + b] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], gx)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(vec![m], gb)?,
    ))
}

/// Non-overlapping max-pooling. Ties go to the first element of the window in
/// row-major order.
pub fn maxpool2d(input: &Tensor, pool: (usize, usize)) -> Result<(Tensor, PoolIndexMap)> {
    const OP: &str = "maxpool2d";
    let (c, h, w) = input.dims3(OP)?;
    let (p1, p2) = pool;
    if p1 == 0 || p2 == 0 {
        return Err(Error::shape(OP, "pool extents must be positive"));
    }
    if h % p1 != 0 {
        return Err(Error::shape(
            OP,
            format!("height {h} is not divisible by pool height {p1}"),
        ));
    }
    if w % p2 != 0 {
        return Err(Error::shape(
            OP,
            format!("width {w} is not divisible by pool width {p2}"),
        ));
    }
    let (oh, ow) = (h / p1, w / p2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut br, mut bc) = (oy * p1, ox * p2);
                let mut best = plane[br * w + bc];
                for r in oy * p1..(oy + 1) * p1 {
                    for s in ox * p2..(ox + 1) * p2 {
                        let v = plane[r * w + s];
                        if v > best {
                            best = v;
                            br = r;
                            bc = s;
                        }
                    }
                }
                out.push(best);
                indices.push((br, bc));
            }
        }
    }
    let shape = vec![c, oh, ow];
    Ok((
        Tensor::new(shape.clone(), out)?,
        PoolIndexMap {
            shape,
            window: pool,
            indices,
        },
    ))
}

/// Writes every pooled value back to its remembered argmax position; all other
/// positions of the `out_shape` tensor are zero.
pub fn unpool2d(input: &Tensor, map: &PoolIndexMap, out_shape: &[usize]) -> Result<Tensor> {
    const OP: &str = "unpool2d";
    if input.shape() != map.shape.as_slice() {
        return Err(Error::shape(
            OP,
            format!(
                "input shape {:?} does not match index map {:?}",
                input.shape(),
                map.shape
            ),
        ));
    }
    let (c, h, w) = match *out_shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Dimension {
                op: OP,
                axis: "output rank",
                expected: 3,
                found: out_shape.len(),
            })
        }
    };
    if c != map.shape[0] {
        return Err(Error::Dimension {
            op: OP,
            axis: "channels",
            expected: map.shape[0],
            found: c,
        });
    }
    let per_channel = map.shape[1] * map.shape[2];
    let mut out = vec![0.0; c * h * w];
    for (cell, (&v, &(r, s))) in input.data().iter().zip(&map.indices).enumerate() {
        if r >= h || s >= w {
            return Err(Error::Corruption(format!(
                "index ({r}, {s}) lies outside the {h}x{w} output"
            )));
        }
        let ch = cell / per_channel;
        out[ch * h * w + r * w + s] = v;
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Reads the remembered argmax positions out of a pre-pooling-shaped tensor.
/// This is the adjoint of [`unpool2d`].
pub fn pool_gather(input: &Tensor, map: &PoolIndexMap) -> Result<Tensor> {
    const OP: &str = "pool_gather";
    let (c, h, w) = input.dims3(OP)?;
    if c != map.shape[0] {
        return Err(Error::Dimension {
            op: OP,
            axis: "channels",
            expected: map.shape[0],
            found: c,
        });
    }
    let per_channel = map.shape[1] * map.shape[2];
    let x = input.data();
    let mut out = Vec::with_capacity(map.indices.len());
    for (cell, &(r, s)) in map.indices.iter().enumerate() {
        if r >= h || s >= w {
            return Err(Error::Corruption(format!(
                "index ({r}, {s}) lies outside the {h}x{w} input"
            )));
        }
        out.push(x[(cell / per_channel) * h * w + r * w + s]);
    }
    Tensor::new(map.shape.clone(), out)
}

/// Reverses the last two axes.
pub fn flip2(kernel: &Tensor) -> Result<Tensor> {
    let rank = kernel.rank();
    if rank < 2 {
        return Err(Error::Dimension {
            op: "flip2",
            axis: "rank",
            expected: 2,
            found: rank,
        });
    }
    let (h, w) = (kernel.shape[rank - 2], kernel.shape[rank - 1]);
    let plane = h * w;
    let mut out = kernel.data.clone();
    for (dst, src) in out.chunks_mut(plane).zip(kernel.data.chunks(plane)) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = src[plane - 1 - i];
        }
    }
    Tensor::new(kernel.shape.clone(), out)
}

/// Swaps the two leading axes of a rank-4 kernel tensor.
pub fn swap_kernel_io(kernel: &Tensor) -> Result<Tensor> {
    let (m, c, kh, kw) = kernel.dims4("swap_kernel_io")?;
    let plane = kh * kw;
    let src = kernel.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..m {
        for j in 0..c {
            out[(j * m + i) * plane..(j * m + i + 1) * plane]
                .copy_from_slice(&src[(i * c + j) * plane..(i * c + j + 1) * plane]);
        }
    }
    Tensor::new(vec![c, m, kh, kw], out)
}

//! Rank-4 tensors and the convolution/filtering primitives built on them.
//!
//! Everything here is 64-bit and deterministic. The data-parallel paths
//! (enabled by the `parallel` feature) split work over disjoint output
//! slices only, so results are bitwise identical to the sequential ones.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rank-4 array in (batch, channels, height, width) order, row-major with
/// batch outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(Error::dimension("data length", expected, data.len()));
        }
        Ok(Tensor {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, c, y, x);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a += b.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same_shape(self, other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape(self, other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            data,
            ..self.clone_shape()
        })
    }

    fn clone_shape(&self) -> Tensor {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
        }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.batch != b.batch {
        return Err(Error::dimension_ctx("batch", a.batch, b.batch, context));
    }
    if a.channels != b.channels {
        return Err(Error::dimension_ctx(
            "channels", a.channels, b.channels, context,
        ));
    }
    if a.height != b.height {
        return Err(Error::dimension_ctx("height", a.height, b.height, context));
    }
    if a.width != b.width {
        return Err(Error::dimension_ctx("width", a.width, b.width, context));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed in terms of the pre-activation z.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Linear => 1.0,
        }
    }
}

/// 3x3 convolution layer, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// (out_ch, in_ch, 3, 3)
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.height != 3 || weights.width != 3 {
            return Err(Error::Parameter {
                name: "kernel",
                message: format!(
                    "kernel must be 3x3, got {}x{}",
                    weights.height, weights.width
                ),
            });
        }
        if bias.len() != weights.batch {
            return Err(Error::dimension("bias length", weights.batch, bias.len()));
        }
        Ok(ConvLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.batch
    }

    pub fn in_channels(&self) -> usize {
        self.weights.channels
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Forward pass output together with the cached pre-activation values
/// needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ConvForward {
    pub output: Tensor,
    pub pre_activation: Tensor,
}

/// Accumulates one 3x3 tap into an output row: out[x] += wv * in[x+kx-1]
/// for every x where the input column is in bounds.
#[inline]
fn tap_row(out_row: &mut [f64], in_row: &[f64], wv: f64, kx: usize) {
    let w = out_row.len();
    // kx = 0 reads column x-1, kx = 1 reads x, kx = 2 reads x+1.
    match kx {
        0 => {
            for (o, i) in out_row[1..].iter_mut().zip(&in_row[..w - 1]) {
                *o += wv * i;
            }
        }
        1 => {
            for (o, i) in out_row.iter_mut().zip(in_row) {
                *o += wv * i;
            }
        }
        _ => {
            for (o, i) in out_row[..w - 1].iter_mut().zip(&in_row[1..]) {
                *o += wv * i;
            }
        }
    }
}

fn conv_fill_slab(
    input: &Tensor,
    layer: &ConvLayer,
    b: usize,
    oc: usize,
    pre_slab: &mut [f64],
    out_slab: &mut [f64],
) {
    let (h, w) = (input.height, input.width);
    let in_ch = layer.in_channels();
    let bias = layer.bias[oc];
    let act = layer.activation;
    pre_slab.fill(bias);
    // Accumulation order per output pixel is ic, then ky, then kx.
    for ic in 0..in_ch {
        let wbase = (oc * in_ch + ic) * 9;
        let in_base = (b * in_ch + ic) * h * w;
        for ky in 0..3usize {
            for kx in 0..3usize {
                let wv = layer.weights.data[wbase + ky * 3 + kx];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &input.data[in_base + iy as usize * w..][..w];
                    tap_row(&mut pre_slab[y * w..y * w + w], in_row, wv, kx);
                }
            }
        }
    }
    for (o, &p) in out_slab.iter_mut().zip(pre_slab.iter()) {
        *o = act.apply(p);
    }
}

fn conv_check(input: &Tensor, layer: &ConvLayer) -> Result<()> {
    if input.channels != layer.in_channels() {
        return Err(Error::dimension_ctx(
            "channels",
            layer.in_channels(),
            input.channels,
            "conv2d input",
        ));
    }
    if input.height == 0 || input.width == 0 {
        return Err(Error::dimension("height/width", 1, 0));
    }
    Ok(())
}

/// 3x3 same-padding convolution, caching pre-activations for backward.
pub fn conv2d_forward_cached(input: &Tensor, layer: &ConvLayer) -> Result<ConvForward> {
    conv_check(input, layer)?;
    let (b, h, w) = (input.batch, input.height, input.width);
    let oc = layer.out_channels();
    let plane = h * w;
    let mut pre = Tensor::zeros(b, oc, h, w);
    let mut out = Tensor::zeros(b, oc, h, w);

    #[cfg(feature = "parallel")]
    {
        pre.data
            .par_chunks_mut(plane)
            .zip(out.data.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(slab, (pre_slab, out_slab))| {
                let bi = slab / oc;
                let oci = slab % oc;
                conv_fill_slab(input, layer, bi, oci, pre_slab, out_slab);
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for slab in 0..b * oc {
            let bi = slab / oc;
            let oci = slab % oc;
            let pre_slab = &mut pre.data[slab * plane..(slab + 1) * plane];
            let out_slab = &mut out.data[slab * plane..(slab + 1) * plane];
            conv_fill_slab(input, layer, bi, oci, pre_slab, out_slab);
        }
    }

    Ok(ConvForward {
        output: out,
        pre_activation: pre,
    })
}

pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    Ok(conv2d_forward_cached(input, layer)?.output)
}

/// Always-sequential forward, kept callable regardless of features so the
/// benchmark suite can compare it against the parallel path.
pub fn conv2d_forward_seq(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    conv_check(input, layer)?;
    let (b, h, w) = (input.batch, input.height, input.width);
    let oc = layer.out_channels();
    let plane = h * w;
    let mut pre = vec![0.0; plane];
    let mut out = Tensor::zeros(b, oc, h, w);
    for slab in 0..b * oc {
        let bi = slab / oc;
        let oci = slab % oc;
        let out_slab = &mut out.data[slab * plane..(slab + 1) * plane];
        conv_fill_slab(input, layer, bi, oci, &mut pre, out_slab);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_input: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Vec<f64>,
}

/// Exact analytic backward pass of `conv2d_forward`.
///
/// `pre_activation` must be the cache produced by the matching forward call.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    pre_activation: &Tensor,
    grad_output: &Tensor,
) -> Result<ConvGrads> {
    conv_check(input, layer)?;
    if !grad_output.same_shape(pre_activation) {
        return Err(Error::dimension_ctx(
            "grad_output",
            pre_activation.len(),
            grad_output.len(),
            "conv2d_backward",
        ));
    }
    if grad_output.channels != layer.out_channels() || grad_output.batch != input.batch {
        return Err(Error::dimension_ctx(
            "channels",
            layer.out_channels(),
            grad_output.channels,
            "conv2d_backward grad_output",
        ));
    }

    let (b, h, w) = (input.batch, input.height, input.width);
    let (oc, ic) = (layer.out_channels(), layer.in_channels());
    let plane = h * w;
    let act = layer.activation;

    // dL/dz, chained through the activation.
    let mut gz = Tensor::zeros(b, oc, h, w);
    for i in 0..gz.data.len() {
        gz.data[i] = grad_output.data[i] * act.derivative(pre_activation.data[i]);
    }

    let mut grad_weights = Tensor::zeros(oc, ic, 3, 3);
    let mut grad_bias = vec![0.0; oc];

    // Dot product with four independent accumulators so the reduction is
    // not one serial dependency chain.
    fn dot4(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let n4 = a.len() / 4 * 4;
        for (ca, cb) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
            for j in 0..4 {
                acc[j] += ca[j] * cb[j];
            }
        }
        let mut tail = 0.0;
        for (x, y) in a[n4..].iter().zip(&b[n4..]) {
            tail += x * y;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    // Row dot product restricted to the columns where both taps exist.
    let row_dot = |gz_row: &[f64], in_row: &[f64], kx: usize| -> f64 {
        match kx {
            0 => dot4(&gz_row[1..], &in_row[..w - 1]),
            1 => dot4(gz_row, in_row),
            _ => dot4(&gz_row[..w - 1], &in_row[1..]),
        }
    };

    let weight_slab = |oci: usize, gw_slab: &mut [f64], gb: &mut f64| {
        for bi in 0..b {
            let gz_base = (bi * oc + oci) * plane;
            let gz_slab = &gz.data[gz_base..gz_base + plane];
            *gb += gz_slab.iter().sum::<f64>();
            for ici in 0..ic {
                let in_base = (bi * ic + ici) * plane;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gz_row = &gz_slab[y * w..y * w + w];
                            let in_row = &input.data[in_base + iy as usize * w..][..w];
                            acc += row_dot(gz_row, in_row, kx);
                        }
                        gw_slab[(ici * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        grad_weights
            .data
            .par_chunks_mut(ic * 9)
            .zip(grad_bias.par_iter_mut())
            .enumerate()
            .for_each(|(oci, (gw_slab, gb))| weight_slab(oci, gw_slab, gb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (oci, (gw_slab, gb)) in grad_weights
            .data
            .chunks_mut(ic * 9)
            .zip(grad_bias.iter_mut())
            .enumerate()
        {
            weight_slab(oci, gw_slab, gb);
        }
    }

    let mut grad_input = Tensor::zeros(b, ic, h, w);
    let input_slab = |slab: usize, gi_slab: &mut [f64]| {
        let bi = slab / ic;
        let ici = slab % ic;
        // Full correlation with the flipped kernel: reading the output
        // position that consumed input (y, x) via tap (ky, kx) is a row
        // sweep with the mirrored column tap 2-kx.
        for oci in 0..oc {
            let gz_base = (bi * oc + oci) * plane;
            let wbase = (oci * ic + ici) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = layer.weights.data[wbase + ky * 3 + kx];
                    for y in 0..h {
                        let oy = y as isize - (ky as isize - 1);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        let gz_row = &gz.data[gz_base + oy as usize * w..][..w];
                        tap_row(&mut gi_slab[y * w..y * w + w], gz_row, wv, 2 - kx);
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        grad_input
            .data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(slab, gi_slab)| input_slab(slab, gi_slab));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (slab, gi_slab) in grad_input.data.chunks_mut(plane).enumerate() {
            input_slab(slab, gi_slab);
        }
    }

    Ok(ConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

/// Channel concatenation, a's channels first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.batch != b.batch {
        return Err(Error::dimension_ctx("batch", a.batch, b.batch, "concat"));
    }
    if a.height != b.height {
        return Err(Error::dimension_ctx("height", a.height, b.height, "concat"));
    }
    if a.width != b.width {
        return Err(Error::dimension_ctx("width", a.width, b.width, "concat"));
    }
    let plane = a.height * a.width;
    let mut out = Tensor::zeros(a.batch, a.channels + b.channels, a.height, a.width);
    for bi in 0..a.batch {
        let dst = (bi * out.channels) * plane;
        out.data[dst..dst + a.channels * plane]
            .copy_from_slice(&a.data[bi * a.channels * plane..(bi + 1) * a.channels * plane]);
        let dst2 = dst + a.channels * plane;
        out.data[dst2..dst2 + b.channels * plane]
            .copy_from_slice(&b.data[bi * b.channels * plane..(bi + 1) * b.channels * plane]);
    }
    Ok(out)
}

/// Extracts channels [start, start+count) into a new tensor.
pub fn slice_channels(t: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    if start + count > t.channels {
        return Err(Error::dimension_ctx(
            "channels",
            t.channels,
            start + count,
            "slice_channels",
        ));
    }
    let plane = t.height * t.width;
    let mut out = Tensor::zeros(t.batch, count, t.height, t.width);
    for bi in 0..t.batch {
        let src = (bi * t.channels + start) * plane;
        let dst = bi * count * plane;
        out.data[dst..dst + count * plane].copy_from_slice(&t.data[src..src + count * plane]);
    }
    Ok(out)
}

/// Per-channel Gaussian smoothing with kernel entries proportional to
/// exp(-(dx^2+dy^2)/(2*variance)), renormalized at borders so the covered
/// weights always sum to 1.
pub fn gaussian_filter2d(map: &Tensor, variance: f64, window: usize) -> Result<Tensor> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Parameter {
            name: "window",
            message: format!("window must be odd and positive, got {window}"),
        });
    }
    if variance <= 0.0 {
        return Err(Error::Parameter {
            name: "variance",
            message: format!("variance must be positive, got {variance}"),
        });
    }
    let r = (window / 2) as isize;
    let mut kernel = Vec::with_capacity(window * window);
    for dy in -r..=r {
        for dx in -r..=r {
            kernel.push((-((dy * dy + dx * dx) as f64) / (2.0 * variance)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let (h, w) = (map.height, map.width);
    let plane = h * w;
    let mut out = Tensor::zeros(map.batch, map.channels, h, w);
    let row_task = |slab: usize, out_slab: &mut [f64]| {
        let in_slab = &map.data[slab * plane..(slab + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for dy in -r..=r {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let ix = x as isize + dx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let k = kernel[((dy + r) * (2 * r + 1) + dx + r) as usize];
                        acc += k * in_slab[iy as usize * w + ix as usize];
                        weight += k;
                    }
                }
                out_slab[y * w + x] = acc / weight;
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        out.data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(slab, out_slab)| row_task(slab, out_slab));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (slab, out_slab) in out.data.chunks_mut(plane).enumerate() {
            row_task(slab, out_slab);
        }
    }
    Ok(out)
}

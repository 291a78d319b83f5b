//! Layers with explicit forward/backward passes over NCHW `f32` tensors.
//!
//! Each layer caches what its backward pass needs during `forward`, so a
//! backward call must follow the matching forward call. Parameter gradients
//! accumulate until cleared by the optimizer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }
}

/// A named slot visited for optimisation or serialisation.
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut ArrayD<f32>),
}

pub trait Layer: Send {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32>;
    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32>;
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, Slot<'_>)) {}
    fn visit_batchnorm(&mut self, _f: &mut dyn FnMut(&mut BatchNorm2d)) {}
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    /// When false, backward skips the input gradient (first layer).
    pub input_grad: bool,
    input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // He initialisation on fan-out, as for ReLU networks.
        let std = (2.0 / (out_ch * kernel * kernel) as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), |_| normal.sample(rng));
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[out_ch])))),
            input_grad: true,
            input: None,
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.padding - self.kernel) / self.stride + 1, (w + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight2(&self) -> ArrayView2<'_, f32> {
        let k = self.in_ch * self.kernel * self.kernel;
        self.weight.value.view().into_shape_with_order((self.out_ch, k)).expect("contiguous weight")
    }

    /// Unfold one sample (`C*H*W`) into columns (`C*k*k` x `OH*OW`).
    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * oh * ow;
                    let dst = &mut cols[row..row + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * oh * ow;
                    let src = &cols[row..row + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Array4<f32>, _train: bool) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let kk = c * self.kernel * self.kernel;
        let mut out = Array4::<f32>::zeros((n, self.out_ch, oh, ow));
        let mut cols = vec![0f32; if self.is_pointwise() { 0 } else { kk * oh * ow }];
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        let w2 = self.weight2();
        for i in 0..n {
            let sample = &xs[i * c * h * w..(i + 1) * c * h * w];
            let colv = if self.is_pointwise() {
                ArrayView2::from_shape((kk, oh * ow), sample).expect("shape")
            } else {
                self.im2col(sample, h, w, &mut cols);
                ArrayView2::from_shape((kk, oh * ow), &cols[..]).expect("shape")
            };
            let dst = &mut os[i * self.out_ch * oh * ow..(i + 1) * self.out_ch * oh * ow];
            let mut dst = ArrayViewMut2::from_shape((self.out_ch, oh * ow), dst).expect("shape");
            general_mat_mul(1.0, &w2, &colv, 0.0, &mut dst);
            if let Some(b) = &self.bias {
                for (mut row, &bv) in dst.rows_mut().into_iter().zip(b.value.iter()) {
                    row += bv;
                }
            }
        }
        self.input = Some(x);
        out
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("conv backward without forward");
        let grad = grad.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let kk = c * self.kernel * self.kernel;
        let xs = x.as_slice().expect("standard layout");
        let gs = grad.as_slice().expect("standard layout");
        let mut dx = Array4::<f32>::zeros(if self.input_grad { (n, c, h, w) } else { (0, c, h, w) });
        let mut cols = vec![0f32; if self.is_pointwise() { 0 } else { kk * oh * ow }];
        let mut dcols = vec![0f32; kk * oh * ow];
        let mut dw = Array2::<f32>::zeros((self.out_ch, kk));
        let mut db = Array1::<f32>::zeros(self.out_ch);
        let w2 = self.weight2().to_owned();
        for i in 0..n {
            let sample = &xs[i * c * h * w..(i + 1) * c * h * w];
            let colv = if self.is_pointwise() {
                ArrayView2::from_shape((kk, oh * ow), sample).expect("shape")
            } else {
                self.im2col(sample, h, w, &mut cols);
                ArrayView2::from_shape((kk, oh * ow), &cols[..]).expect("shape")
            };
            let g =
                ArrayView2::from_shape((self.out_ch, oh * ow), &gs[i * self.out_ch * oh * ow..(i + 1) * self.out_ch * oh * ow])
                    .expect("shape");
            general_mat_mul(1.0, &g, &colv.t(), 1.0, &mut dw);
            if self.bias.is_some() {
                db += &g.sum_axis(Axis(1));
            }
            if self.input_grad {
                let mut dc = ArrayViewMut2::from_shape((kk, oh * ow), &mut dcols[..]).expect("shape");
                general_mat_mul(1.0, &w2.t(), &g, 0.0, &mut dc);
                let dst = &mut dx.as_slice_mut().expect("standard layout")[i * c * h * w..(i + 1) * c * h * w];
                if self.is_pointwise() {
                    dst.copy_from_slice(&dcols);
                } else {
                    self.col2im(&dcols, h, w, dst);
                }
            }
        }
        let dw = dw.into_shape_with_order(self.weight.value.raw_dim()).expect("shape");
        self.weight.grad += &dw;
        if let Some(b) = &mut self.bias {
            b.grad += &db.into_dyn();
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }
}

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Array4<f32>, Vec<f32>, bool)>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[ch]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[ch]))),
            running_mean: ArrayD::zeros(IxDyn(&[ch])),
            running_var: ArrayD::ones(IxDyn(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut xhat = x;
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(1), ch);
            let (mean, var) = if train {
                let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / m;
                let var = plane.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / m;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mo = f64::from(self.momentum);
                self.running_mean[ch] = ((1.0 - mo) * f64::from(self.running_mean[ch]) + mo * mean) as f32;
                self.running_var[ch] = ((1.0 - mo) * f64::from(self.running_var[ch]) + mo * unbiased) as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            plane.mapv_inplace(|v| (v - mean) * is);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + b);
        }
        self.cache = Some((xhat, inv_std, train));
        y
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let (xhat, inv_std, train) = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = grad.dim();
        let m = (n * h * w) as f64;
        let mut dx = grad;
        for (ch, &is) in inv_std.iter().enumerate().take(c) {
            let xh = xhat.index_axis(Axis(1), ch);
            let mut g = dx.index_axis_mut(Axis(1), ch);
            let (mut sum_g, mut sum_gx) = (0f64, 0f64);
            for (&gv, &xv) in g.iter().zip(xh.iter()) {
                sum_g += f64::from(gv);
                sum_gx += f64::from(gv) * f64::from(xv);
            }
            self.gamma.grad[ch] += sum_gx as f32;
            self.beta.grad[ch] += sum_g as f32;
            let scale = self.gamma.value[ch] * is;
            if train {
                let mean_g = (sum_g / m) as f32;
                let mean_gx = (sum_gx / m) as f32;
                ndarray::Zip::from(&mut g).and(&xh).for_each(|gv, &xv| *gv = scale * (*gv - mean_g - xv * mean_gx));
            } else {
                g.mapv_inplace(|gv| gv * scale);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.gamma));
        f(join(prefix, "bias"), Slot::Param(&mut self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn visit_batchnorm(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(self);
    }
}

#[derive(Default)]
pub struct Relu {
    out: Option<Array4<f32>>,
}

impl Layer for Relu {
    fn forward(&mut self, mut x: Array4<f32>, _train: bool) -> Array4<f32> {
        x.mapv_inplace(|v| v.max(0.0));
        self.out = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        let out = self.out.take().expect("relu backward without forward");
        ndarray::Zip::from(&mut grad).and(&out).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        grad
    }
}

pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, argmax: Vec::new(), in_dim: (0, 0, 0, 0) }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: Array4<f32>, _train: bool) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        self.argmax = vec![0; n * c * oh * ow];
        let p = self.padding as isize;
        for (plane_idx, (dst, arg)) in
            out.as_slice_mut().expect("standard layout").chunks_mut(oh * ow).zip(self.argmax.chunks_mut(oh * ow)).enumerate()
        {
            let base = plane_idx * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    arg[oy * ow + ox] = best_i;
                }
            }
        }
        self.in_dim = (n, c, h, w);
        out
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let grad = grad.as_standard_layout().into_owned();
        let mut dx = Array4::<f32>::zeros(self.in_dim);
        let d = dx.as_slice_mut().expect("standard layout");
        for (&g, &i) in grad.iter().zip(&self.argmax) {
            d[i] += g;
        }
        dx
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    hw: (usize, usize),
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Array4<f32>, _train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        self.hw = (h, w);
        let inv = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, 1, 1), |(i, ch, _, _)| x.slice(ndarray::s![i, ch, .., ..]).sum() * inv)
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let (n, c, _, _) = grad.dim();
        let (h, w) = self.hw;
        let inv = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| grad[[i, ch, 0, 0]] * inv)
    }
}

/// Fully connected layer on `(N, F, 1, 1)` tensors.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid bound");
        Self {
            weight: Param::new(ArrayD::from_shape_fn(IxDyn(&[out_features, in_features]), |_| u.sample(rng))),
            bias: Param::new(ArrayD::from_shape_fn(IxDyn(&[out_features]), |_| u.sample(rng))),
            input: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w2(&self) -> ArrayView2<'_, f32> {
        self.weight.value.view().into_dimensionality().expect("2-d weight")
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Array4<f32>, _train: bool) -> Array4<f32> {
        let n = x.dim().0;
        let x2 = x.as_standard_layout().into_owned().into_shape_with_order((n, self.in_features())).expect("(N, F, 1, 1) input");
        let mut y = x2.dot(&self.w2().t());
        y += &self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        self.input = Some(x2);
        let o = self.out_features();
        y.into_shape_with_order((n, o, 1, 1)).expect("shape")
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("linear backward without forward");
        let n = grad.dim().0;
        let g = grad.as_standard_layout().into_owned().into_shape_with_order((n, self.out_features())).expect("shape");
        let dw = g.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        let dx = g.dot(&self.w2());
        let f = self.in_features();
        dx.into_shape_with_order((n, f, 1, 1)).expect("shape")
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

/// Named layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }
}

impl Layer for Sequential {
    fn forward(&mut self, mut x: Array4<f32>, train: bool) -> Array4<f32> {
        for (_, l) in &mut self.layers {
            x = l.forward(x, train);
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        for (_, l) in self.layers.iter_mut().rev() {
            grad = l.backward(grad);
        }
        grad
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        for (name, l) in &mut self.layers {
            l.visit(&join(prefix, name), f);
        }
    }

    fn visit_batchnorm(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for (_, l) in &mut self.layers {
            l.visit_batchnorm(f);
        }
    }
}

/// ResNet bottleneck block (1x1 reduce, 3x3 with stride, 1x1 expand).
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl Bottleneck {
    pub fn new(in_ch: usize, width: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let out_ch = width * 4;
        let downsample = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng), BatchNorm2d::new(out_ch)));
        let mut bn3 = BatchNorm2d::new(out_ch);
        // Residual branches start close to identity.
        bn3.gamma.value.fill(0.0);
        Self {
            conv1: Conv2d::new(in_ch, width, 1, 1, 0, false, rng),
            bn1: BatchNorm2d::new(width),
            relu1: Relu::default(),
            conv2: Conv2d::new(width, width, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(width),
            relu2: Relu::default(),
            conv3: Conv2d::new(width, out_ch, 1, 1, 0, false, rng),
            bn3,
            downsample,
            relu_out: Relu::default(),
        }
    }
}

impl Layer for Bottleneck {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let identity = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x.clone(), train);
                bn.forward(s, train)
            }
            None => x.clone(),
        };
        let mut out = self.conv1.forward(x, train);
        out = self.bn1.forward(out, train);
        out = self.relu1.forward(out, train);
        out = self.conv2.forward(out, train);
        out = self.bn2.forward(out, train);
        out = self.relu2.forward(out, train);
        out = self.conv3.forward(out, train);
        out = self.bn3.forward(out, train);
        out += &identity;
        self.relu_out.forward(out, train)
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let g = self.relu_out.backward(grad);
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = bn.backward(g.clone());
                conv.backward(s)
            }
            None => g.clone(),
        };
        let mut d = self.bn3.backward(g);
        d = self.conv3.backward(d);
        d = self.relu2.backward(d);
        d = self.bn2.backward(d);
        d = self.conv2.backward(d);
        d = self.relu1.backward(d);
        d = self.bn1.backward(d);
        d = self.conv1.backward(d);
        d + shortcut
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit(&join(prefix, "downsample.0"), f);
            bn.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_batchnorm(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        f(&mut self.bn3);
        if let Some((_, bn)) = &mut self.downsample {
            f(bn);
        }
    }
}

//! Convolution, batch normalization and ReLU with explicit backward passes.
//!
//! Every layer has an `infer` path (`&self`, running statistics, no caches) and
//! a training `forward` that returns a cache consumed by `backward`. Gradients
//! accumulate into the layer's own buffers until [`Module::zero_grad`].

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::float::Float;

/// Borrowed view of one named tensor inside a module.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    /// `None` for non-learnable buffers (batch-norm running statistics).
    pub grad: Option<&'a mut [T]>,
}

pub trait Module<T: Float> {
    /// Visits learnable parameters and buffers in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |slot| {
            if slot.grad.is_some() {
                n += slot.value.len();
            }
        });
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slot<'a, T, D: ndarray::Dimension>(
    prefix: &str,
    name: &str,
    value: &'a mut ndarray::Array<T, D>,
    grad: Option<&'a mut ndarray::Array<T, D>>,
) -> ParamSlot<'a, T> {
    ParamSlot {
        name: join(prefix, name),
        shape: value.shape().to_vec(),
        value: value.as_slice_mut().expect("standard layout"),
        grad: grad.map(|g| g.as_slice_mut().expect("standard layout")),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub padding: usize,
    grad_weight: Array4<T>,
    grad_bias: Array1<T>,
}

pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    in_dim: (usize, usize, usize, usize),
}

impl<T: Float> Conv2d<T> {
    /// He-normal initialized weights, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            T::c(std * rng.sample::<f64, _>(StandardNormal))
        });
        Conv2d {
            grad_weight: Array4::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(out_ch),
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn grad_weight(&self) -> &Array4<T> {
        &self.grad_weight
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    fn run(&self, x: &Array4<T>, keep_cols: bool) -> (Array4<T>, Vec<Array2<T>>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let cout = self.out_channels();
        let wm = self.weight_matrix();
        let mut y = Array4::zeros((n, cout, ho, wo));
        let mut kept = Vec::with_capacity(if keep_cols { n } else { 0 });
        for b in 0..n {
            let cols = im2col(
                x.index_axis(Axis(0), b),
                self.kernel(),
                self.stride,
                self.padding,
                ho,
                wo,
            );
            let mut out = wm.dot(&cols);
            for (mut row, &bias) in out.outer_iter_mut().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            y.slice_mut(s![b, .., .., ..]).assign(
                &out.into_shape_with_order((cout, ho, wo))
                    .expect("gemm output shape"),
            );
            if keep_cols {
                kept.push(cols);
            }
        }
        (y, kept)
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        self.run(x, false).0
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (y, cols) = self.run(x, true);
        (
            y,
            ConvCache {
                cols,
                in_dim: x.dim(),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: ConvCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (n, c, h, w) = cache.in_dim;
        let (_, cout, ho, wo) = dy.dim();
        let k = self.kernel();
        let mut dx = need_dx.then(|| Array4::zeros((n, c, h, w)));
        let mut gw = Array2::<T>::zeros((cout, c * k * k));
        for (b, cols) in cache.cols.into_iter().enumerate() {
            let dyb = dy
                .index_axis(Axis(0), b)
                .to_owned()
                .into_shape_with_order((cout, ho * wo))
                .expect("dy shape");
            ndarray::linalg::general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut gw);
            for (gb, row) in self.grad_bias.iter_mut().zip(dyb.outer_iter()) {
                *gb += row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = self.weight_matrix().t().dot(&dyb);
                col2im(
                    &dcols,
                    dx.index_axis_mut(Axis(0), b),
                    k,
                    self.stride,
                    self.padding,
                    ho,
                    wo,
                );
            }
        }
        let gw = gw
            .into_shape_with_order(self.weight.raw_dim())
            .expect("grad shape");
        self.grad_weight += &gw;
        dx
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        f(slot(prefix, "weight", &mut self.weight, Some(&mut self.grad_weight)));
        f(slot(prefix, "bias", &mut self.bias, Some(&mut self.grad_bias)));
    }
}

fn im2col<T: Float>(
    x: ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    if k == 1 && stride == 1 && pad == 0 {
        return x
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("1x1 reshape");
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(
    cols: &Array2<T>,
    mut dx: ndarray::ArrayViewMut3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = dx.dim();
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dxs[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
    grad_gamma: Array1<T>,
    grad_beta: Array1<T>,
}

pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
        }
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = x.clone();
        let eps = T::c(self.eps);
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = self.gamma[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    /// Training-mode forward with batch statistics; updates running statistics.
    pub fn forward(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, ch, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let eps = T::c(self.eps);
        let mom = T::c(self.momentum);
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut y = Array4::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(ch);
        for c in 0..ch {
            let plane = x.index_axis(Axis(1), c);
            let mean = plane.sum() / T::c(m);
            let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / T::c(m);
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let (g, bt) = (self.gamma[c], self.beta[c]);
            Zip::from(xhat.index_axis_mut(Axis(1), c))
                .and(y.index_axis_mut(Axis(1), c))
                .and(&plane)
                .for_each(|xh, yy, &v| {
                    *xh = (v - mean) * is;
                    *yy = *xh * g + bt;
                });
            let unbiased = if m > 1.0 { var * T::c(m / (m - 1.0)) } else { var };
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean;
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: BnCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (n, ch, h, w) = dy.dim();
        let m = T::c((n * h * w) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for c in 0..ch {
            let dyc = dy.index_axis(Axis(1), c);
            let xh = cache.xhat.index_axis(Axis(1), c);
            let dbeta = dyc.sum();
            let dgamma = Zip::from(&dyc)
                .and(&xh)
                .fold(T::zero(), |acc, &d, &x| acc + d * x);
            self.grad_beta[c] += dbeta;
            self.grad_gamma[c] += dgamma;
            let k = self.gamma[c] * cache.inv_std[c] / m;
            Zip::from(dx.index_axis_mut(Axis(1), c))
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| *o = k * (m * d - dbeta - x * dgamma));
        }
        dx
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        f(slot(prefix, "gamma", &mut self.gamma, Some(&mut self.grad_gamma)));
        f(slot(prefix, "beta", &mut self.beta, Some(&mut self.grad_beta)));
        f(slot(prefix, "running_mean", &mut self.running_mean, None));
        f(slot(prefix, "running_var", &mut self.running_var, None));
    }
}

/// Conv followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

pub struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    out: Option<Array4<T>>,
}

impl<T: Float> ConvBlock<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, kernel / 2, rng),
            bn: BatchNorm2d::new(out_ch),
            relu,
        }
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = self.bn.infer(&self.conv.infer(x));
        if self.relu {
            y.mapv_inplace(|v| v.max(T::zero()));
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<T>) -> (Array4<T>, BlockCache<T>) {
        let (z, conv) = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward(&z);
        let out = if self.relu {
            y.mapv_inplace(|v| v.max(T::zero()));
            Some(y.clone())
        } else {
            None
        };
        (y, BlockCache { conv, bn, out })
    }

    pub fn backward(
        &mut self,
        cache: BlockCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let dz = match &cache.out {
            Some(out) => {
                let mut d = dy.clone();
                Zip::from(&mut d).and(out).for_each(|g, &o| {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                });
                self.bn.backward(cache.bn, &d)
            }
            None => self.bn.backward(cache.bn, dy),
        };
        self.conv.backward(cache.conv, &dz, need_dx)
    }
}

impl<T: Float> Module<T> for ConvBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// A chain of conv blocks.
#[derive(Debug, Clone)]
pub struct Stack<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T: Float> Stack<T> {
    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h);
        }
        h
    }

    pub fn forward(&mut self, x: &Array4<T>) -> (Array4<T>, Vec<BlockCache<T>>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    /// Returns the input gradient if `need_dx`, else `None`.
    pub fn backward(
        &mut self,
        caches: Vec<BlockCache<T>>,
        dy: Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let mut d = dy;
        for (i, (block, cache)) in self.blocks.iter_mut().zip(caches).enumerate().rev() {
            let want = need_dx || i > 0;
            d = block.backward(cache, &d, want)?;
        }
        Some(d)
    }
}

impl<T: Float> Module<T> for Stack<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

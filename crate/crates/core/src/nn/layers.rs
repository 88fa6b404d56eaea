use rand::Rng;

use super::{gemm_view, Mode, ParamStore, Real, Tensor, View};
use crate::error::{Error, Result};

/// Batch statistics observed by one batch-norm layer in a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    pub mean_name: String,
    pub var_name: String,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Running-statistic updates from a train-mode forward pass. Callers decide
/// whether to commit them with [`apply_stat_updates`].
pub type StatUpdates<T> = Vec<StatUpdate<T>>;

/// Blends each update into the buffers: `running = (1 - m) running + m batch`.
pub fn apply_stat_updates<T: Real>(buffers: &mut ParamStore<T>, updates: StatUpdates<T>) {
    for u in updates {
        let m = T::lit(u.momentum);
        let keep = T::one() - m;
        for (r, &b) in buffers.get_mut(&u.mean_name).iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(&u.var_name).iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Index map between a large spatial grid and the small grid a strided
/// window slides over: `big = small * stride - pad + tap`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Small-grid positions `lo..hi` whose tap `tap` lands inside `0..limit`
    /// on the big grid, at big index `s * stride + tap - pad`.
    #[inline]
    fn valid_range(&self, tap: usize, small_len: usize, limit: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap).div_ceil(self.stride);
        let hi = (limit + self.pad)
            .saturating_sub(tap)
            .div_ceil(self.stride)
            .min(small_len);
        (lo, hi.max(lo))
    }
}

/// Column budget for one im2col chunk; keeps the patch matrix cache-sized.
const CHUNK_COLUMNS: usize = 4096;

/// Samples per chunk for a small grid of `hw` positions.
fn chunk_samples(hw: usize) -> usize {
    (CHUNK_COLUMNS / hw.max(1)).max(1)
}

/// im2col for samples `b0..b1`: `(C·k·k) × ((b1-b0)·small_h·small_w)`
/// patches of `big`.
fn gather<T: Real>(big: &Tensor<T>, g: &Geometry, b0: usize, b1: usize) -> Vec<T> {
    let (c, n) = (big.c, big.n);
    let m = (b1 - b0) * g.small_h * g.small_w;
    let mut out = vec![T::zero(); c * g.k * g.k * m];
    for ch in 0..c {
        for ky in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(ky, g.small_h, g.big_h);
            for kx in 0..g.k {
                let (x_lo, x_hi) = g.valid_range(kx, g.small_w, g.big_w);
                if x_lo == x_hi {
                    continue;
                }
                let x_start = x_lo * g.stride + kx - g.pad;
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut out[row * m..(row + 1) * m];
                for b in b0..b1 {
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &big.data[((ch * n + b) * g.big_h + iy) * g.big_w..][..g.big_w];
                        let dst_row =
                            &mut dst[((b - b0) * g.small_h + oy) * g.small_w..][..g.small_w];
                        let taps = src[x_start..].iter().step_by(g.stride);
                        for (d, &v) in dst_row[x_lo..x_hi].iter_mut().zip(taps) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// col2im for samples `b0..b1`: adjoint of [`gather`], accumulating
/// overlapping taps into `big`.
fn scatter<T: Real>(cols: &[T], big: &mut Tensor<T>, g: &Geometry, b0: usize, b1: usize) {
    let (c, n) = (big.c, big.n);
    let m = (b1 - b0) * g.small_h * g.small_w;
    assert_eq!(cols.len(), c * g.k * g.k * m, "scatter input size");
    for ch in 0..c {
        for ky in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(ky, g.small_h, g.big_h);
            for kx in 0..g.k {
                let (x_lo, x_hi) = g.valid_range(kx, g.small_w, g.big_w);
                if x_lo == x_hi {
                    continue;
                }
                let x_start = x_lo * g.stride + kx - g.pad;
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * m..(row + 1) * m];
                for b in b0..b1 {
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst =
                            &mut big.data[((ch * n + b) * g.big_h + iy) * g.big_w..][..g.big_w];
                        let src_row = &src[((b - b0) * g.small_h + oy) * g.small_w..][..g.small_w];
                        let taps = dst[x_start..].iter_mut().step_by(g.stride);
                        for (d, &v) in taps.zip(&src_row[x_lo..x_hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Sample ranges covering `0..n` in chunks sized for a grid of `hw`.
fn chunks(n: usize, hw: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = chunk_samples(hw);
    (0..n).step_by(per).map(move |b0| (b0, (b0 + per).min(n)))
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    let plane = y.n * y.h * y.w;
    for (ch, &b) in bias.iter().enumerate() {
        for v in &mut y.data[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    (0..dy.c)
        .map(|ch| dy.channel(ch).iter().copied().sum())
        .collect()
}

/// Strided 2-D convolution; weight `[cout, cin, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            big_h: h,
            big_w: w,
            small_h: self.out_side(h),
            small_w: self.out_side(w),
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn init<T: Real>(&self, params: &mut ParamStore<T>, rng: &mut impl Rng, std: f64) {
        params.insert_normal(
            self.weight_name(),
            vec![self.cout, self.cin, self.k, self.k],
            std,
            rng,
        );
        if self.bias {
            params.insert_filled(self.bias_name(), vec![self.cout], T::zero());
        }
    }

    fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
        assert_eq!(x.c, self.cin, "{}: input channels", self.name);
        let g = self.geometry(x.h, x.w);
        let hw = g.small_h * g.small_w;
        let total = x.n * hw;
        let kk = self.cin * self.k * self.k;
        let weight = params.get(&self.weight_name());
        let mut y = Tensor::zeros(self.cout, x.n, g.small_h, g.small_w);
        for (b0, b1) in chunks(x.n, hw) {
            let cols = gather(x, &g, b0, b1);
            let cn = (b1 - b0) * hw;
            gemm_view(
                self.cout,
                kk,
                cn,
                View::rows(weight, kk),
                View::rows(&cols, cn),
                &mut y.data[b0 * hw..],
                total,
                false,
            );
        }
        if self.bias {
            add_bias(&mut y, params.get(&self.bias_name()));
        }
        (y, Cache::Conv { input: x.clone() })
    }

    fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParamStore<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geometry(x.h, x.w);
        let hw = g.small_h * g.small_w;
        let total = x.n * hw;
        let kk = self.cin * self.k * self.k;
        let weight = params.get(&self.weight_name());
        let mut dw = grads.as_ref().map(|_| vec![T::zero(); self.cout * kk]);
        let mut dx = need_dx.then(|| Tensor::zeros(x.c, x.n, x.h, x.w));
        for (b0, b1) in chunks(x.n, hw) {
            let cn = (b1 - b0) * hw;
            let dy_chunk = View::rows(&dy.data[b0 * hw..], total);
            if let Some(dw) = dw.as_mut() {
                let cols = gather(x, &g, b0, b1);
                gemm_view(
                    self.cout,
                    cn,
                    kk,
                    dy_chunk,
                    View::transposed(&cols, cn),
                    dw,
                    kk,
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcols = vec![T::zero(); kk * cn];
                gemm_view(
                    kk,
                    self.cout,
                    cn,
                    View::transposed(weight, kk),
                    dy_chunk,
                    &mut dcols,
                    cn,
                    false,
                );
                scatter(&dcols, dx, &g, b0, b1);
            }
        }
        if let (Some(grads), Some(dw)) = (grads, dw) {
            grads.accumulate(&self.weight_name(), &dw);
            if self.bias {
                grads.accumulate(&self.bias_name(), &bias_grad(dy));
            }
        }
        dx
    }
}

/// Strided transposed convolution; weight `[cin, cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub bias: bool,
}

impl ConvTranspose2d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.k + self.out_pad - 2 * self.pad
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            big_h: self.out_side(h),
            big_w: self.out_side(w),
            small_h: h,
            small_w: w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn init<T: Real>(&self, params: &mut ParamStore<T>, rng: &mut impl Rng, std: f64) {
        params.insert_normal(
            self.weight_name(),
            vec![self.cin, self.cout, self.k, self.k],
            std,
            rng,
        );
        if self.bias {
            params.insert_filled(self.bias_name(), vec![self.cout], T::zero());
        }
    }

    fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
        assert_eq!(x.c, self.cin, "{}: input channels", self.name);
        let g = self.geometry(x.h, x.w);
        let hw = x.h * x.w;
        let total = x.n * hw;
        let okk = self.cout * self.k * self.k;
        let weight = params.get(&self.weight_name());
        let mut y = Tensor::zeros(self.cout, x.n, g.big_h, g.big_w);
        for (b0, b1) in chunks(x.n, hw) {
            let cn = (b1 - b0) * hw;
            let mut cols = vec![T::zero(); okk * cn];
            gemm_view(
                okk,
                self.cin,
                cn,
                View::transposed(weight, okk),
                View::rows(&x.data[b0 * hw..], total),
                &mut cols,
                cn,
                false,
            );
            scatter(&cols, &mut y, &g, b0, b1);
        }
        if self.bias {
            add_bias(&mut y, params.get(&self.bias_name()));
        }
        (y, Cache::ConvT { input: x.clone() })
    }

    fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParamStore<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geometry(input.h, input.w);
        let hw = input.h * input.w;
        let total = input.n * hw;
        let okk = self.cout * self.k * self.k;
        let weight = params.get(&self.weight_name());
        let mut dw = grads.as_ref().map(|_| vec![T::zero(); self.cin * okk]);
        let mut dx = need_dx.then(|| Tensor::zeros(self.cin, input.n, input.h, input.w));
        for (b0, b1) in chunks(input.n, hw) {
            let cn = (b1 - b0) * hw;
            let dcols = gather(dy, &g, b0, b1);
            if let Some(dw) = dw.as_mut() {
                gemm_view(
                    self.cin,
                    cn,
                    okk,
                    View::rows(&input.data[b0 * hw..], total),
                    View::transposed(&dcols, cn),
                    dw,
                    okk,
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm_view(
                    self.cin,
                    okk,
                    cn,
                    View::rows(weight, okk),
                    View::rows(&dcols, cn),
                    &mut dx.data[b0 * hw..],
                    total,
                    false,
                );
            }
        }
        if let (Some(grads), Some(dw)) = (grads, dw) {
            grads.accumulate(&self.weight_name(), &dw);
            if self.bias {
                grads.accumulate(&self.bias_name(), &bias_grad(dy));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    fn init<T: Real>(&self, params: &mut ParamStore<T>, buffers: &mut ParamStore<T>) {
        params.insert_filled(self.gamma_name(), vec![self.channels], T::one());
        params.insert_filled(self.beta_name(), vec![self.channels], T::zero());
        buffers.insert_filled(self.mean_name(), vec![self.channels], T::zero());
        buffers.insert_filled(self.var_name(), vec![self.channels], T::one());
    }

    fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        mut x: Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> (Tensor<T>, Cache<T>) {
        assert_eq!(x.c, self.channels, "{}: channels", self.name);
        let gamma = params.get(&self.gamma_name());
        let beta = params.get(&self.beta_name());
        let plane = x.n * x.h * x.w;
        let mut inv_std = vec![T::zero(); x.c];
        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        for ch in 0..x.c {
            let vals = &mut x.data[ch * plane..(ch + 1) * plane];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = vals.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / plane as f64;
                    let var = vals
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / plane as f64;
                    let unbiased = if plane > 1 {
                        var * plane as f64 / (plane - 1) as f64
                    } else {
                        var
                    };
                    batch_mean.push(T::lit(mean));
                    batch_var.push(T::lit(unbiased));
                    (T::lit(mean), T::lit(var))
                }
                Mode::Eval => (
                    buffers.get(&self.mean_name())[ch],
                    buffers.get(&self.var_name())[ch],
                ),
            };
            let istd = T::one() / (var + T::lit(self.eps)).sqrt();
            inv_std[ch] = istd;
            for v in vals.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        let xhat = x.data.clone();
        for ch in 0..x.c {
            for v in &mut x.data[ch * plane..(ch + 1) * plane] {
                *v = gamma[ch] * *v + beta[ch];
            }
        }
        if mode == Mode::Train {
            updates.push(StatUpdate {
                mean_name: self.mean_name(),
                var_name: self.var_name(),
                momentum: self.momentum,
                batch_mean,
                batch_var,
            });
        }
        let cache = Cache::Bn {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        (x, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
        mut dy: Tensor<T>,
        grads: Option<&mut ParamStore<T>>,
    ) -> Tensor<T> {
        let gamma = params.get(&self.gamma_name());
        let plane = dy.n * dy.h * dy.w;
        let m = T::from_usize(plane).unwrap();
        let mut dgamma = vec![T::zero(); dy.c];
        let mut dbeta = vec![T::zero(); dy.c];
        for ch in 0..dy.c {
            let g = &mut dy.data[ch * plane..(ch + 1) * plane];
            let xh = &xhat[ch * plane..(ch + 1) * plane];
            let sum_dy: T = g.iter().copied().sum();
            let sum_dy_xhat: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let scale = gamma[ch] * inv_std[ch];
            if train {
                let k = scale / m;
                for (d, &xv) in g.iter_mut().zip(xh) {
                    *d = k * (m * *d - sum_dy - xv * sum_dy_xhat);
                }
            } else {
                for d in g.iter_mut() {
                    *d *= scale;
                }
            }
        }
        if let Some(grads) = grads {
            grads.accumulate(&self.gamma_name(), &dgamma);
            grads.accumulate(&self.beta_name(), &dbeta);
        }
        dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(slope)
                }
            }
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Bn(BatchNorm2d),
    Act {
        name: String,
        act: Activation,
    },
    /// Global average pooling to 1×1.
    Pool {
        name: String,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::ConvT(l) => &l.name,
            Layer::Bn(l) => &l.name,
            Layer::Act { name, .. } | Layer::Pool { name } => name,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv {
        input: Tensor<T>,
    },
    ConvT {
        input: Tensor<T>,
    },
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act {
        out: Tensor<T>,
    },
    Pool {
        h: usize,
        w: usize,
    },
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let hw = x.h * x.w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x
        .data
        .chunks_exact(hw)
        .map(|s| s.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(x.c, x.n, 1, 1, data)
}

/// A chain of layers run in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        rng: &mut impl Rng,
        std: f64,
    ) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => l.init(params, rng, std),
                Layer::ConvT(l) => l.init(params, rng, std),
                Layer::Bn(l) => l.init(params, buffers),
                Layer::Act { .. } | Layer::Pool { .. } => {}
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        mut x: Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv(l) => l.forward(params, &x),
                Layer::ConvT(l) => l.forward(params, &x),
                Layer::Bn(l) => l.forward(params, buffers, x, mode, updates),
                Layer::Act { act, .. } => {
                    let act = *act;
                    x.data.iter_mut().for_each(|v| *v = act.apply(*v));
                    let out = x.clone();
                    (x, Cache::Act { out })
                }
                Layer::Pool { .. } => {
                    let cache = Cache::Pool { h: x.h, w: x.w };
                    (global_avg_pool(&x), cache)
                }
            };
            if !y.is_finite() {
                return Err(Error::NonFiniteActivation {
                    layer: layer.name().to_owned(),
                });
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates `dy`, accumulating parameter gradients into `grads`
    /// when given. Returns the input gradient when `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        caches: &[Cache<T>],
        mut dy: Tensor<T>,
        mut grads: Option<&mut ParamStore<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(caches.len(), self.layers.len(), "cache count");
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want_dx = need_dx || i > 0;
            dy = match (layer, cache) {
                (Layer::Conv(l), Cache::Conv { input }) => {
                    l.backward(params, input, &dy, grads.as_deref_mut(), want_dx)?
                }
                (Layer::ConvT(l), Cache::ConvT { input }) => {
                    l.backward(params, input, &dy, grads.as_deref_mut(), want_dx)?
                }
                (
                    Layer::Bn(l),
                    Cache::Bn {
                        xhat,
                        inv_std,
                        train,
                    },
                ) => l.backward(params, xhat, inv_std, *train, dy, grads.as_deref_mut()),
                (Layer::Act { act, .. }, Cache::Act { out }) => {
                    for (d, &y) in dy.data.iter_mut().zip(&out.data) {
                        *d *= act.derivative_from_output(y);
                    }
                    dy
                }
                (Layer::Pool { .. }, Cache::Pool { h, w }) => {
                    let hw = h * w;
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let data = dy
                        .data
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
                        .collect();
                    Tensor::from_vec(dy.c, dy.n, *h, *w, data)
                }
                _ => unreachable!("cache does not match layer `{}`", layer.name()),
            };
        }
        need_dx.then_some(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-sum convolution used as an oracle for the im2col path.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &[f64],
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let oh = (x.h + 2 * p - k) / s + 1;
        let ow = (x.w + 2 * p - k) / s + 1;
        let mut y = Tensor::zeros(cout, x.n, oh, ow);
        for o in 0..cout {
            for b in 0..x.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x.at(ci, b, iy as usize, ix as usize)
                                        * w[((o * x.c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        let i = y.index(o, b, oy, ox);
                        y.data[i] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(
            c,
            n,
            h,
            w,
            (0..c * n * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d {
            name: "c".into(),
            cin: 3,
            cout: 4,
            k: 5,
            stride: 2,
            pad: 2,
            bias: false,
        };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        Sequential::new(vec![Layer::Conv(conv.clone())]).init(
            &mut params,
            &mut buffers,
            &mut rng,
            0.5,
        );
        let x = random_tensor(&mut rng, 3, 2, 10, 10);
        let (y, _) = conv.forward(&params, &x);
        assert_eq!((y.h, y.w), (5, 5));
        let oracle = conv_oracle(&x, params.get("c.weight"), 4, 5, 2, 2);
        for (a, b) in y.data.iter().zip(&oracle.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> when both share the weight tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d {
            name: "w".into(),
            cin: 2,
            cout: 3,
            k: 5,
            stride: 2,
            pad: 2,
            bias: false,
        };
        let convt = ConvTranspose2d {
            name: "w".into(),
            cin: 3,
            cout: 2,
            k: 5,
            stride: 2,
            pad: 2,
            out_pad: 1,
            bias: false,
        };
        let mut params = ParamStore::new();
        params.insert_normal("w.weight", vec![3, 2, 5, 5], 1.0, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, 8, 8);
        let y = random_tensor(&mut rng, 3, 2, 4, 4);
        let (cx, _) = conv.forward(&params, &x);
        let (ty, _) = convt.forward(&params, &y);
        assert_eq!((ty.c, ty.h, ty.w), (2, 8, 8));
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn side_arithmetic_halves_and_doubles() {
        for k in [3, 5, 7] {
            let conv = Conv2d {
                name: "c".into(),
                cin: 1,
                cout: 1,
                k,
                stride: 2,
                pad: k / 2,
                bias: false,
            };
            let convt = ConvTranspose2d {
                name: "t".into(),
                cin: 1,
                cout: 1,
                k,
                stride: 2,
                pad: k / 2,
                out_pad: 1,
                bias: false,
            };
            for side in [4, 8, 16, 64, 128] {
                assert_eq!(conv.out_side(side), side / 2);
                assert_eq!(convt.out_side(side), side * 2);
            }
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm2d::new("bn", 2);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        bn.init(&mut params, &mut buffers);
        let x = random_tensor(&mut rng, 2, 4, 3, 3);
        let mut updates = Vec::new();
        let (y, _) = bn.forward(&params, &buffers, x, Mode::Train, &mut updates);
        for ch in 0..2 {
            let vals = y.channel(ch);
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(updates.len(), 1);
        apply_stat_updates(&mut buffers, updates);
        assert!(buffers.get("bn.running_var").iter().all(|&v| v != 1.0));
    }

    #[test]
    fn pooling_matches_explicit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 3, 2, 4, 4);
        let p = global_avg_pool(&x);
        for c in 0..3 {
            for b in 0..2 {
                let mut acc = 0.0;
                for y in 0..4 {
                    for xx in 0..4 {
                        acc += x.at(c, b, y, xx);
                    }
                }
                assert!((p.at(c, b, 0, 0) - acc / 16.0).abs() < 1e-12);
            }
        }
    }
}

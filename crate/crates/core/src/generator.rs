//! Encoder-decoder generator.
//!
//! The encoder is a ladder of stride-2 convolutions (LeakyReLU 0.2, batch
//! norm on every layer but the first) taking the 128×128 overhead tile down
//! to 64, 32, 16 and 8 pixels. A `crop_size`² window is cut from the center
//! of the tapped layer(s) and fed to a four-layer transposed-convolution
//! decoder that emits a 64×64 ground view through `tanh`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, BatchNorm2d, Cache, Conv2d, ConvTranspose2d, Layer, Mode, ParamStore, Real,
    Sequential, StatUpdates, Tensor,
};
use crate::types::{GroundImage, OverheadImage, Seed, CHANNELS, GROUND_SIDE, OVERHEAD_SIDE};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
const ENCODER_DEPTH: usize = 4;
const DECODER_DEPTH: usize = 4;
const EVAL_CHUNK: usize = 64;

/// Which encoder depth(s) condition the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Low,
    Mid,
    High,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Low, Variant::Mid, Variant::High, Variant::Concat];

    /// 1-based encoder layers whose crops form the conditioning block.
    pub fn taps(self) -> &'static [usize] {
        match self {
            Variant::Low => &[2],
            Variant::Mid => &[3],
            Variant::High => &[4],
            Variant::Concat => &[2, 3, 4],
        }
    }

    pub fn encoder_depth(self) -> usize {
        *self.taps().last().expect("non-empty taps")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Low => "low",
            Variant::Mid => "mid",
            Variant::High => "high",
            Variant::Concat => "concat",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Variant::Low),
            "mid" => Ok(Variant::Mid),
            "high" => Ok(Variant::High),
            "concat" => Ok(Variant::Concat),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected low, mid, high or concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub variant: Variant,
    /// 1 = tiny profile, 8 = paper-scale profile.
    pub width_multiplier: usize,
    /// Channels of encoder layer 1 at `width_multiplier = 1`.
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    /// Extra Gaussian noise channels appended to the conditioning block.
    #[serde(default)]
    pub noise_channels: usize,
}

fn default_base_width() -> usize {
    8
}

fn default_kernel() -> usize {
    5
}

fn default_crop() -> usize {
    4
}

impl GeneratorConfig {
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            width_multiplier: 1,
            base_width: default_base_width(),
            kernel_size: default_kernel(),
            crop_size: default_crop(),
            noise_channels: 0,
        }
    }

    pub fn paper_scale(variant: Variant) -> Self {
        Self {
            width_multiplier: 8,
            ..Self::tiny(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier == 0 || self.base_width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "crop_size must be a positive even number, got {}",
                self.crop_size
            )));
        }
        if decoded_side(self.crop_size) != GROUND_SIDE {
            return Err(Error::Config(format!(
                "crop_size {} decodes to {} pixels, not {GROUND_SIDE}",
                self.crop_size,
                decoded_side(self.crop_size)
            )));
        }
        let smallest = self.tap_side(self.variant.encoder_depth());
        if self.crop_size > smallest {
            return Err(Error::Config(format!(
                "crop_size {} exceeds the {smallest}x{smallest} tapped feature map",
                self.crop_size
            )));
        }
        Ok(())
    }

    /// Spatial side of the output of 1-based encoder layer `layer`.
    pub fn tap_side(&self, layer: usize) -> usize {
        OVERHEAD_SIDE >> layer
    }

    pub fn encoder_widths(&self) -> [usize; ENCODER_DEPTH] {
        let b = self.base_width * self.width_multiplier;
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Output channels of decoder layers 1–3 (layer 4 emits RGB).
    pub fn decoder_widths(&self) -> [usize; DECODER_DEPTH - 1] {
        let b = self.base_width * self.width_multiplier;
        [8 * b, 4 * b, 2 * b]
    }

    /// Channel count of the conditioning block (excluding noise).
    pub fn block_channels(&self) -> usize {
        let widths = self.encoder_widths();
        self.variant.taps().iter().map(|&l| widths[l - 1]).sum()
    }

    fn encoder_stages(&self) -> Vec<Sequential> {
        let widths = self.encoder_widths();
        let k = self.kernel_size;
        (0..self.variant.encoder_depth())
            .map(|i| {
                let name = format!("enc{}", i + 1);
                let cin = if i == 0 { CHANNELS } else { widths[i - 1] };
                let mut layers = vec![Layer::Conv(Conv2d {
                    name: format!("{name}.conv"),
                    cin,
                    cout: widths[i],
                    k,
                    stride: 2,
                    pad: k / 2,
                    bias: i == 0,
                })];
                if i > 0 {
                    layers.push(Layer::Bn(BatchNorm2d::new(format!("{name}.bn"), widths[i])));
                }
                layers.push(Layer::Act {
                    name: format!("{name}.act"),
                    act: Activation::LeakyRelu(LEAKY_SLOPE),
                });
                Sequential::new(layers)
            })
            .collect()
    }

    fn decoder(&self) -> Sequential {
        let widths = self.decoder_widths();
        let k = self.kernel_size;
        let mut layers = Vec::new();
        let mut cin = self.block_channels() + self.noise_channels;
        for i in 0..DECODER_DEPTH {
            let name = format!("dec{}", i + 1);
            let last = i == DECODER_DEPTH - 1;
            let cout = if last { CHANNELS } else { widths[i] };
            layers.push(Layer::ConvT(ConvTranspose2d {
                name: format!("{name}.conv"),
                cin,
                cout,
                k,
                stride: 2,
                pad: k / 2,
                out_pad: 1,
                bias: last,
            }));
            if last {
                layers.push(Layer::Act {
                    name: format!("{name}.act"),
                    act: Activation::Tanh,
                });
            } else {
                layers.push(Layer::Bn(BatchNorm2d::new(format!("{name}.bn"), cout)));
                layers.push(Layer::Act {
                    name: format!("{name}.act"),
                    act: Activation::Relu,
                });
            }
            cin = cout;
        }
        Sequential::new(layers)
    }
}

/// Center `crop × crop` window: rows and columns `[H/2 - crop/2, H/2 + crop/2)`.
pub fn crop_center<T: Real>(fmap: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    if fmap.h < crop
        || fmap.w < crop
        || !fmap.h.is_multiple_of(2)
        || !fmap.w.is_multiple_of(2)
        || !crop.is_multiple_of(2)
    {
        return Err(Error::CropTooLarge {
            h: fmap.h,
            w: fmap.w,
            crop,
        });
    }
    let (r0, c0) = (fmap.h / 2 - crop / 2, fmap.w / 2 - crop / 2);
    let mut out = Tensor::zeros(fmap.c, fmap.n, crop, crop);
    for ch in 0..fmap.c {
        for b in 0..fmap.n {
            for y in 0..crop {
                let src = fmap.index(ch, b, r0 + y, c0);
                let dst = out.index(ch, b, y, 0);
                out.data[dst..dst + crop].copy_from_slice(&fmap.data[src..src + crop]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`crop_center`]: places `block` back into a zero map.
fn uncrop_center<T: Real>(block: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let crop = block.h;
    let (r0, c0) = (h / 2 - crop / 2, w / 2 - crop / 2);
    let mut out = Tensor::zeros(block.c, block.n, h, w);
    for ch in 0..block.c {
        for b in 0..block.n {
            for y in 0..crop {
                let src = block.index(ch, b, y, 0);
                let dst = out.index(ch, b, r0 + y, c0);
                out.data[dst..dst + crop].copy_from_slice(&block.data[src..src + crop]);
            }
        }
    }
    out
}

/// Generator parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    pub params: ParamStore<T>,
    /// Batch-norm running statistics.
    pub buffers: ParamStore<T>,
}

/// Intermediate values retained by [`Generator::forward`] for backprop.
pub struct GeneratorCache<T> {
    encoder: Vec<Vec<Cache<T>>>,
    tap_shapes: Vec<(usize, usize)>,
    decoder: Vec<Cache<T>>,
}

impl<T: Real> Generator<T> {
    /// Weights ~ N(0, 0.02²); batch-norm scales 1 and shifts 0.
    pub fn new(config: GeneratorConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for stage in config.encoder_stages() {
            stage.init(&mut params, &mut buffers, &mut rng, INIT_STD);
        }
        config
            .decoder()
            .init(&mut params, &mut buffers, &mut rng, INIT_STD);
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Reassembles a generator from stored tensors, checking every name and shape.
    pub fn from_parts(
        config: GeneratorConfig,
        params: ParamStore<T>,
        buffers: ParamStore<T>,
    ) -> Result<Self> {
        let fresh = Self::new(config, Seed(0))?;
        fresh
            .params
            .check_congruent(&params, "generator parameters")?;
        fresh
            .buffers
            .check_congruent(&buffers, "generator buffers")?;
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config,
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn apply_stat_updates(&mut self, updates: StatUpdates<T>) {
        crate::nn::apply_stat_updates(&mut self.buffers, updates);
    }

    /// Outputs of every encoder layer, shallowest first.
    pub fn encode(&self, overhead: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        let mut updates = Vec::new();
        let mut maps = Vec::new();
        let mut x = overhead.clone();
        for stage in self.config.encoder_stages() {
            let (y, _) = stage.forward(&self.params, &self.buffers, x, mode, &mut updates)?;
            maps.push(y.clone());
            x = y;
        }
        Ok(maps)
    }

    fn block_from_maps(&self, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let crops = self
            .config
            .variant
            .taps()
            .iter()
            .map(|&l| crop_center(&maps[l - 1], self.config.crop_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = crops.iter().collect();
        Ok(Tensor::concat_channels(&refs))
    }

    /// The conditioning block φ(overhead): the tapped crop(s), concatenated
    /// channel-wise for the concat variant.
    pub fn condition_block(&self, overhead: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let maps = self.encode(overhead, mode)?;
        self.block_from_maps(&maps)
    }

    pub fn decode(&self, block: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let input = self.with_eval_noise(block);
        if input.c != self.config.block_channels() + self.config.noise_channels
            || input.h != self.config.crop_size
            || input.w != self.config.crop_size
        {
            return Err(Error::InvalidInput(format!(
                "conditioning block is {}x{}x{}, expected {}x{}x{}",
                block.h,
                block.w,
                block.c,
                self.config.crop_size,
                self.config.crop_size,
                self.config.block_channels()
            )));
        }
        let mut updates = Vec::new();
        let (y, _) = self.config.decoder().forward(
            &self.params,
            &self.buffers,
            input,
            mode,
            &mut updates,
        )?;
        Ok(y)
    }

    /// Noise channels take their mean (zero) outside training.
    fn with_eval_noise(&self, block: &Tensor<T>) -> Tensor<T> {
        if self.config.noise_channels == 0 || block.c != self.config.block_channels() {
            return block.clone();
        }
        let zeros = Tensor::zeros(self.config.noise_channels, block.n, block.h, block.w);
        Tensor::concat_channels(&[block, &zeros])
    }

    /// Full forward pass retaining caches. `noise` must be given when the
    /// configuration has noise channels.
    pub fn forward(
        &self,
        overhead: &Tensor<T>,
        noise: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<(Tensor<T>, GeneratorCache<T>, StatUpdates<T>)> {
        let mut updates = Vec::new();
        let mut enc_caches = Vec::new();
        let mut maps = Vec::new();
        let mut x = overhead.clone();
        for stage in self.config.encoder_stages() {
            let (y, cache) = stage.forward(&self.params, &self.buffers, x, mode, &mut updates)?;
            enc_caches.push(cache);
            maps.push(y.clone());
            x = y;
        }
        let tap_shapes = maps.iter().map(|m| (m.h, m.w)).collect();
        let mut block = self.block_from_maps(&maps)?;
        if self.config.noise_channels > 0 {
            let noise = noise.ok_or_else(|| {
                Error::InvalidInput("generator configured with noise but none supplied".into())
            })?;
            block = Tensor::concat_channels(&[&block, noise]);
        }
        let (out, dec_caches) = self.config.decoder().forward(
            &self.params,
            &self.buffers,
            block,
            mode,
            &mut updates,
        )?;
        let cache = GeneratorCache {
            encoder: enc_caches,
            tap_shapes,
            decoder: dec_caches,
        };
        Ok((out, cache, updates))
    }

    /// Draws a noise tensor for a batch of `n` (training only).
    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng) -> Option<Tensor<T>> {
        let c = self.config.noise_channels;
        (c > 0).then(|| {
            let s = self.config.crop_size;
            let data = (0..c * n * s * s)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::from_vec(c, n, s, s, data)
        })
    }

    /// Accumulates parameter gradients for an output gradient `d_out`.
    pub fn backward(&self, cache: &GeneratorCache<T>, d_out: Tensor<T>, grads: &mut ParamStore<T>) {
        let d_block = self
            .config
            .decoder()
            .backward(&self.params, &cache.decoder, d_out, Some(grads), true)
            .expect("decoder input gradient");
        let taps = self.config.variant.taps();
        let widths = self.config.encoder_widths();
        let mut sizes: Vec<usize> = taps.iter().map(|&l| widths[l - 1]).collect();
        if self.config.noise_channels > 0 {
            sizes.push(self.config.noise_channels);
        }
        let mut parts = d_block.split_channels(&sizes);
        parts.truncate(taps.len());

        let stages = self.config.encoder_stages();
        let mut carry: Option<Tensor<T>> = None;
        for layer in (1..=stages.len()).rev() {
            let mut d_map = carry.take();
            if let Some(pos) = taps.iter().position(|&l| l == layer) {
                let (h, w) = cache.tap_shapes[layer - 1];
                let g = uncrop_center(&parts[pos], h, w);
                match d_map.as_mut() {
                    Some(d) => d.add_assign(&g),
                    None => d_map = Some(g),
                }
            }
            let d_map = d_map.expect("deepest encoder layer is always tapped");
            carry = stages[layer - 1].backward(
                &self.params,
                &cache.encoder[layer - 1],
                d_map,
                Some(grads),
                layer > 1,
            );
        }
    }

    /// Eval-mode batch generation, processed in fixed-size chunks.
    pub fn generate_batch(&self, overheads: &[&OverheadImage]) -> Result<Vec<GroundImage>> {
        let mut out = Vec::with_capacity(overheads.len());
        for chunk in overheads.chunks(EVAL_CHUNK) {
            let x = Tensor::<T>::from_images(chunk);
            let noise = (self.config.noise_channels > 0).then(|| {
                let s = self.config.crop_size;
                Tensor::zeros(self.config.noise_channels, chunk.len(), s, s)
            });
            let (y, _, _) = self.forward(&x, noise.as_ref(), Mode::Eval)?;
            for i in 0..chunk.len() {
                out.push(GroundImage::from_clamped(y.sample_hwc(i))?);
            }
        }
        Ok(out)
    }

    pub fn generate(&self, overhead: &OverheadImage) -> Result<GroundImage> {
        Ok(self
            .generate_batch(&[overhead])?
            .pop()
            .expect("one image in, one out"))
    }
}

/// Output side of the decoder for a given crop; always `GROUND_SIDE` for valid configs.
pub fn decoded_side(crop: usize) -> usize {
    crop << DECODER_DEPTH
}

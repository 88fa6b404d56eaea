//! Conditional discriminator and the overhead feature extractor built from it.
//!
//! The overhead tile is reduced 128→64 by one stride-2 convolution and
//! concatenated channel-wise with the 64×64 ground image (ground channels
//! first). Four stride-2 conv/batch-norm/LeakyReLU trunk layers take that to
//! 4×4, a 1×1 convolution widens it to `feature_dim` channels, and global
//! average pooling yields the feature vector. A linear map plus sigmoid gives
//! the real/fake probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, INIT_STD, LEAKY_SLOPE};
use crate::nn::{
    Activation, BatchNorm2d, Cache, Conv2d, Layer, Mode, ParamStore, Real, Sequential, StatUpdates,
    Tensor,
};
use crate::types::{GroundImage, OverheadImage, Seed, CHANNELS};

pub const FEATURE_DIM: usize = 1024;
const TRUNK_DEPTH: usize = 4;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width_multiplier: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Width of the pooled head, i.e. the feature-vector length.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_base_width() -> usize {
    8
}

fn default_kernel() -> usize {
    5
}

fn default_feature_dim() -> usize {
    FEATURE_DIM
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            width_multiplier: 1,
            base_width: default_base_width(),
            kernel_size: default_kernel(),
            feature_dim: FEATURE_DIM,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            width_multiplier: 8,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier == 0 || self.base_width == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn trunk_widths(&self) -> [usize; TRUNK_DEPTH] {
        let b = self.base_width * self.width_multiplier;
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Channels produced by the overhead-reduction layer.
    pub fn overhead_channels(&self) -> usize {
        self.base_width * self.width_multiplier
    }

    fn conv(&self, name: &str, cin: usize, cout: usize, bias: bool) -> Layer {
        Layer::Conv(Conv2d {
            name: format!("{name}.conv"),
            cin,
            cout,
            k: self.kernel_size,
            stride: 2,
            pad: self.kernel_size / 2,
            bias,
        })
    }

    fn leaky(name: &str) -> Layer {
        Layer::Act {
            name: format!("{name}.act"),
            act: Activation::LeakyRelu(LEAKY_SLOPE),
        }
    }

    fn overhead_branch(&self) -> Sequential {
        Sequential::new(vec![
            self.conv("ovh", CHANNELS, self.overhead_channels(), true),
            Self::leaky("ovh"),
        ])
    }

    /// Trunk plus head: fused input → pooled feature vector.
    fn body(&self) -> Sequential {
        let widths = self.trunk_widths();
        let mut layers = Vec::new();
        let mut cin = CHANNELS + self.overhead_channels();
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("trunk{}", i + 1);
            layers.push(self.conv(&name, cin, w, i == 0));
            if i > 0 {
                layers.push(Layer::Bn(BatchNorm2d::new(format!("{name}.bn"), w)));
            }
            layers.push(Self::leaky(&name));
            cin = w;
        }
        layers.push(Layer::Conv(Conv2d {
            name: "head.conv".into(),
            cin,
            cout: self.feature_dim,
            k: 1,
            stride: 1,
            pad: 0,
            bias: true,
        }));
        layers.push(Self::leaky("head"));
        layers.push(Layer::Pool {
            name: "head.pool".into(),
        });
        Sequential::new(layers)
    }

    fn output(&self) -> Sequential {
        Sequential::new(vec![Layer::Conv(Conv2d {
            name: "out.linear".into(),
            cin: self.feature_dim,
            cout: 1,
            k: 1,
            stride: 1,
            pad: 0,
            bias: true,
        })])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T = f32> {
    config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

pub struct DiscriminatorCache<T> {
    overhead: Vec<Cache<T>>,
    body: Vec<Cache<T>>,
    output: Vec<Cache<T>>,
}

/// What fills the ground-image slot when extracting features from an
/// overhead tile alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundSlot {
    /// The generator's view of the same tile.
    #[default]
    Generated,
    /// An all-zero (mid-gray) image.
    Zero,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for part in [config.overhead_branch(), config.body(), config.output()] {
            part.init(&mut params, &mut buffers, &mut rng, INIT_STD);
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn from_parts(
        config: DiscriminatorConfig,
        params: ParamStore<T>,
        buffers: ParamStore<T>,
    ) -> Result<Self> {
        let fresh = Self::new(config, Seed(0))?;
        fresh
            .params
            .check_congruent(&params, "discriminator parameters")?;
        fresh
            .buffers
            .check_congruent(&buffers, "discriminator buffers")?;
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config,
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn apply_stat_updates(&mut self, updates: StatUpdates<T>) {
        crate::nn::apply_stat_updates(&mut self.buffers, updates);
    }

    /// Pooled head activations, `[feature_dim][N][1][1]`, with caches.
    pub fn features_forward(
        &self,
        ground: &Tensor<T>,
        overhead: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>, Vec<Cache<T>>)> {
        if ground.n != overhead.n {
            return Err(Error::InvalidInput(format!(
                "{} ground images paired with {} overhead images",
                ground.n, overhead.n
            )));
        }
        let (reduced, ovh_cache) = self.config.overhead_branch().forward(
            &self.params,
            &self.buffers,
            overhead.clone(),
            mode,
            updates,
        )?;
        if (reduced.h, reduced.w) != (ground.h, ground.w) {
            return Err(Error::InvalidInput(format!(
                "reduced overhead is {}x{} but ground image is {}x{}",
                reduced.h, reduced.w, ground.h, ground.w
            )));
        }
        let fused = Tensor::concat_channels(&[ground, &reduced]);
        let (features, body_cache) =
            self.config
                .body()
                .forward(&self.params, &self.buffers, fused, mode, updates)?;
        Ok((features, ovh_cache, body_cache))
    }

    /// The linear output map applied to pooled features: pre-sigmoid logits.
    pub fn linear(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut updates = Vec::new();
        self.config.output().forward(
            &self.params,
            &self.buffers,
            features.clone(),
            Mode::Eval,
            &mut updates,
        )
    }

    /// Logits for a batch, `[1][N][1][1]`, with everything needed for backprop.
    pub fn forward(
        &self,
        ground: &Tensor<T>,
        overhead: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, DiscriminatorCache<T>, StatUpdates<T>)> {
        let mut updates = Vec::new();
        let (features, ovh, body) = self.features_forward(ground, overhead, mode, &mut updates)?;
        let (logits, output) = self.linear(&features)?;
        Ok((
            logits,
            DiscriminatorCache {
                overhead: ovh,
                body,
                output,
            },
            updates,
        ))
    }

    /// Backprop from logit gradients. Parameter gradients go to `grads` when
    /// given; the ground-image gradient is returned when `need_ground_grad`.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        d_logits: Tensor<T>,
        mut grads: Option<&mut ParamStore<T>>,
        need_ground_grad: bool,
    ) -> Option<Tensor<T>> {
        let d_features = self
            .config
            .output()
            .backward(
                &self.params,
                &cache.output,
                d_logits,
                grads.as_deref_mut(),
                true,
            )
            .expect("feature gradient");
        let need_fused = need_ground_grad || grads.is_some();
        let d_fused = self.config.body().backward(
            &self.params,
            &cache.body,
            d_features,
            grads.as_deref_mut(),
            need_fused,
        )?;
        let mut parts = d_fused.split_channels(&[CHANNELS, self.config.overhead_channels()]);
        let d_reduced = parts.pop().expect("two parts");
        let d_ground = parts.pop().expect("two parts");
        if let Some(g) = grads {
            self.config.overhead_branch().backward(
                &self.params,
                &cache.overhead,
                d_reduced,
                Some(g),
                false,
            );
        }
        need_ground_grad.then_some(d_ground)
    }

    /// Eval-mode feature vectors of (ground, overhead) pairs.
    pub fn extract_features_from_pairs(
        &self,
        grounds: &[&GroundImage],
        overheads: &[&OverheadImage],
    ) -> Result<Vec<Vec<T>>> {
        if grounds.len() != overheads.len() {
            return Err(Error::InvalidInput("ground/overhead count mismatch".into()));
        }
        let mut out = Vec::with_capacity(grounds.len());
        for (g, o) in grounds.chunks(EVAL_CHUNK).zip(overheads.chunks(EVAL_CHUNK)) {
            let mut updates = Vec::new();
            let (features, _, _) = self.features_forward(
                &Tensor::from_images(g),
                &Tensor::from_images(o),
                Mode::Eval,
                &mut updates,
            )?;
            out.extend((0..g.len()).map(|i| features.column(i)));
        }
        Ok(out)
    }

    pub fn extract_features_from_pair(
        &self,
        ground: &GroundImage,
        overhead: &OverheadImage,
    ) -> Result<Vec<T>> {
        Ok(self
            .extract_features_from_pairs(&[ground], &[overhead])?
            .pop()
            .expect("one pair in, one vector out"))
    }

    /// Real/fake probability in eval mode: `sigmoid(linear(features))`.
    pub fn discriminate(&self, ground: &GroundImage, overhead: &OverheadImage) -> Result<T> {
        let features = self.extract_features_from_pair(ground, overhead)?;
        let logit = self.linear_logit(&features)?;
        Ok(crate::nn::sigmoid(logit))
    }

    /// Linear output for one pooled feature vector.
    pub fn linear_logit(&self, features: &[T]) -> Result<T> {
        let t = Tensor::from_vec(features.len(), 1, 1, 1, features.to_vec());
        let (logits, _) = self.linear(&t)?;
        Ok(logits.data[0])
    }
}

/// Overhead-only feature vectors: the ground slot holds the generated view
/// (or zeros), the overhead slot the tile itself.
pub fn extract_features<T: Real>(
    generator: &Generator<T>,
    discriminator: &Discriminator<T>,
    overheads: &[&OverheadImage],
    slot: GroundSlot,
) -> Result<Vec<Vec<T>>> {
    let grounds = match slot {
        GroundSlot::Generated => generator.generate_batch(overheads)?,
        GroundSlot::Zero => {
            let zero = GroundImage::filled([0.0; 3])?;
            vec![zero; overheads.len()]
        }
    };
    let refs: Vec<&GroundImage> = grounds.iter().collect();
    discriminator.extract_features_from_pairs(&refs, overheads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GeneratorConfig, Variant};
    use crate::scene::{make_world, render_ground, render_overhead};
    use crate::types::LandCover;

    fn pair(seed: u64, klass: LandCover) -> (GroundImage, OverheadImage) {
        let w = make_world(Seed(seed), klass);
        (render_ground(&w), render_overhead(&w))
    }

    #[test]
    fn head_is_1024_wide_and_output_is_scalar() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::tiny(), Seed(1)).unwrap();
        assert_eq!(d.params.shape("head.conv.weight").unwrap()[0], 1024);
        assert_eq!(
            d.params.shape("out.linear.weight").unwrap(),
            &[1, 1024, 1, 1]
        );
        let (g, o) = pair(1, LandCover::Rural);
        assert_eq!(d.extract_features_from_pair(&g, &o).unwrap().len(), 1024);
    }

    #[test]
    fn zero_network_outputs_half_and_zero_features() {
        let mut d = Discriminator::<f32>::new(DiscriminatorConfig::tiny(), Seed(1)).unwrap();
        d.params.fill(0.0);
        let (g, o) = pair(2, LandCover::Urban);
        assert_eq!(d.discriminate(&g, &o).unwrap(), 0.5);
        assert!(d
            .extract_features_from_pair(&g, &o)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn discriminate_is_sigmoid_of_linear_features() {
        for s in 0..20 {
            let d = Discriminator::<f32>::new(DiscriminatorConfig::tiny(), Seed(s)).unwrap();
            let (g, o) = pair(
                s + 100,
                if s % 2 == 0 {
                    LandCover::Urban
                } else {
                    LandCover::Rural
                },
            );
            let p = d.discriminate(&g, &o).unwrap();
            let f = d.extract_features_from_pair(&g, &o).unwrap();
            let z = d.linear_logit(&f).unwrap();
            assert!(z.is_finite());
            assert_eq!(p.to_bits(), crate::nn::sigmoid(z).to_bits());
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn pooled_features_equal_spatial_means() {
        let d = Discriminator::<f64>::new(DiscriminatorConfig::tiny(), Seed(3)).unwrap();
        let (g, o) = pair(3, LandCover::Urban);
        let gt = Tensor::<f64>::from_images(&[&g]);
        let ot = Tensor::<f64>::from_images(&[&o]);
        let mut updates = Vec::new();
        let (reduced, _) = d
            .config
            .overhead_branch()
            .forward(&d.params, &d.buffers, ot.clone(), Mode::Eval, &mut updates)
            .unwrap();
        let fused = Tensor::concat_channels(&[&gt, &reduced]);
        let mut body = d.config.body();
        body.layers.pop(); // drop pooling to expose the 4×4 head map
        let (head, _) = body
            .forward(&d.params, &d.buffers, fused, Mode::Eval, &mut updates)
            .unwrap();
        assert_eq!((head.h, head.w), (4, 4));
        let pooled = d.extract_features_from_pair(&g, &o).unwrap();
        for c in 0..1024 {
            let mut acc = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    acc += head.at(c, 0, y, x);
                }
            }
            assert!((pooled[c] - acc / 16.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overhead_only_features_are_deterministic() {
        let gen = Generator::<f32>::new(GeneratorConfig::tiny(Variant::Concat), Seed(4)).unwrap();
        let d = Discriminator::<f32>::new(DiscriminatorConfig::tiny(), Seed(5)).unwrap();
        let (_, o) = pair(6, LandCover::Rural);
        for slot in [GroundSlot::Generated, GroundSlot::Zero] {
            let a = extract_features(&gen, &d, &[&o], slot).unwrap();
            let b = extract_features(&gen, &d, &[&o], slot).unwrap();
            assert_eq!(a, b);
            assert_eq!(a[0].len(), 1024);
        }
    }
}

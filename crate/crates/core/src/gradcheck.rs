//! Finite-difference verification of analytic gradients, in `f64`.

use std::cell::RefCell;

use serde::Serialize;

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Variant};
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{
    Activation, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Mode, ParamStore, Sequential, Tensor,
};
use crate::training::{
    discriminator_loss_value, discriminator_objective, generator_loss_value, generator_objective,
    GenLossForm,
};
use crate::types::{PairedSample, Seed};

pub const STEP: f64 = 1e-4;
pub const MAX_PARAMETERS: usize = 5_000;
/// Below this magnitude the absolute difference is used instead of the
/// relative one.
pub const ABS_FLOOR: f64 = 1e-8;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `name[index]` of the worst-matching scalar.
    pub worst_parameter: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, one scalar at a time.
pub fn gradient_check(
    loss: impl Fn(&ParamStore<f64>) -> f64,
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let n = params.num_scalars();
    if n > MAX_PARAMETERS {
        return Err(Error::InvalidInput(format!(
            "{n} parameters; finite differences are limited to {MAX_PARAMETERS}"
        )));
    }
    params.check_congruent(analytic, "analytic gradient")?;
    let mut probe = params.clone();
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_owned()).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        n_checked: 0,
        tolerance,
        passed: true,
    };
    for name in &names {
        for i in 0..params.get(name).len() {
            let x = params.get(name)[i];
            probe.get_mut(name)[i] = x + STEP;
            let up = loss(&probe);
            probe.get_mut(name)[i] = x - STEP;
            let down = loss(&probe);
            probe.get_mut(name)[i] = x;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(name)[i];
            let err = relative_error(a, numeric);
            report.n_checked += 1;
            if !(err <= report.max_relative_error) {
                report.max_relative_error = err;
                report.worst_parameter = format!("{name}[{i}]");
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}

/// Reduced generator used for gradient checks: concat taps, 3×3 kernels,
/// unit base width. About 1,900 parameters.
pub fn check_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        base_width: 1,
        kernel_size: 3,
        ..GeneratorConfig::tiny(Variant::Concat)
    }
}

/// Reduced discriminator for gradient checks. About 630 parameters.
pub fn check_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        base_width: 1,
        kernel_size: 3,
        feature_dim: 16,
        ..DiscriminatorConfig::tiny()
    }
}

/// Inputs shared by both checks: real pairs plus fakes from `gen`.
pub struct CheckBatch {
    pub overhead: Tensor<f64>,
    pub real: Tensor<f64>,
    pub fake: Tensor<f64>,
}

impl CheckBatch {
    pub fn new(samples: &[&PairedSample], gen: &Generator<f64>) -> Result<Self> {
        let overheads: Vec<_> = samples.iter().map(|s| &s.overhead).collect();
        let grounds: Vec<_> = samples.iter().map(|s| &s.ground).collect();
        let overhead = Tensor::from_images(&overheads);
        let (fake, _, _) = gen.forward(&overhead, None, Mode::Train)?;
        Ok(Self {
            real: Tensor::from_images(&grounds),
            overhead,
            fake,
        })
    }
}

/// Checks the discriminator loss gradient with respect to every
/// discriminator parameter, holding the fakes fixed.
pub fn check_discriminator(
    disc: &Discriminator<f64>,
    batch: &CheckBatch,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let obj = discriminator_objective(disc, &batch.overhead, &batch.real, &batch.fake)?;
    let probe = RefCell::new(disc.clone());
    let loss = |p: &ParamStore<f64>| {
        let mut d = probe.borrow_mut();
        d.params = p.clone();
        discriminator_loss_value(&d, &batch.overhead, &batch.real, &batch.fake)
            .expect("finite forward pass")
    };
    gradient_check(loss, &disc.params, &obj.grads, tolerance)
}

/// Checks the generator loss gradient with respect to every generator
/// parameter, through a fixed discriminator.
pub fn check_generator(
    gen: &Generator<f64>,
    disc: &Discriminator<f64>,
    overhead: &Tensor<f64>,
    form: GenLossForm,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let obj = generator_objective(gen, disc, overhead, None, form)?;
    let probe = RefCell::new(gen.clone());
    let loss = |p: &ParamStore<f64>| {
        let mut g = probe.borrow_mut();
        g.params = p.clone();
        generator_loss_value(&g, disc, overhead, None, form).expect("finite forward pass")
    };
    gradient_check(loss, &gen.params, &obj.grads, tolerance)
}

/// Fresh reduced models in `f64`, seeded.
pub fn check_models(seed: Seed) -> Result<(Generator<f64>, Discriminator<f64>)> {
    Ok((
        Generator::new(check_generator_config(), seed.derive(1))?,
        Discriminator::new(check_discriminator_config(), seed.derive(2))?,
    ))
}

struct LayerCase {
    label: &'static str,
    net: Sequential,
    input: (usize, usize, usize, usize),
    mode: Mode,
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Layer {
    Layer::Conv(Conv2d {
        name: "conv".into(),
        cin,
        cout,
        k,
        stride,
        pad: k / 2,
        bias,
    })
}

fn act(act: Activation) -> Layer {
    Layer::Act {
        name: "act".into(),
        act,
    }
}

fn layer_cases() -> Vec<LayerCase> {
    let case = |label, layers, input, mode| LayerCase {
        label,
        net: Sequential::new(layers),
        input,
        mode,
    };
    let bn = || Layer::Bn(BatchNorm2d::new("bn", 3));
    vec![
        case(
            "conv k5 s2",
            vec![conv(2, 3, 5, 2, true)],
            (2, 2, 8, 8),
            Mode::Train,
        ),
        case(
            "conv-transpose k5 s2",
            vec![Layer::ConvT(ConvTranspose2d {
                name: "convt".into(),
                cin: 3,
                cout: 2,
                k: 5,
                stride: 2,
                pad: 2,
                out_pad: 1,
                bias: true,
            })],
            (3, 2, 4, 4),
            Mode::Train,
        ),
        case(
            "conv + batch norm (train) + leaky relu",
            vec![
                conv(2, 3, 3, 1, false),
                bn(),
                act(Activation::LeakyRelu(0.2)),
            ],
            (2, 3, 5, 5),
            Mode::Train,
        ),
        case(
            "conv + batch norm (eval)",
            vec![conv(2, 3, 3, 1, false), bn()],
            (2, 2, 5, 5),
            Mode::Eval,
        ),
        case(
            "relu",
            vec![conv(2, 2, 1, 1, true), act(Activation::Relu)],
            (2, 2, 4, 4),
            Mode::Train,
        ),
        case(
            "tanh",
            vec![conv(2, 2, 1, 1, true), act(Activation::Tanh)],
            (2, 2, 4, 4),
            Mode::Train,
        ),
        case(
            "sigmoid",
            vec![conv(2, 2, 1, 1, true), act(Activation::Sigmoid)],
            (2, 2, 4, 4),
            Mode::Train,
        ),
        case(
            "global average pool",
            vec![
                conv(2, 3, 1, 1, true),
                Layer::Pool {
                    name: "pool".into(),
                },
            ],
            (2, 2, 4, 4),
            Mode::Train,
        ),
    ]
}

fn normal_vec(rng: &mut impl rand::Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
        .collect()
}

/// Worse of two reports, keeping the combined count.
fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let n = a.n_checked + b.n_checked;
    let mut worst = if b.max_relative_error > a.max_relative_error {
        b
    } else {
        a
    };
    worst.n_checked = n;
    worst
}

/// Checks every layer kind in isolation on small random inputs against a
/// random linear read-out, covering parameter and input gradients.
pub fn check_layers(seed: Seed, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seed.rng();
    let mut out = Vec::new();
    for case in layer_cases() {
        let mut params = ParamStore::<f64>::new();
        let mut buffers = ParamStore::<f64>::new();
        case.net.init(&mut params, &mut buffers, &mut rng, 0.5);
        // Move off the symmetric init (unit scales, zero shifts and stats).
        for (_, p) in params.iter_mut() {
            for v in p.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.2 * z;
            }
        }
        for (name, p) in buffers.iter_mut() {
            for v in p.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = if name.ends_with("running_var") {
                    0.5 + z.abs()
                } else {
                    0.3 * z
                };
            }
        }
        let (c, n, h, w) = case.input;
        let x = Tensor::from_vec(c, n, h, w, normal_vec(&mut rng, c * n * h * w, 1.0));
        let forward = |p: &ParamStore<f64>, x: Tensor<f64>| {
            let mut updates = Vec::new();
            case.net
                .forward(p, &buffers, x, case.mode, &mut updates)
                .expect("finite forward pass")
        };
        let (y, caches) = forward(&params, x.clone());
        let readout = normal_vec(&mut rng, y.len(), 1.0);
        let dot = |y: &Tensor<f64>| y.data.iter().zip(&readout).map(|(a, b)| a * b).sum::<f64>();
        let dy = Tensor::from_vec(y.c, y.n, y.h, y.w, readout.clone());
        let mut grads = params.zeros_like();
        let dx = case
            .net
            .backward(&params, &caches, dy, Some(&mut grads), true)
            .expect("input gradient");
        let param_report = gradient_check(
            |p| dot(&forward(p, x.clone()).0),
            &params,
            &grads,
            tolerance,
        )?;
        let mut input = ParamStore::new();
        input.insert("input", vec![c, n, h, w], x.data.clone());
        let mut d_input = ParamStore::new();
        d_input.insert("input", vec![c, n, h, w], dx.data);
        let input_report = gradient_check(
            |q| {
                let xi = Tensor::from_vec(c, n, h, w, q.get("input").to_vec());
                dot(&forward(&params, xi).0)
            },
            &input,
            &d_input,
            tolerance,
        )?;
        out.push((case.label.to_owned(), merge(param_report, input_report)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_absolute_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(0.0, 3e-10), 3e-10);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", vec![3], vec![0.5, -1.0, 2.0]);
        let r = gradient_check(|_| 4.2, &p, &p.zeros_like(), 1e-3).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_relative_error, 0.0);
        assert_eq!(r.n_checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", vec![2], vec![1.0, 2.0]);
        let loss = |q: &ParamStore<f64>| q.get("w").iter().map(|x| x * x).sum::<f64>();
        let mut good = p.zeros_like();
        good.get_mut("w").copy_from_slice(&[2.0, 4.0]);
        assert!(gradient_check(loss, &p, &good, 1e-6).unwrap().passed);
        let mut bad = good.clone();
        bad.get_mut("w")[1] = 4.1;
        let r = gradient_check(loss, &p, &bad, 1e-3).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_parameter, "w[1]");
    }

    #[test]
    fn oversized_models_are_refused() {
        let mut p = ParamStore::<f64>::new();
        p.insert_filled("w", vec![MAX_PARAMETERS + 1], 0.0);
        assert!(gradient_check(|_| 0.0, &p, &p.zeros_like(), 1e-3).is_err());
    }

    #[test]
    fn every_layer_kind_matches_finite_differences() {
        for (label, r) in check_layers(Seed(3), DEFAULT_TOLERANCE).unwrap() {
            assert!(r.passed, "{label}: {r:?}");
            assert!(r.n_checked > 0);
        }
    }

    #[test]
    fn reduced_models_fit_the_budget() {
        let (g, d) = check_models(Seed(0)).unwrap();
        assert!(
            g.num_parameters() <= MAX_PARAMETERS,
            "{}",
            g.num_parameters()
        );
        assert!(
            d.num_parameters() <= MAX_PARAMETERS,
            "{}",
            d.num_parameters()
        );
    }
}

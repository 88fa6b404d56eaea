//! Inception score, the synthetic scene classifier it relies on, and
//! land-cover classification from feature vectors.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, push_store, take_store, write_atomic};
use crate::nn::{Activation, Adam, AdamState, Conv2d, Layer, Mode, ParamStore, Sequential, Tensor};
use crate::types::{GroundImage, LandCover, OverheadImage, PairedSample, Seed, OVERHEAD_SIDE};

/// Probabilities are clamped to this floor inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_SPLITS: usize = 10;
/// Allowed deviation of a classifier output's sum from 1.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;
pub const SCENE_CLASSIFIER_KIND: &str = "scene_classifier";
pub const SCENE_TARGET_ACCURACY: f64 = 0.95;
pub const SVM_C: f64 = 1.0;
pub const PATCH_SIDE: usize = 10;
pub const PATCH_START: usize = (OVERHEAD_SIDE - PATCH_SIDE) / 2;

/// Maps a ground-level image to a distribution over classes.
pub trait ClassifierInterface {
    fn num_classes(&self) -> usize;

    fn predict(&self, image: &GroundImage) -> Result<Vec<f64>>;

    fn predict_batch(&self, images: &[&GroundImage]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| self.predict(img)).collect()
    }
}

/// Returns the same distribution for every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantClassifier {
    pub distribution: Vec<f64>,
}

impl ClassifierInterface for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.distribution.len()
    }

    fn predict(&self, _image: &GroundImage) -> Result<Vec<f64>> {
        Ok(self.distribution.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub inception_score_mean: f64,
    pub inception_score_std: f64,
    pub n_images: usize,
    pub n_splits: usize,
}

fn check_distribution(p: &[f64], classes: usize, index: usize) -> Result<()> {
    let valid = p.len() == classes
        && classes >= 2
        && p.iter().all(|v| v.is_finite() && *v >= 0.0)
        && (p.iter().sum::<f64>() - 1.0).abs() <= DISTRIBUTION_TOLERANCE;
    if valid {
        Ok(())
    } else {
        Err(Error::NotADistribution { index })
    }
}

/// Score of one split: `exp(mean_x KL(p(y|x) || p̄))`.
fn split_score(preds: &[&[f64]]) -> f64 {
    let classes = preds[0].len();
    let n = preds.len() as f64;
    let mut marginal = vec![0.0; classes];
    for p in preds {
        for (m, v) in marginal.iter_mut().zip(*p) {
            *m += v;
        }
    }
    let log_marginal: Vec<f64> = marginal
        .iter()
        .map(|m| (m / n).max(LOG_FLOOR).ln())
        .collect();
    let kl_sum: f64 = preds
        .iter()
        .map(|p| {
            p.iter()
                .zip(&log_marginal)
                .map(|(&v, &lm)| v * (v.max(LOG_FLOOR).ln() - lm))
                .sum::<f64>()
        })
        .sum();
    (kl_sum / n).exp()
}

/// Inception score from precomputed class posteriors, one row per image.
///
/// Images are shuffled with `seed` and cut into `n_splits` contiguous,
/// near-equal splits. Within a split, images are visited in their original
/// order, so a single split gives the same value for every seed.
pub fn inception_score_from_predictions(
    preds: &[Vec<f64>],
    n_splits: usize,
    seed: Seed,
) -> Result<ScoreReport> {
    let n = preds.len();
    if n_splits == 0 || n < n_splits {
        return Err(Error::InvalidInput(format!(
            "need n_images >= n_splits >= 1, got {n} images and {n_splits} splits"
        )));
    }
    let classes = preds[0].len();
    for (i, p) in preds.iter().enumerate() {
        check_distribution(p, classes, i)?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.rng());
    let scores: Vec<f64> = (0..n_splits)
        .map(|s| {
            let mut members = order[s * n / n_splits..(s + 1) * n / n_splits].to_vec();
            members.sort_unstable();
            let rows: Vec<&[f64]> = members.iter().map(|&i| preds[i].as_slice()).collect();
            split_score(&rows)
        })
        .collect();
    let k = n_splits as f64;
    let mean = scores.iter().sum::<f64>() / k;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k;
    Ok(ScoreReport {
        inception_score_mean: mean,
        inception_score_std: var.sqrt(),
        n_images: n,
        n_splits,
    })
}

pub fn inception_score(
    images: &[&GroundImage],
    classifier: &dyn ClassifierInterface,
    n_splits: usize,
    seed: Seed,
) -> Result<ScoreReport> {
    let preds = classifier.predict_batch(images)?;
    inception_score_from_predictions(&preds, n_splits, seed)
}

// ---------------------------------------------------------------------------
// Scene classifier

const SCENE_WIDTHS: [usize; 2] = [8, 16];
const SCENE_INIT_STD: f64 = 0.1;
const SCENE_BATCH: usize = 32;
const SCENE_EPOCHS: usize = 30;
const SCENE_HOLDOUT: f64 = 0.2;
const SCENE_EVAL_CHUNK: usize = 64;

fn scene_network(classes: usize) -> Sequential {
    let conv = |name: &str, cin, cout, k, stride, pad| {
        Layer::Conv(Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            bias: true,
        })
    };
    let relu = |name: &str| Layer::Act {
        name: format!("{name}.act"),
        act: Activation::Relu,
    };
    let [w1, w2] = SCENE_WIDTHS;
    Sequential::new(vec![
        conv("c1", 3, w1, 4, 2, 1),
        relu("c1"),
        conv("c2", w1, w2, 4, 2, 1),
        relu("c2"),
        Layer::Pool {
            name: "pool".into(),
        },
        conv("out", w2, classes, 1, 1, 0),
    ])
}

/// Column-wise softmax of a `classes × n` logit tensor.
fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (classes, n) = (logits.c, logits.n);
    (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..classes)
                .map(|c| logits.data[c * n + i] as f64)
                .collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Small convolutional rural/urban classifier over ground-level views.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneClassifier {
    classes: usize,
    params: ParamStore<f32>,
    holdout_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    classes: usize,
    holdout_accuracy: f64,
}

impl SceneClassifier {
    pub fn holdout_accuracy(&self) -> f64 {
        self.holdout_accuracy
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn logits(&self, images: &[&GroundImage]) -> Result<(Tensor<f32>, Vec<crate::nn::Cache<f32>>)> {
        let mut updates = Vec::new();
        scene_network(self.classes).forward(
            &self.params,
            &ParamStore::new(),
            Tensor::from_images(images),
            Mode::Eval,
            &mut updates,
        )
    }

    pub fn predict_class(&self, image: &GroundImage) -> Result<LandCover> {
        let p = self.predict(image)?;
        Ok(LandCover::from_index(argmax(&p)).expect("two-class classifier"))
    }

    pub fn accuracy(&self, samples: &[&PairedSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let images: Vec<&GroundImage> = samples.iter().map(|s| &s.ground).collect();
        let preds = self.predict_batch(&images)?;
        let correct = preds
            .iter()
            .zip(samples)
            .filter(|(p, s)| s.label.map(LandCover::index) == Some(argmax(p)))
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = SceneMeta {
            classes: self.classes,
            holdout_accuracy: self.holdout_accuracy,
        };
        let mut tensors = Vec::new();
        push_store(&mut tensors, "param.", &self.params);
        encode_container(
            SCENE_CLASSIFIER_KIND,
            serde_json::to_value(meta).expect("meta serializes"),
            &tensors,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (meta, mut tensors) = decode_container(path, bytes, SCENE_CLASSIFIER_KIND)?;
        let meta: SceneMeta = serde_json::from_value(meta)
            .map_err(|e| Error::checkpoint(path, format!("bad metadata: {e}")))?;
        let params = take_store(&mut tensors, "param.");
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::checkpoint(
                path,
                format!("unexpected tensor `{extra}`"),
            ));
        }
        let mut expected = ParamStore::<f32>::new();
        scene_network(meta.classes).init(
            &mut expected,
            &mut ParamStore::new(),
            &mut Seed(0).rng(),
            SCENE_INIT_STD,
        );
        expected
            .check_congruent(&params, "scene classifier parameters")
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Ok(Self {
            classes: meta.classes,
            params,
            holdout_accuracy: meta.holdout_accuracy,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

impl ClassifierInterface for SceneClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, image: &GroundImage) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[image])?.pop().expect("one image in"))
    }

    fn predict_batch(&self, images: &[&GroundImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(SCENE_EVAL_CHUNK) {
            out.extend(softmax_rows(&self.logits(chunk)?.0));
        }
        Ok(out)
    }
}

/// Trains the scene classifier on labeled ground-level views.
///
/// A seeded fifth of the samples is held out. Training runs a fixed epoch
/// budget so the posteriors become confident; missing the holdout accuracy
/// target at the end is a fault.
pub fn train_scene_classifier(samples: &[PairedSample], seed: Seed) -> Result<SceneClassifier> {
    let labels: Vec<usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label.map(LandCover::index).ok_or_else(|| {
                Error::InvalidInput(format!("sample {i} ({}) has no label", s.location_id))
            })
        })
        .collect::<Result<_>>()?;
    let classes = LandCover::ALL.len();
    if (0..classes).any(|c| !labels.contains(&c)) {
        return Err(Error::SingleClass);
    }
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((samples.len() as f64 * SCENE_HOLDOUT).round() as usize).max(1);
    if samples.len() < n_hold + 2 {
        return Err(Error::InvalidInput(format!(
            "scene classifier needs at least {} samples",
            n_hold + 2
        )));
    }
    let (hold, mut train) = (order[..n_hold].to_vec(), order[n_hold..].to_vec());
    let hold_refs: Vec<&PairedSample> = hold.iter().map(|&i| &samples[i]).collect();

    let net = scene_network(classes);
    let mut params = ParamStore::new();
    net.init(
        &mut params,
        &mut ParamStore::new(),
        &mut rng,
        SCENE_INIT_STD,
    );
    let adam = Adam {
        lr: 1e-3,
        beta1: 0.9,
        ..Adam::default()
    };
    let mut state = AdamState::new(&params);
    let mut model = SceneClassifier {
        classes,
        params,
        holdout_accuracy: 0.0,
    };
    for _ in 0..SCENE_EPOCHS {
        train.shuffle(&mut rng);
        for batch in train.chunks(SCENE_BATCH) {
            let images: Vec<&GroundImage> = batch.iter().map(|&i| &samples[i].ground).collect();
            let (logits, caches) = model.logits(&images)?;
            let probs = softmax_rows(&logits);
            let n = batch.len();
            let mut dy = Tensor::zeros(classes, n, 1, 1);
            for (i, (&s, p)) in batch.iter().zip(&probs).enumerate() {
                for c in 0..classes {
                    let target = if labels[s] == c { 1.0 } else { 0.0 };
                    dy.data[c * n + i] = ((p[c] - target) / n as f64) as f32;
                }
            }
            let mut grads = model.params.zeros_like();
            net.backward(&model.params, &caches, dy, Some(&mut grads), false);
            adam.step(&mut model.params, &grads, &mut state);
        }
    }
    model.holdout_accuracy = model.accuracy(&hold_refs)?;
    if model.holdout_accuracy < SCENE_TARGET_ACCURACY {
        return Err(Error::ClassifierUnderfit {
            accuracy: model.holdout_accuracy,
            required: SCENE_TARGET_ACCURACY,
        });
    }
    Ok(model)
}

/// Either a trained scene classifier or a constant stub, as stored on disk.
pub enum StoredClassifier {
    Scene(SceneClassifier),
    Constant(ConstantClassifier),
}

impl StoredClassifier {
    /// Loads a scene-classifier container, or a JSON constant stub
    /// (`{"distribution": [..]}`).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(&crate::io::CHECKPOINT_MAGIC) {
            return SceneClassifier::decode(path, &bytes).map(Self::Scene);
        }
        let stub: ConstantClassifier =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: path.to_owned(),
                source,
            })?;
        check_distribution(&stub.distribution, stub.distribution.len(), 0)?;
        Ok(Self::Constant(stub))
    }

    pub fn as_dyn(&self) -> &dyn ClassifierInterface {
        match self {
            Self::Scene(c) => c,
            Self::Constant(c) => c,
        }
    }
}

// ---------------------------------------------------------------------------
// Land-cover classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    CganFeatures,
    GrayscalePatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// `confusion[actual][predicted]`, indexed rural = 0, urban = 1.
    pub confusion: [[usize; 2]; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub feature_source: FeatureSource,
}

/// Linear soft-margin SVM with a bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    /// Weights over standardized features; the last entry is the bias.
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const SVM_MAX_EPOCHS: usize = 2000;
const SVM_TOLERANCE: f64 = 1e-3;

impl LinearSvm {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        z.push(1.0);
        z
    }

    /// Minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ w·xᵢ)` by dual coordinate descent,
    /// with labels `yᵢ ∈ {−1, +1}` and features standardized on this set.
    pub fn fit(features: &[&[f64]], labels: &[bool], c: f64, seed: Seed) -> Self {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for x in features {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in features {
            for ((s, v), m) in scale.iter_mut().zip(*x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut svm = Self {
            weights: vec![0.0; d + 1],
            mean,
            scale,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|x| svm.standardize(x)).collect();
        let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let q: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
        let mut alpha = vec![0.0; xs.len()];
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut rng = seed.rng();
        let w = &mut svm.weights;
        for _ in 0..SVM_MAX_EPOCHS {
            order.shuffle(&mut rng);
            let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
            for &i in &order {
                let x = &xs[i];
                let g = ys[i] * x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() - 1.0;
                let pg = if alpha[i] <= 0.0 {
                    g.min(0.0)
                } else if alpha[i] >= c {
                    g.max(0.0)
                } else {
                    g
                };
                pg_max = pg_max.max(pg);
                pg_min = pg_min.min(pg);
                if pg != 0.0 {
                    let old = alpha[i];
                    alpha[i] = (old - g / q[i]).clamp(0.0, c);
                    let step = (alpha[i] - old) * ys[i];
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj += step * xj;
                    }
                }
            }
            if pg_max - pg_min < SVM_TOLERANCE {
                break;
            }
        }
        svm
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.standardize(x)
            .iter()
            .zip(&self.weights)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

/// Seeded shuffle, then the first `n_train` samples train a linear SVM and
/// the remainder measure accuracy. Urban is the positive class.
pub fn classify_land_cover(
    features: &[Vec<f64>],
    labels: &[LandCover],
    n_train: usize,
    seed: Seed,
    feature_source: FeatureSource,
) -> Result<ClassificationReport> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} feature vectors but {} labels",
            labels.len()
        )));
    }
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidInput(format!(
            "n_train must be in 1..{n}, got {n_train}"
        )));
    }
    let d = features[0].len();
    if d == 0
        || features
            .iter()
            .any(|f| f.len() != d || f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidInput(
            "feature vectors must be finite and of equal, nonzero length".into(),
        ));
    }
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, test) = order.split_at(n_train);
    let is_urban = |i: usize| labels[i] == LandCover::Urban;
    let train_x: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
    let train_y: Vec<bool> = train.iter().map(|&i| is_urban(i)).collect();
    if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
        return Err(Error::SingleClass);
    }
    let svm = LinearSvm::fit(&train_x, &train_y, SVM_C, Seed(rand::Rng::random(&mut rng)));
    let mut confusion = [[0usize; 2]; 2];
    for &i in test {
        let predicted = if svm.predict(&features[i]) { 1 } else { 0 };
        confusion[labels[i].index()][predicted] += 1;
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(ClassificationReport {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        n_train,
        n_test: test.len(),
        feature_source,
    })
}

/// Row-major luma (unweighted RGB mean) of the centered 10×10 patch.
pub fn grayscale_patch_features(overhead: &OverheadImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(PATCH_SIDE * PATCH_SIDE);
    for row in PATCH_START..PATCH_START + PATCH_SIDE {
        for col in PATCH_START..PATCH_START + PATCH_SIDE {
            let [r, g, b] = overhead.rgb(row, col);
            out.push((r as f64 + g as f64 + b as f64) / 3.0);
        }
    }
    out
}

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};
use crate::types::{Image, CHANNELS};

/// Batch of feature maps in `[C][N][H][W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, n, y, x)]
    }

    /// Values of one channel across the batch.
    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.n * self.h * self.w;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks images (row-major HWC) into a `[3][N][S][S]` batch.
    pub fn from_images<const S: usize>(images: &[&Image<S>]) -> Self {
        let n = images.len();
        let mut t = Self::zeros(CHANNELS, n, S, S);
        for (i, img) in images.iter().enumerate() {
            for (p, px) in img.pixels().chunks_exact(CHANNELS).enumerate() {
                let (y, x) = (p / S, p % S);
                for (ch, &v) in px.iter().enumerate() {
                    let idx = t.index(ch, i, y, x);
                    t.data[idx] = T::from_f32(v).expect("f32 converts");
                }
            }
        }
        t
    }

    /// Row-major HWC pixels of sample `i` (values as `f32`).
    pub fn sample_hwc(&self, i: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.h * self.w * self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.push(self.at(ch, i, y, x).to_f32().unwrap_or(f32::NAN));
                }
            }
        }
        out
    }

    /// Values of sample `i` at 1×1 spatial extent, one per channel.
    pub fn column(&self, i: usize) -> Vec<T> {
        assert_eq!(self.h * self.w, 1, "column() needs a 1x1 spatial tensor");
        (0..self.c).map(|ch| self.data[ch * self.n + i]).collect()
    }

    /// Channel-wise concatenation. Channel-major layout makes this a plain append.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut c = 0;
        for p in parts {
            assert_eq!((p.n, p.h, p.w), (first.n, first.h, first.w), "concat shape");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Self::from_vec(c, first.n, first.h, first.w, data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor<T>> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c, "split sizes");
        let plane = self.n * self.h * self.w;
        let mut start = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Self::from_vec(
                    c,
                    self.n,
                    self.h,
                    self.w,
                    self.data[start * plane..(start + c) * plane].to_vec(),
                );
                start += c;
                t
            })
            .collect()
    }

    /// Selects batch entries `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.c * (end - start) * plane);
        for ch in 0..self.c {
            let base = ch * self.n * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Self::from_vec(self.c, end - start, self.h, self.w, data)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// One named parameter or buffer tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param shape");
        self.entries.insert(name.into(), Param { shape, data });
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, shape: Vec<usize>, value: T) {
        let len = shape.iter().product();
        self.insert(name, shape, vec![value; len]);
    }

    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
        self.insert(name, shape, data);
    }

    pub fn get(&self, name: &str) -> &[T] {
        match self.entries.get(name) {
            Some(p) => &p.data,
            None => panic!("missing parameter `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [T] {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.data,
            None => panic!("missing parameter `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|p| p.shape.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: vec![T::zero(); p.data.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        for p in self.entries.values_mut() {
            p.data.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes.
    pub fn congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape == b.shape)
    }

    /// Adds `grad` into the named accumulator.
    pub fn accumulate(&mut self, name: &str, grad: &[T]) {
        let dst = self.get_mut(name);
        assert_eq!(dst.len(), grad.len(), "gradient length for `{name}`");
        for (d, &g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: p
                                .data
                                .iter()
                                .map(|v| {
                                    U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan())
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn check_congruent(&self, other: &Self, what: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "{what}: tensor tables do not match"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_vec(2, 3, 2, 2, (0..24).map(|v| v as f32).collect());
        let b = Tensor::<f32>::from_vec(1, 3, 2, 2, (0..12).map(|v| -(v as f32)).collect());
        let cat = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(cat.c, 3);
        assert_eq!(cat.at(2, 1, 1, 0), b.at(0, 1, 1, 0));
        let parts = cat.split_channels(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn slice_batch_keeps_samples() {
        let t = Tensor::<f64>::from_vec(2, 4, 1, 2, (0..16).map(f64::from).collect());
        let s = t.slice_batch(1, 3);
        assert_eq!(s.n, 2);
        for c in 0..2 {
            for i in 0..2 {
                for x in 0..2 {
                    assert_eq!(s.at(c, i, 0, x), t.at(c, i + 1, 0, x));
                }
            }
        }
    }
}

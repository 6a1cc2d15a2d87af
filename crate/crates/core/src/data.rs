//! In-memory image datasets, CIFAR-10 record decoding, synthetic data and
//! augmentation.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Fixed CIFAR-10 training-set statistics.
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// Images stored NCHW plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Vec<T>, labels: Vec<usize>, channels: usize, side: usize, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * channels * side * side {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                expected: vec![labels.len(), channels, side, side],
                got: vec![images.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            side,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected samples into `[B, C, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(alloc::format!("sample {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new([indices.len(), self.channels, self.side, self.side], data)?;
        Ok((t, labels))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Splits after the first `n` samples.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let cut = n * self.image_len();
        let head = Dataset {
            images: self.images[..cut].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        };
        let tail = Dataset {
            images: self.images[cut..].to_vec(),
            labels: self.labels[n..].to_vec(),
            ..*self
        };
        (head, tail)
    }

    pub fn append(&mut self, other: &Dataset<T>) -> Result<()> {
        if (other.channels, other.side, other.classes) != (self.channels, self.side, self.classes) {
            return Err(invalid("datasets differ in shape or classes"));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            labels: self.labels.clone(),
            channels: self.channels,
            side: self.side,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Decodes CIFAR-10 binary records.
pub fn parse_cifar10<T: Real>(bytes: &[u8], norm: &Normalization) -> Result<Dataset<T>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        for (i, &px) in rec[1..].iter().enumerate() {
            let ch = i / plane;
            images.push(T::from_f64((px as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]));
        }
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_CLASSES)
}

/// Encodes one record: the label byte then 3072 plane-major pixel bytes.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != CIFAR_RECORD - 1 {
        return Err(invalid("cifar record needs 3072 pixel bytes"));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Class-conditional Gaussian blobs: class `k` places a blob of a fixed
/// colour at a fixed position, plus i.i.d. pixel noise. Labels cycle over
/// the classes, so classes are exactly balanced when `n` is a multiple of
/// `classes`, and the sample order is shuffled under `seed`.
pub fn synthetic<T: Real>(n: usize, classes: usize, side: usize, seed: u64) -> Result<Dataset<T>> {
    if classes == 0 || n < classes || side == 0 {
        return Err(invalid("synthetic: need n >= classes > 0 and a positive side"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * core::f64::consts::PI;
    let s = side as f64;
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let a = tau * k as f64 / classes as f64;
            let colour: Vec<f64> = (0..3).map(|ch| 1.5 * Float::cos(a + tau * ch as f64 / 3.0)).collect();
            let (cx, cy) = (s / 2.0 + s / 4.0 * Float::cos(a), s / 2.0 + s / 4.0 * Float::sin(a));
            let sigma2 = 2.0 * (s / 5.0) * (s / 5.0);
            let mut img = vec![0.0; 3 * side * side];
            for ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (x as f64 + 0.5 - cx) * (x as f64 + 0.5 - cx) + (y as f64 + 0.5 - cy) * (y as f64 + 0.5 - cy);
                        img[(ch * side + y) * side + x] = colour[ch] * Float::exp(-d2 / sigma2);
                    }
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, 0.5).map_err(|_| invalid("bad noise scale"))?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(n * 3 * side * side);
    for &l in &labels {
        images.extend(protos[l].iter().map(|&v| T::from_f64(v + noise.sample(&mut rng))));
    }
    Dataset::new(images, labels, 3, side, classes)
}

/// Zero padding added on each side before cropping.
pub const AUGMENT_PAD: usize = 4;

/// Random crop offset into the padded image and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub fn draw_augment<R: Rng + ?Sized>(rng: &mut R) -> AugmentDraw {
    AugmentDraw {
        dy: rng.random_range(0..=2 * AUGMENT_PAD),
        dx: rng.random_range(0..=2 * AUGMENT_PAD),
        flip: rng.random_bool(0.5),
    }
}

/// Writes the crop of the zero-padded `src: [C, S, S]` selected by `draw`.
pub fn augment_image<T: Real>(src: &[T], channels: usize, side: usize, draw: AugmentDraw, dst: &mut [T]) {
    for ch in 0..channels {
        for y in 0..side {
            let sy = (y + draw.dy) as isize - AUGMENT_PAD as isize;
            for x in 0..side {
                let xx = if draw.flip { side - 1 - x } else { x };
                let sx = (xx + draw.dx) as isize - AUGMENT_PAD as isize;
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side;
                dst[(ch * side + y) * side + x] = if inside {
                    src[(ch * side + sy as usize) * side + sx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Pad-crop-flip augmentation of every image of `[N, C, S, S]`.
pub fn augment_batch<T: Real, R: Rng + ?Sized>(batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(invalid("augment: expected square NCHW batch"));
    }
    let (c, side) = (s[1], s[2]);
    let n = c * side * side;
    let mut out = vec![T::zero(); batch.numel()];
    for (src, dst) in batch.data().chunks(n).zip(out.chunks_mut(n)) {
        augment_image(src, c, side, draw_augment(rng), dst);
    }
    Tensor::new(s.to_vec(), out)
}

/// Sample order for one epoch: identity, or a permutation drawn from `rng`.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_records_round_trip() {
        let mut bytes = Vec::new();
        for label in 0..4u8 {
            let px: Vec<u8> = (0..3072).map(|i| ((i * 7 + label as usize * 13) % 256) as u8).collect();
            bytes.extend(encode_cifar10_record(label, &px).unwrap());
        }
        let d = parse_cifar10::<f64>(&bytes, &Normalization::IDENTITY).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.labels, vec![0, 1, 2, 3]);
        assert_eq!(d.image(1)[5], ((5 * 7 + 13) % 256) as f64 / 255.0);
        let norm = parse_cifar10::<f64>(&bytes, &Normalization::CIFAR10).unwrap();
        let raw = ((1030 * 7) % 256) as f64 / 255.0;
        assert_eq!(norm.image(0)[1030], (raw - 0.4822) / 0.2435);
    }

    #[test]
    fn cifar_errors() {
        assert_eq!(
            parse_cifar10::<f32>(&[0u8; 3072], &Normalization::IDENTITY),
            Err(Error::Truncated { len: 3072, record: 3073 })
        );
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        assert!(matches!(
            parse_cifar10::<f32>(&rec, &Normalization::IDENTITY),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic::<f32>(100, 10, 8, 3).unwrap();
        assert_eq!(a, synthetic::<f32>(100, 10, 8, 3).unwrap());
        assert_ne!(a, synthetic::<f32>(100, 10, 8, 4).unwrap());
        assert_eq!(a.class_counts(), vec![10; 10]);
        assert!(synthetic::<f32>(5, 10, 8, 3).is_err());
    }

    #[test]
    fn augmentation_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut flips = 0;
        for _ in 0..10_000 {
            let d = draw_augment(&mut rng);
            assert!(d.dy <= 8 && d.dx <= 8);
            flips += d.flip as usize;
        }
        assert!((flips as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn augmentation_geometry() {
        let src: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64 + 1.0).collect();
        let mut dst = vec![0.0; src.len()];
        augment_image(&src, 2, 3, AugmentDraw { dy: 4, dx: 4, flip: false }, &mut dst);
        assert_eq!(dst, src);
        augment_image(&src, 2, 3, AugmentDraw { dy: 4, dx: 4, flip: true }, &mut dst);
        assert_eq!(&dst[..3], &[3.0, 2.0, 1.0]);
        augment_image(&src, 2, 3, AugmentDraw { dy: 5, dx: 4, flip: false }, &mut dst);
        assert_eq!(&dst[..6], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(&dst[6..9], &[0.0, 0.0, 0.0]);

        let batch = Tensor::from_fn([4, 3, 8, 8], |i| i as f32);
        let a = augment_batch(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment_batch(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batching_and_splits() {
        let d = synthetic::<f64>(20, 4, 4, 1).unwrap();
        let (x, y) = d.batch(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 4, 4]);
        assert_eq!(&x.data()[..48], d.image(3));
        assert_eq!(y, vec![d.labels[3], d.labels[0]]);
        let (a, b) = d.split_at(15);
        assert_eq!((a.len(), b.len()), (15, 5));
        assert_eq!(d.take(7).labels, d.labels[..7].to_vec());
        let o1 = epoch_order(20, true, &mut ChaCha8Rng::seed_from_u64(2));
        let o2 = epoch_order(20, true, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(o1, o2);
        assert_eq!(epoch_order(3, false, &mut ChaCha8Rng::seed_from_u64(2)), vec![0, 1, 2]);
    }
}

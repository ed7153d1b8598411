//! Dataset ingestion, augmentation, and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{Domain, Stream, StreamKey};
use crate::tensor::{Scalar, Tensor};

/// Bytes per CIFAR-10 record: one label byte and a 32×32 RGB image stored
/// as three consecutive planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_SIDE: usize = 32;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// `[3, H, W]`, standardized per channel.
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Per-channel standardization constants for pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Mean and population standard deviation of each channel over a set of
    /// `[3, H, W]` images with values in `[0, 1]`. A channel with zero
    /// spread gets std 1.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.len() / 3;
            for c in 0..3 {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Self::IDENTITY;
        }
        let mut out = Self::IDENTITY;
        for c in 0..3 {
            let m = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - m * m).max(0.0);
            out.mean[c] = m;
            out.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        out
    }

    fn apply(&self, img: &mut [f32]) {
        let plane = img.len() / 3;
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]` of the images, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|im| {
            let s = im.pixels.shape();
            [s[0], s[1], s[2]]
        })
    }

    /// Stacks the images at `indices` into a `[B, C, H, W]` batch. When
    /// `augment` is set, each image gets a pad-4 random crop and a random
    /// horizontal flip drawn from the stream for `(epoch, dataset index)`.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        augment: Option<(u64, usize)>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let shape = self
            .image_shape()
            .ok_or_else(|| Error::config("cannot batch an empty dataset"))?;
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let im = self.images.get(i).ok_or_else(|| {
                Error::dim(format!("index {i} out of range for {} images", self.len()))
            })?;
            let px = match augment {
                Some((seed, epoch)) => {
                    let mut rng = StreamKey::new(seed, Domain::Augment)
                        .epoch(epoch as u64)
                        .sample(i as u64)
                        .stream();
                    let cropped = pad_crop(&im.pixels, 4, &mut rng);
                    hflip(&cropped, 0.5, &mut rng)
                }
                None => im.pixels.clone(),
            };
            data.extend(px.data().iter().map(|&v| T::of(v as f64)));
            labels.push(im.label);
        }
        let t = Tensor::new(&[indices.len(), shape[0], shape[1], shape[2]], data)?;
        Ok((t, labels))
    }
}

/// Decodes CIFAR-10 binary records. `limit` truncates after that many
/// records. Pixels are scaled to `[0, 1]` and standardized with
/// `normalization`, or with the loaded subset's own statistics when `None`.
pub fn decode_cifar_binary(
    bytes: &[u8],
    limit: Option<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
) -> Result<Dataset> {
    let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    let count = (bytes.len() / CIFAR_RECORD).min(limit.unwrap_or(usize::MAX));
    let mut raw = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).take(count).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label {label} is not below the class count {num_classes}"),
            });
        }
        let px: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        raw.push((px, label));
    }
    let normalization = normalization
        .unwrap_or_else(|| Normalization::from_images(raw.iter().map(|(p, _)| p.as_slice())));
    let images = raw
        .into_iter()
        .map(|(mut px, label)| {
            normalization.apply(&mut px);
            Ok(LabeledImage {
                pixels: Tensor::new(&[3, CIFAR_SIDE, CIFAR_SIDE], px)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        num_classes,
        normalization,
    })
}

pub fn load_cifar_binary(
    path: &Path,
    limit: Option<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar_binary(&bytes, limit, num_classes, normalization)
}

/// Crop of the zero-padded image whose top-left corner sits at
/// `(offset_y, offset_x)` in padded coordinates. `(pad, pad)` is the
/// identity.
pub fn crop_at<T: Scalar>(image: &Tensor<T>, pad: usize, offset_y: usize, offset_x: usize) -> Tensor<T> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    Tensor::from_fn(s, |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = (y + offset_y) as isize - pad as isize;
        let sx = (x + offset_x) as isize - pad as isize;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            T::zero()
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    })
    .reshape(&[c, h, w])
    .expect("crop keeps the shape")
}

/// Zero-pads each side by `pad` and crops the original extent at a uniform
/// offset in `[0, 2·pad]²`.
pub fn pad_crop<T: Scalar>(image: &Tensor<T>, pad: usize, rng: &mut Stream) -> Tensor<T> {
    if pad == 0 {
        return image.clone();
    }
    let oy = rng.gen_range(0..=2 * pad);
    let ox = rng.gen_range(0..=2 * pad);
    crop_at(image, pad, oy, ox)
}

/// Reverses the width axis with probability `prob`.
pub fn hflip<T: Scalar>(image: &Tensor<T>, prob: f64, rng: &mut Stream) -> Tensor<T> {
    if rng.gen::<f64>() < prob {
        flip_w(image)
    } else {
        image.clone()
    }
}

pub fn flip_w<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = *image.shape().last().expect("image has a width axis");
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::new(seed, Domain::Shuffle).epoch(epoch as u64).stream();
    idx.shuffle(&mut rng);
    idx
}

/// Class-conditional blob images.
///
/// Sample `i` has label `i mod classes`. Its image is a noisy grey
/// background, one Gaussian blob in colour channel `label mod 3` whose width
/// grows with `label / 3`, and a fainter narrow distractor blob in a random
/// channel. Blob positions are random, so the class is carried by colour and
/// blob size rather than location.
pub fn synthesize_dataset(classes: usize, n: usize, seed: u64, size: usize) -> Result<Dataset> {
    synthesize_split(classes, n, seed, size, 0, None)
}

/// Like [`synthesize_dataset`] with an independent `split` stream (e.g. 0 for
/// train, 1 for test) and optional fixed normalization.
pub fn synthesize_split(
    classes: usize,
    n: usize,
    seed: u64,
    size: usize,
    split: u64,
    normalization: Option<Normalization>,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::key("model.classes", "need at least two classes"));
    }
    if size < 4 {
        return Err(Error::key("data.size", "synthetic images need a side of at least 4"));
    }
    let key = StreamKey::new(seed, Domain::Synthetic).batch(split);
    let plane = size * size;
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut rng = key.sample(i as u64).stream();
        let mut px: Vec<f32> = (0..3 * plane)
            .map(|_| (0.3 + 0.1 * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let lo = size as f64 * 0.2;
        let hi = size as f64 * 0.8;
        let sigma = size as f64 * (0.09 + 0.06 * (label / 3) as f64);
        let amp = rng.gen_range(0.35..0.6);
        let (cy, cx) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        add_blob(&mut px[(label % 3) * plane..][..plane], size, cy, cx, sigma, amp);
        let ch = rng.gen_range(0..3);
        let amp = rng.gen_range(0.15..0.35);
        let (cy, cx) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        add_blob(&mut px[ch * plane..][..plane], size, cy, cx, size as f64 * 0.07, amp);
        for v in &mut px {
            *v = v.clamp(0.0, 1.0);
        }
        raw.push((px, label));
    }
    let normalization = normalization
        .unwrap_or_else(|| Normalization::from_images(raw.iter().map(|(p, _)| p.as_slice())));
    let images = raw
        .into_iter()
        .map(|(mut px, label)| {
            normalization.apply(&mut px);
            Ok(LabeledImage {
                pixels: Tensor::new(&[3, size, size], px)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        num_classes: classes,
        normalization,
    })
}

fn add_blob(plane: &mut [f32], size: usize, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            plane[y * size + x] += (amp * (-d2 * inv).exp()) as f32;
        }
    }
}

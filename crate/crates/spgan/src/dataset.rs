//! Training data: synthetic image families for desk-scale runs and an
//! 8-bit RGB image-folder loader. Pixels live in [-1, 1]; batch order is a
//! pure function of the seed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DataSection, DataSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::stream_seed;

/// In-memory dataset; each image is [3, R, R] in [-1, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    images: Vec<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Files that failed to decode and were skipped.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// Stacks the images at `indices` into one [B, 3, R, R] batch.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let r = self.resolution;
        let per = 3 * r * r;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new(vec![indices.len(), 3, r, r], data).expect("batch shape")
    }

    /// Infinite deterministic batch stream starting at batch `start_batch`
    /// (for resume); epochs reshuffle under the seed, partial tails drop.
    pub fn batches(&self, batch_size: usize, seed: u64, start_batch: u64) -> Result<BatchStream<'_>> {
        if batch_size == 0 || batch_size > self.len() {
            return Err(Error::usage(format!(
                "batch_size {batch_size} invalid for dataset of {}",
                self.len()
            )));
        }
        Ok(BatchStream {
            dataset: self,
            batch_size,
            seed,
            next_batch: start_batch,
            order: Vec::new(),
            order_epoch: u64::MAX,
        })
    }
}

pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    next_batch: u64,
    order: Vec<usize>,
    order_epoch: u64,
}

impl BatchStream<'_> {
    pub fn batches_per_epoch(&self) -> u64 {
        (self.dataset.len() / self.batch_size) as u64
    }

    /// The next [B, 3, R, R] batch.
    pub fn next_batch(&mut self) -> Tensor {
        let per_epoch = self.batches_per_epoch();
        let epoch = self.next_batch / per_epoch;
        let slot = (self.next_batch % per_epoch) as usize;
        if epoch != self.order_epoch {
            let mut order: Vec<usize> = (0..self.dataset.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, "shuffle", epoch));
            // Fisher-Yates, explicit so the order is pinned by this crate.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            self.order = order;
            self.order_epoch = epoch;
        }
        self.next_batch += 1;
        let idx = &self.order[slot * self.batch_size..(slot + 1) * self.batch_size];
        self.dataset.stack(idx)
    }
}

/// Loads a dataset per the [data] config section at the given resolution.
pub fn load_dataset(data: &DataSection, out_res: usize, seed: u64) -> Result<(Dataset, LoadReport)> {
    match data.source {
        DataSource::Folder => {
            let path = data
                .path
                .as_ref()
                .ok_or_else(|| Error::config("folder source without data.path".to_string()))?;
            load_folder(path, out_res)
        }
        DataSource::TwoModeBlobs => {
            Ok((synthesize(SyntheticKind::TwoModeBlobs, out_res, data.count, seed), LoadReport::default()))
        }
        DataSource::Checkerboard => {
            Ok((synthesize(SyntheticKind::Checkerboard, out_res, data.count, seed), LoadReport::default()))
        }
        DataSource::GaussianRings => {
            Ok((synthesize(SyntheticKind::GaussianRings, out_res, data.count, seed), LoadReport::default()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoModeBlobs,
    Checkerboard,
    GaussianRings,
}

/// Deterministic synthetic image family.
pub fn synthesize(kind: SyntheticKind, res: usize, count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "dataset", 0));
    let images = (0..count).map(|_| one_image(kind, res, &mut rng)).collect();
    Dataset { resolution: res, images }
}

fn one_image(kind: SyntheticKind, res: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let r = res as f32;
    let mut v = vec![0.0f32; res * res];
    match kind {
        SyntheticKind::TwoModeBlobs => {
            // Two far-apart modes: background level, blob position, and blob
            // polarity all flip together, so mean pixel value is bimodal.
            let mode = rng.random::<bool>();
            let (bg, amp, cx, cy) = if mode {
                (-0.6f32, 1.4f32, 0.32 * r, 0.32 * r)
            } else {
                (0.55f32, -1.3f32, 0.68 * r, 0.68 * r)
            };
            let radius = 0.20 * r * (1.0 + 0.15 * (rng.random::<f32>() - 0.5));
            for y in 0..res {
                for x in 0..res {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    v[y * res + x] = bg + amp * (-d2 / (2.0 * radius * radius)).exp();
                }
            }
        }
        SyntheticKind::Checkerboard => {
            let choices: Vec<usize> = [res / 8, res / 4].into_iter().filter(|&c| c >= 1).collect();
            let cell = choices[rng.random_range(0..choices.len())];
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..res {
                for x in 0..res {
                    let parity = (((x + ox) / cell) + ((y + oy) / cell)) % 2;
                    v[y * res + x] = if parity == 0 { 0.8 } else { -0.8 };
                }
            }
        }
        SyntheticKind::GaussianRings => {
            let radius = (0.22 + 0.16 * rng.random::<f32>()) * r;
            let width = 0.07 * r;
            for y in 0..res {
                for x in 0..res {
                    let d = ((x as f32 - 0.5 * r).powi(2) + (y as f32 - 0.5 * r).powi(2)).sqrt();
                    let ring = (-((d - radius) / width).powi(2)).exp();
                    v[y * res + x] = -0.7 + 1.6 * ring;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(3 * res * res);
    for ch in 0..3 {
        let tint = 1.0 - 0.08 * ch as f32;
        for &p in &v {
            let noise: f32 = rng.sample(StandardNormal);
            data.push((p * tint + 0.02 * noise).clamp(-1.0, 1.0));
        }
    }
    Tensor::new(vec![3, res, res], data).expect("image shape")
}

/// Loads every decodable image in a folder (sorted order), center-crops to
/// square, resizes to `out_res`, and maps pixels to [-1, 1]. Undecodable
/// files are skipped and counted.
pub fn load_folder(path: &Path, out_res: usize) -> Result<(Dataset, LoadReport)> {
    if !path.is_dir() {
        return Err(Error::io(
            path.to_path_buf(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset folder does not exist"),
        ));
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    let mut images = Vec::new();
    let mut report = LoadReport::default();
    for file in entries {
        let img = match image::ImageReader::open(&file).and_then(|r| {
            r.decode().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        }) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                report.skipped += 1;
                continue;
            }
        };
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        let cropped =
            image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let resized = image::imageops::resize(
            &cropped,
            out_res as u32,
            out_res as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut data = vec![0.0f32; 3 * out_res * out_res];
        for (x, y, pixel) in resized.enumerate_pixels() {
            for c in 0..3 {
                data[c * out_res * out_res + y as usize * out_res + x as usize] =
                    pixel.0[c] as f32 / 127.5 - 1.0;
            }
        }
        images.push(Tensor::new(vec![3, out_res, out_res], data)?);
    }
    if images.is_empty() {
        return Err(Error::config(format!(
            "no decodable images in {} ({} skipped)",
            path.display(),
            report.skipped
        )));
    }
    Ok((Dataset { resolution: out_res, images }, report))
}

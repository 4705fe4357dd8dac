use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// In-memory labelled image set, samples stored `[C, H, W]` row-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sample_shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    shape: [usize; 3],
    num_classes: usize,
    items: Vec<IndexItem>,
}

#[derive(Serialize, Deserialize)]
struct IndexItem {
    file: String,
    label: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the samples at `idx` into `[B, C, H, W]`.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.sample_shape.iter().product::<usize>());
        for &i in idx {
            data.extend_from_slice(&self.images[i]);
        }
        let [c, h, w] = self.sample_shape;
        let x = Tensor::from_vec(data, &[idx.len(), c, h, w], dtype)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Two classes of Gaussian blobs around opposite mean images.
    pub fn two_blobs(n: usize, shape: [usize; 3], separation: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: usize = shape.iter().product();
        let centre: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 0.5 } else { -0.5 }).collect();
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 0 { -separation } else { separation };
            images.push(centre.iter().map(|c| sign * c + rng.sample::<f64, _>(StandardNormal)).collect());
            labels.push(label);
        }
        Dataset { sample_shape: shape, num_classes: 2, images, labels }
    }

    /// Reads `index.json` plus one raw little-endian f32 file per sample.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let index: Index = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let d: usize = index.shape.iter().product();
        let mut images = Vec::with_capacity(index.items.len());
        let mut labels = Vec::with_capacity(index.items.len());
        for item in &index.items {
            let bytes = fs::read(dir.join(&item.file))?;
            if bytes.len() != 4 * d {
                return Err(Error::shape(
                    "dataset",
                    format!("{} holds {} bytes, expected {}", item.file, bytes.len(), 4 * d),
                ));
            }
            if item.label >= index.num_classes {
                return Err(Error::invalid(format!("{}: label {} out of range", item.file, item.label)));
            }
            images.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect());
            labels.push(item.label);
        }
        Ok(Dataset { sample_shape: index.shape, num_classes: index.num_classes, images, labels })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut items = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let file = format!("{i:06}.bin");
            let bytes: Vec<u8> = img.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            items.push(IndexItem { file, label });
        }
        let index = Index { shape: self.sample_shape, num_classes: self.num_classes, items };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }
}

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::list_images;
use crate::netpbm;
use crate::tensorcore::{Shape, Tensor};

/// RNG stream that drives crop sampling.
pub const DATA_STREAM: u64 = 3;

/// Grayscale training images in `[0, 1]`, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    names: Vec<String>,
    images: Vec<Tensor<f32>>,
    crop_size: usize,
}

impl Dataset {
    /// Loads every PGM/PPM in `dir`; colour images are reduced to BT.601 luma
    /// and images smaller than `crop_size` are skipped with a warning.
    pub fn load(dir: impl AsRef<Path>, crop_size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        if crop_size == 0 {
            return Err(Error::config("crop size must be >= 1"));
        }
        if !dir.is_dir() {
            return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
        }
        let mut names = Vec::new();
        let mut images = Vec::new();
        for path in list_images(dir)? {
            let image = netpbm::to_luma(&netpbm::read_image::<f32>(&path)?)?;
            let s = image.shape();
            if s.h < crop_size || s.w < crop_size {
                log::warn!(
                    "skipping {}: {}x{} is smaller than the {crop_size}px crop",
                    path.display(),
                    s.w,
                    s.h
                );
                continue;
            }
            names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            images.push(image);
        }
        if images.is_empty() {
            return Err(Error::Data(format!(
                "no usable PGM/PPM images of at least {crop_size}x{crop_size} in {}",
                dir.display()
            )));
        }
        Ok(Dataset {
            names,
            images,
            crop_size,
        })
    }

    pub fn from_images(images: Vec<Tensor<f32>>, crop_size: usize) -> Result<Self> {
        for (i, im) in images.iter().enumerate() {
            let s = im.shape();
            if s.n != 1 || s.c != 1 || s.h < crop_size || s.w < crop_size {
                return Err(Error::Data(format!("image {i} ({s}) cannot supply {crop_size}px crops")));
            }
        }
        if images.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        Ok(Dataset {
            names: (0..images.len()).map(|i| format!("image{i}")).collect(),
            images,
            crop_size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    /// One crop: image index, then top and left offsets, each uniform.
    pub fn sample_crop(&self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let image = &self.images[rng.random_range(0..self.images.len())];
        let s = image.shape();
        let c = self.crop_size;
        let top = rng.random_range(0..=s.h - c);
        let left = rng.random_range(0..=s.w - c);
        let mut data = Vec::with_capacity(c * c);
        for y in 0..c {
            let start = (top + y) * s.w + left;
            data.extend_from_slice(&image.data()[start..start + c]);
        }
        Tensor::from_vec(Shape::new(1, 1, c, c), data).expect("crop shape")
    }

    /// `batch_size` crops stacked along the batch axis.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let crops: Vec<Tensor<f32>> = (0..batch_size).map(|_| self.sample_crop(rng)).collect();
        Tensor::concat_batch(&crops).expect("equal crop shapes")
    }
}

/// Endless seeded stream of crops.
pub struct CropStream {
    dataset: Dataset,
    rng: ChaCha8Rng,
}

impl Iterator for CropStream {
    type Item = Tensor<f32>;

    fn next(&mut self) -> Option<Tensor<f32>> {
        Some(self.dataset.sample_crop(&mut self.rng))
    }
}

pub fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    rng
}

pub fn load_dataset(dir: impl AsRef<Path>, crop_size: usize, seed: u64) -> Result<CropStream> {
    Ok(CropStream {
        dataset: Dataset::load(dir, crop_size)?,
        rng: data_rng(seed),
    })
}

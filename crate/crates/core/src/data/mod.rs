//! Datasets: JSON Lines manifests of image pairs, raster loading, tiling and
//! a synthetic scene generator.

mod synth;
mod tile;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use synth::{generate_sample, generate_synthetic, synthetic_dataset, ShapeKind, SyntheticConfig, SyntheticSample};
pub use tile::{tile, tile_grid, tile_images};

/// One manifest entry. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePair {
    pub id: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub mask: PathBuf,
}

impl SamplePair {
    /// Copy with every path joined onto `root` (absolute paths are kept).
    pub fn resolved(&self, root: &Path) -> SamplePair {
        SamplePair {
            id: self.id.clone(),
            image_a: root.join(&self.image_a),
            image_b: root.join(&self.image_b),
            mask: root.join(&self.mask),
        }
    }
}

/// Reads a JSON Lines manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let pair: SamplePair = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if !seen.insert(pair.id.clone()) {
            return Err(parse(format!("duplicate sample id {:?}", pair.id)));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_manifest(pairs: &[SamplePair], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(&p.id) {
            return Err(Error::Data(format!("duplicate sample id {:?}", p.id)));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p).expect("plain struct");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub(crate) fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

/// Reads a 0/255 mask raster.
pub fn load_mask(path: &Path) -> Result<Mask> {
    mask_from_gray(&read_gray(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn save_png(img: &impl SaveImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_png(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) trait SaveImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()>;
}

impl SaveImage for RgbImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save_with_format(path, image::ImageFormat::Png)
    }
}

impl SaveImage for GrayImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save_with_format(path, image::ImageFormat::Png)
    }
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save_png(img, path)
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    save_png(img, path)
}

/// `(3, H, W)` tensor with intensities scaled by 1/255.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let scale = T::of(255.0);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::of(raw[p * 3 + c] as f64) / scale
    })
}

/// Mask raster: 0 is unchanged, 255 is changed, anything else is an error.
pub fn mask_from_gray(img: &GrayImage) -> Result<Mask> {
    let w = img.width() as usize;
    let mut data = Vec::with_capacity(img.as_raw().len());
    for (i, &v) in img.as_raw().iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            _ => {
                return Err(Error::Data(format!(
                    "mask value {v} at pixel (row {}, col {}) is not 0 or 255",
                    i / w,
                    i % w
                )))
            }
        }
    }
    Mask::new(img.height() as usize, w, data)
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    let (h, w) = mask.dims();
    GrayImage::from_raw(w as u32, h as u32, mask.data().iter().map(|&v| v * 255).collect()).expect("mask extent")
}

/// One decoded pair.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub image_a: Tensor<T>,
    pub image_b: Tensor<T>,
    pub mask: Mask,
}

impl<T: Scalar> Sample<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn from_images(id: &str, a: &RgbImage, b: &RgbImage, mask: &GrayImage) -> Result<Self> {
        let dims = |w: u32, h: u32| (h as usize, w as usize);
        let da = dims(a.width(), a.height());
        for (name, d) in [("image_b", dims(b.width(), b.height())), ("mask", dims(mask.width(), mask.height()))] {
            if d != da {
                return Err(Error::Data(format!(
                    "sample {id}: {name} is {}x{} but image_a is {}x{}",
                    d.0, d.1, da.0, da.1
                )));
            }
        }
        let mask = mask_from_gray(mask).map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        Ok(Sample {
            id: id.to_string(),
            image_a: rgb_to_tensor(a),
            image_b: rgb_to_tensor(b),
            mask,
        })
    }
}

/// Decodes the three rasters of an already resolved pair.
pub fn load_sample<T: Scalar>(pair: &SamplePair) -> Result<Sample<T>> {
    let a = read_rgb(&pair.image_a)?;
    let b = read_rgb(&pair.image_b)?;
    let m = read_gray(&pair.mask)?;
    Sample::from_images(&pair.id, &a, &b, &m)
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Dataset { samples })
    }

    /// Loads every pair listed in a manifest.
    pub fn load(manifest: &Path) -> Result<Self> {
        Dataset::load_threads(manifest, 1)
    }

    /// Like [`Dataset::load`], decoding on up to `threads` threads. Sample
    /// order follows the manifest regardless of the thread count.
    pub fn load_threads(manifest: &Path, threads: usize) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
        let pairs: Vec<SamplePair> = read_manifest(manifest)?.iter().map(|p| p.resolved(&root)).collect();
        let load = |chunk: &[SamplePair]| chunk.iter().map(load_sample).collect::<Result<Vec<_>>>();
        let threads = threads.clamp(1, pairs.len().max(1));
        let samples = if threads == 1 {
            load(&pairs)?
        } else {
            let per = pairs.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = pairs.chunks(per).map(|c| s.spawn(move || load(c))).collect();
                let mut out = Vec::with_capacity(pairs.len());
                for h in handles {
                    out.extend(h.join().expect("loader thread panicked")?);
                }
                Ok::<_, Error>(out)
            })?
        };
        Dataset::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// First `n` samples and the rest.
    pub fn split_at(mut self, n: usize) -> (Dataset<T>, Dataset<T>) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        (self, Dataset { samples: rest })
    }

    /// Stacks the listed samples into `(N, 3, H, W)` tensors plus their masks.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<Mask>)> {
        let Some(&first) = indices.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let (h, w) = self.samples[first].dims();
        let mut a = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut b = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            if s.dims() != (h, w) {
                return Err(Error::Data(format!(
                    "sample {} is {:?}, batch is {:?}",
                    s.id,
                    s.dims(),
                    (h, w)
                )));
            }
            a.extend_from_slice(s.image_a.data());
            b.extend_from_slice(s.image_b.data());
            masks.push(s.mask.clone());
        }
        let shape = [indices.len(), 3, h, w];
        Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, b)?, masks))
    }
}

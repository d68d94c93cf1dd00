//! Image I/O, the synthetic texture corpus, and training-pair sampling.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{FeatureMap, Shape};

/// Reads an image as a `1 x 3 x H x W` map in `[0, 1]`. Grayscale is replicated.
pub fn load_image<T: Real>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(FeatureMap::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        T::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

/// Writes batch item 0 as an 8-bit RGB PNG (values clamped to `[0, 1]` and rounded).
pub fn save_image<T: Real>(path: &Path, img: &FeatureMap<T>) -> Result<()> {
    let s = img.shape();
    if s.c != 3 {
        return Err(crate::error::shape_err("image channels", &s.dims(), &[1, 3, s.h, s.w]));
    }
    let mut buf = vec![0u8; s.h * s.w * 3];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                buf[(y * s.w + x) * 3 + c] = to_u8(img.at(0, c, y, x).to_f64());
            }
        }
    }
    image::RgbImage::from_raw(s.w as u32, s.h as u32, buf)
        .expect("buffer sized from shape")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes to the 8-bit grid so in-memory values equal what a PNG round-trip yields.
pub fn quantize<T: Real>(img: &FeatureMap<T>) -> FeatureMap<T> {
    img.map(|v| T::from_f64(to_u8(v.to_f64()) as f64 / 255.0))
}

/// Sorted `.png` files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDir(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Seeded procedural texture: a few oriented sinusoids plus hard-edged shapes.
pub fn synthetic_texture<T: Real>(seed: u64, h: usize, w: usize) -> FeatureMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.04..0.35);
            [theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..6.3), rng.random_range(0.05..0.2), rng.random_range(0.0..3.0)]
        })
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let shapes: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let r = rng.random_range(0.1..0.4) * h.min(w) as f64;
            let slope = rng.random_range(-1.5..1.5);
            (cy, cx, r, slope, std::array::from_fn(|_| rng.random_range(-0.25..0.25)))
        })
        .collect();
    FeatureMap::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for wv in &waves {
            v += wv[3] * (wv[0] * xf + wv[1] * yf + wv[2] + wv[4] * c as f64 * 0.3).sin();
        }
        for (i, &(cy, cx, r, slope, tint)) in shapes.iter().enumerate() {
            let inside = if i % 2 == 0 {
                (yf - cy).powi(2) + (xf - cx).powi(2) < r * r
            } else {
                yf - cy > slope * (xf - cx)
            };
            if inside {
                v += tint[c];
            }
        }
        T::from_f64(to_u8(v) as f64 / 255.0)
    })
}

/// Writes `n` textures named `tex_000.png`, ... into `dir`.
pub fn write_synthetic_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..n)
        .map(|i| {
            let p = dir.join(format!("tex_{i:03}.png"));
            save_image(&p, &synthetic_texture::<f32>(seed.wrapping_add(i as u64), size, size))?;
            Ok(p)
        })
        .collect()
}

/// FNV-1a over the file name; the validation split key.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone)]
pub struct NamedImage<T> {
    pub name: String,
    pub image: FeatureMap<T>,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<NamedImage<T>>,
    pub val: Vec<NamedImage<T>>,
}

impl<T: Real> Dataset<T> {
    /// Loads every readable PNG; unreadable files are skipped with a warning.
    pub fn load(dir: &Path, min_side: usize) -> Result<Self> {
        let mut images = Vec::new();
        for p in list_images(dir)? {
            match load_image::<T>(&p) {
                Ok(img) if img.shape().h >= min_side && img.shape().w >= min_side => images.push(NamedImage {
                    name: p.file_name().unwrap().to_string_lossy().into_owned(),
                    image: img,
                }),
                Ok(img) => log::warn!("skipping {}: {}x{} is smaller than {min_side}", p.display(), img.shape().h, img.shape().w),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::NoImages(dir.to_path_buf()));
        }
        Ok(Self::split(images))
    }

    /// Files whose name hash falls in the lowest decile go to validation. At
    /// least one image is held out; a single image serves both roles.
    pub fn split(images: Vec<NamedImage<T>>) -> Self {
        if images.len() == 1 {
            return Self {
                train: images.clone(),
                val: images,
            };
        }
        let (mut val, mut train): (Vec<_>, Vec<_>) = images.into_iter().partition(|im| name_hash(&im.name) % 10 == 0);
        if val.is_empty() {
            let i = (0..train.len()).min_by_key(|&i| name_hash(&train[i].name) % 10).unwrap();
            val.push(train.remove(i));
        }
        if train.is_empty() {
            train.push(val.pop().unwrap());
        }
        Self { train, val }
    }
}

pub fn crop<T: Real>(img: &FeatureMap<T>, y0: usize, x0: usize, h: usize, w: usize) -> FeatureMap<T> {
    let s = img.shape();
    FeatureMap::from_fn(s.with_hw(h, w), |b, c, y, x| img.at(b, c, y0 + y, x0 + x))
}

pub fn random_crop<T: Real, R: Rng + ?Sized>(img: &FeatureMap<T>, size: usize, rng: &mut R) -> FeatureMap<T> {
    let s = img.shape();
    let y0 = rng.random_range(0..=s.h - size);
    let x0 = rng.random_range(0..=s.w - size);
    crop(img, y0, x0, size, size)
}

pub fn center_crop<T: Real>(img: &FeatureMap<T>, size: usize) -> FeatureMap<T> {
    let s = img.shape();
    let (h, w) = (size.min(s.h), size.min(s.w));
    crop(img, (s.h - h) / 2, (s.w - w) / 2, h, w)
}

/// One of the eight dihedral transforms: bit 0 flips horizontally, bits 1-2
/// rotate by that many quarter turns counter-clockwise.
pub fn augment<T: Real>(img: &FeatureMap<T>, code: u8) -> FeatureMap<T> {
    let s = img.shape();
    let flip = code & 1 == 1;
    let rot = (code >> 1) & 3;
    let (h, w) = if rot % 2 == 1 { (s.w, s.h) } else { (s.h, s.w) };
    FeatureMap::from_fn(s.with_hw(h, w), |b, c, y, x| {
        // (y, x) in the output; map back through the rotation, then the flip.
        let (sy, sx) = match rot {
            0 => (y, x),
            1 => (x, s.w - 1 - y),
            2 => (s.h - 1 - y, s.w - 1 - x),
            _ => (s.h - 1 - x, y),
        };
        let sx = if flip { s.w - 1 - sx } else { sx };
        img.at(b, c, sy, sx)
    })
}

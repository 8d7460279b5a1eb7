//! Synthetic counting domains.
//!
//! Each image holds `c ~ P(c)` heads placed uniformly over the pixel-center
//! span `[0, W-1] x [0, H-1]`, rendered as unit-peak Gaussian bumps plus
//! uniform background noise, clipped to `[0, 1]` and quantized to 8 bits so
//! that PNG storage is lossless. Every image draws from its own ChaCha stream
//! keyed by `(seed, split, index)`.
//!
//! On disk a domain is a directory:
//!
//! ```text
//! meta.json
//! train/annotations.json   {"train_00000": [[x, y], ...], ...}
//! train/images/<id>.png
//! test/...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::density::{render_density, DensityMap, Point};
use crate::error::{validation, Error, Result};

/// Grayscale intensity grid in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(validation!(
                "image buffer has {} pixels, expected {height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation!("image intensities must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    fn window(&self, top: usize, left: usize, size: usize) -> Image {
        let mut data = Vec::with_capacity(size * size);
        for r in top..top + size {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + size]);
        }
        Image {
            height: size,
            width: size,
            data,
        }
    }

    fn to_gray8(&self) -> image::GrayImage {
        let pixels = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer matches dimensions")
    }

    fn from_gray8(img: &image::GrayImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDistribution {
    Poisson {
        mean: f64,
    },
    /// Inclusive range of head counts.
    UniformRange {
        lo: u32,
        hi: u32,
    },
}

impl CountDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            CountDistribution::Poisson { mean } if mean == 0.0 => 0,
            CountDistribution::Poisson { mean } => {
                Poisson::new(mean).expect("validated mean").sample(rng) as usize
            }
            CountDistribution::UniformRange { lo, hi } => rng.random_range(lo..=hi) as usize,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CountDistribution::Poisson { mean } => mean,
            CountDistribution::UniformRange { lo, hi } => (lo as f64 + hi as f64) / 2.0,
        }
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub count_distribution: CountDistribution,
    pub blob_sigma_px: f64,
    pub noise_level: f64,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// A 64x64 Poisson domain with 100 train and 50 test images.
    pub fn poisson(name: &str, mean: f64, blob_sigma_px: f64, noise_level: f64, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            count_distribution: CountDistribution::Poisson { mean },
            blob_sigma_px,
            noise_level,
            image_size: (64, 64),
            n_train: 100,
            n_test: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(validation!("domain spec field `{field}` {why}"));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad(
                "name",
                format!(
                    "must be a non-empty [A-Za-z0-9_-] identifier, got {:?}",
                    self.name
                ),
            );
        }
        match self.count_distribution {
            CountDistribution::Poisson { mean } if !(mean.is_finite() && mean >= 0.0) => {
                return bad(
                    "count_distribution",
                    format!("poisson mean must be >= 0, got {mean}"),
                );
            }
            CountDistribution::UniformRange { lo, hi } if lo > hi => {
                return bad("count_distribution", format!("range [{lo}, {hi}] is empty"));
            }
            _ => {}
        }
        if !(self.blob_sigma_px.is_finite() && self.blob_sigma_px > 0.0) {
            return bad(
                "blob_sigma_px",
                format!("must be positive, got {}", self.blob_sigma_px),
            );
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(
                "noise_level",
                format!("must lie in [0, 1], got {}", self.noise_level),
            );
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return bad("image_size", format!("must be at least 16x16, got {h}x{w}"));
        }
        if self.n_train < 1 {
            return bad("n_train", "must be at least 1".into());
        }
        if self.n_test < 1 {
            return bad("n_test", "must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Image,
    pub heads: Vec<Point>,
}

impl AnnotatedImage {
    pub fn count(&self) -> usize {
        self.heads.len()
    }

    /// Full-resolution ground truth with kernel width `sigma`.
    pub fn density(&self, sigma: f64) -> Result<DensityMap> {
        render_density(&self.heads, self.image.shape(), sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn render_image(spec: &DomainSpec, split: Split, index: usize) -> AnnotatedImage {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((split as u64) << 40) | index as u64);

    let count = spec.count_distribution.sample(&mut rng);
    let heads: Vec<Point> = (0..count)
        .map(|_| {
            let x = rng.random_range(0.0..=(w - 1) as f64);
            let y = rng.random_range(0.0..=(h - 1) as f64);
            Point::new(x, y)
        })
        .collect();

    let sigma = spec.blob_sigma_px;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut canvas = vec![0.0; h * w];
    for p in &heads {
        let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
        for r in (cy - radius).max(0)..=(cy + radius).min(h as isize - 1) {
            for c in (cx - radius).max(0)..=(cx + radius).min(w as isize - 1) {
                let d2 = (c as f64 - p.x).powi(2) + (r as f64 - p.y).powi(2);
                canvas[r as usize * w + c as usize] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in canvas.iter_mut() {
        let noisy = *v + spec.noise_level * rng.random::<f64>();
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    AnnotatedImage {
        id: format!("{}_{index:05}", split.dir_name()),
        image: Image {
            height: h,
            width: w,
            data: canvas,
        },
        heads,
    }
}

/// Renders every train and test image of a domain.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| render_image(spec, Split::Train, i))
        .collect();
    let test = (0..spec.n_test)
        .map(|i| render_image(spec, Split::Test, i))
        .collect();
    Ok(DomainDataset {
        spec: spec.clone(),
        train,
        test,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Writes a domain into `dir` (created if absent).
pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("meta.json"), &ds.spec)?;
    for (split, items) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        let images = dir.join(split.dir_name()).join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut annotations = BTreeMap::new();
        for item in items {
            let path = images.join(format!("{}.png", item.id));
            item.image
                .to_gray8()
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::parse(&path, e))?;
            annotations.insert(item.id.clone(), item.heads.clone());
        }
        write_json(
            &dir.join(split.dir_name()).join("annotations.json"),
            &annotations,
        )?;
    }
    Ok(())
}

fn load_split(dir: &Path, spec: &DomainSpec, split: Split) -> Result<Vec<AnnotatedImage>> {
    let split_dir = dir.join(split.dir_name());
    let ann_path = split_dir.join("annotations.json");
    let annotations: BTreeMap<String, Vec<Point>> = read_json(&ann_path)?;
    let expected = match split {
        Split::Train => spec.n_train,
        Split::Test => spec.n_test,
    };
    if annotations.len() != expected {
        return Err(Error::parse(
            &ann_path,
            format!(
                "{} images annotated, meta.json declares {expected}",
                annotations.len()
            ),
        ));
    }
    let (h, w) = spec.image_size;
    let mut out = Vec::with_capacity(annotations.len());
    for (id, heads) in annotations {
        let path = split_dir.join("images").join(format!("{id}.png"));
        if !path.is_file() {
            return Err(Error::parse(
                &ann_path,
                format!("annotation id {id:?} has no image at {}", path.display()),
            ));
        }
        let img = image::open(&path)
            .map_err(|e| Error::parse(&path, e))?
            .into_luma8();
        let image = Image::from_gray8(&img);
        if image.shape() != (h, w) {
            return Err(Error::parse(
                &path,
                format!("image is {:?}, meta.json declares {h}x{w}", image.shape()),
            ));
        }
        for p in &heads {
            if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
                return Err(validation!(
                    "{}: head ({}, {}) of {id:?} lies outside the {h}x{w} image",
                    ann_path.display(),
                    p.x,
                    p.y
                ));
            }
        }
        out.push(AnnotatedImage { id, image, heads });
    }
    Ok(out)
}

/// Reads a domain directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let meta = dir.join("meta.json");
    let spec: DomainSpec = read_json(&meta)?;
    spec.validate().map_err(|e| Error::parse(&meta, e))?;
    Ok(DomainDataset {
        train: load_split(dir, &spec, Split::Train)?,
        test: load_split(dir, &spec, Split::Test)?,
        spec,
    })
}

/// Training-time augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Square crop side; `None` picks half the shorter image side.
    pub crop_size: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_size: None,
        }
    }
}

impl AugmentConfig {
    pub fn crop_side(&self, shape: (usize, usize)) -> usize {
        self.crop_size.unwrap_or(shape.0.min(shape.1) / 2)
    }
}

/// Horizontal mirror of image, heads and density.
pub fn hflip(img: &AnnotatedImage, density: &DensityMap) -> (AnnotatedImage, DensityMap) {
    let w = img.image.width as f64;
    let heads = img
        .heads
        .iter()
        .map(|p| Point::new((w - 1.0 - p.x).max(0.0), p.y))
        .collect();
    (
        AnnotatedImage {
            id: img.id.clone(),
            image: img.image.flip_horizontal(),
            heads,
        },
        density.flip_horizontal(),
    )
}

/// Square window at `(top, left)`; the density is re-rendered from the heads
/// inside the window, so its mass equals the cropped head count.
pub fn crop(
    img: &AnnotatedImage,
    top: usize,
    left: usize,
    size: usize,
    sigma: f64,
) -> Result<(AnnotatedImage, DensityMap)> {
    let (h, w) = img.image.shape();
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::Config(format!(
            "crop of side {size} at ({top}, {left}) does not fit a {h}x{w} image"
        )));
    }
    let (t, l, s) = (top as f64, left as f64, size as f64);
    let heads: Vec<Point> = img
        .heads
        .iter()
        .filter(|p| p.x >= l && p.x < l + s && p.y >= t && p.y < t + s)
        .map(|p| Point::new(p.x - l, p.y - t))
        .collect();
    let density = render_density(&heads, (size, size), sigma)?;
    Ok((
        AnnotatedImage {
            id: img.id.clone(),
            image: img.image.window(top, left, size),
            heads,
        },
        density,
    ))
}

/// Random flip followed by a random integer-offset square crop.
pub fn augment<R: Rng>(
    img: &AnnotatedImage,
    density: &DensityMap,
    cfg: &AugmentConfig,
    sigma: f64,
    rng: &mut R,
) -> Result<(AnnotatedImage, DensityMap)> {
    let (h, w) = img.image.shape();
    if density.shape() != (h, w) {
        return Err(validation!(
            "density {:?} does not match {h}x{w} image",
            density.shape()
        ));
    }
    let size = cfg.crop_side((h, w));
    if size == 0 || size > h || size > w {
        return Err(Error::Config(format!(
            "crop side {size} exceeds the {h}x{w} image"
        )));
    }
    let flipped;
    let (img, _) = if rng.random::<f64>() < cfg.flip_prob {
        flipped = hflip(img, density);
        (&flipped.0, &flipped.1)
    } else {
        (img, density)
    };
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    crop(img, top, left, size, sigma)
}

//! The +1 pixel perturbation: every 8-bit value below 255 is incremented by
//! one, 255 stays put. Outputs are always written as PNG so the change
//! survives encoding.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::model::{AuditManifest, ImageRef, Variant};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("dimension mismatch: {original} vs {candidate}")]
    DimensionMismatch { original: String, candidate: String },
    #[error("missing input {0}")]
    MissingInput(ImageRef),
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported encoding of {path}: {message}")]
    Unsupported { path: PathBuf, message: String },
    #[error("cannot encode PNG: {0}")]
    Encode(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// An 8-bit raster with 1 (gray), 3 (RGB) or 4 (RGBA) channels, stored
/// interleaved in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, PerturbError> {
        if width == 0 || height == 0 {
            return Err(PerturbError::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(PerturbError::InvalidRaster(format!(
                "channel count must be 1, 3 or 4, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(PerturbError::InvalidRaster(format!(
                "expected {expected} values for {width}x{height}x{channels}, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, PerturbError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn has_alpha(&self) -> bool {
        self.channels == 4
    }

    /// Channels carrying color (alpha excluded).
    pub fn color_channels(&self) -> u8 {
        if self.has_alpha() {
            3
        } else {
            self.channels
        }
    }

    /// Value at channel `c`, row `h`, column `w`.
    pub fn get(&self, c: usize, h: usize, w: usize) -> u8 {
        let ch = self.channels as usize;
        self.pixels[(h * self.width as usize + w) * ch + c]
    }

    fn shape(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// Whether the alpha channel of RGBA images is perturbed too.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Alpha passes through unchanged.
    #[default]
    Preserve,
    Perturb,
}

/// v + 1 below 255, v otherwise.
pub fn perturb_pixel(v: u8) -> u8 {
    if v < u8::MAX {
        v + 1
    } else {
        v
    }
}

pub fn perturb_image(img: &RasterImage, alpha: AlphaMode) -> RasterImage {
    let ch = img.channels as usize;
    let skip_alpha = img.has_alpha() && alpha == AlphaMode::Preserve;
    let pixels = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if skip_alpha && i % ch == 3 {
                v
            } else {
                perturb_pixel(v)
            }
        })
        .collect();
    RasterImage {
        pixels,
        ..img.clone()
    }
}

/// True iff `candidate` is exactly the perturbation of `original`.
pub fn verify_perturbation(
    original: &RasterImage,
    candidate: &RasterImage,
    alpha: AlphaMode,
) -> Result<bool, PerturbError> {
    if original.width != candidate.width
        || original.height != candidate.height
        || original.channels != candidate.channels
    {
        return Err(PerturbError::DimensionMismatch {
            original: original.shape(),
            candidate: candidate.shape(),
        });
    }
    Ok(perturb_image(original, alpha).pixels == candidate.pixels)
}

/// Decodes an 8-bit raster from encoded bytes. Gray+alpha is widened to RGBA;
/// deeper than 8 bits is rejected.
pub fn decode_image_bytes(bytes: &[u8], path: &Path) -> Result<RasterImage, PerturbError> {
    use image::DynamicImage;

    let decoded = image::load_from_memory(bytes).map_err(|e| match e {
        image::ImageError::Unsupported(u) => PerturbError::Unsupported {
            path: path.to_path_buf(),
            message: u.to_string(),
        },
        other => PerturbError::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (decoded.width(), decoded.height());
    match decoded {
        DynamicImage::ImageLuma8(buf) => RasterImage::new(w, h, 1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => RasterImage::new(w, h, 3, buf.into_raw()),
        DynamicImage::ImageRgba8(buf) => RasterImage::new(w, h, 4, buf.into_raw()),
        la @ DynamicImage::ImageLumaA8(_) => RasterImage::new(w, h, 4, la.to_rgba8().into_raw()),
        other => Err(PerturbError::Unsupported {
            path: path.to_path_buf(),
            message: format!("{:?} is deeper than 8 bits per channel", other.color()),
        }),
    }
}

pub fn decode_image(path: &Path) -> Result<RasterImage, PerturbError> {
    let bytes = std::fs::read(path).map_err(|e| PerturbError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_image_bytes(&bytes, path)
}

/// PNG bytes with fixed encoder settings and no ancillary chunks, so equal
/// rasters always encode to equal bytes.
pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, PerturbError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(match img.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            _ => png::ColorType::Rgba,
        });
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Adaptive);
        let mut writer = enc
            .write_header()
            .map_err(|e| PerturbError::Encode(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| PerturbError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| PerturbError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &RasterImage) -> Result<(), PerturbError> {
    let bytes = encode_png(img)?;
    write_atomic(path, &bytes).map_err(|source| PerturbError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PerturbOptions {
    pub alpha: AlphaMode,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self {
            alpha: AlphaMode::Preserve,
            jobs: 1,
        }
    }
}

/// One original to perturb and where its twin goes.
#[derive(Debug, Clone)]
pub struct PerturbTask {
    pub original: ImageRef,
    pub output: PathBuf,
}

/// Every (model, seed, prompt) original of the manifest, in manifest order.
pub fn corpus_tasks(manifest: &AuditManifest, models: &[String], seeds: &[i64]) -> Vec<PerturbTask> {
    let mut tasks = Vec::new();
    for model in models {
        for &seed in seeds {
            for prompt in &manifest.prompts {
                tasks.push(PerturbTask {
                    original: manifest.image_ref(model, seed, &prompt.id, Variant::Original),
                    output: manifest.perturbed_path(model, seed, &prompt.id),
                });
            }
        }
    }
    tasks
}

/// Perturbs every original image in the manifest and writes the PNG twins.
/// Returns the number of images written.
pub fn perturb_corpus(manifest: &AuditManifest, opts: &PerturbOptions) -> Result<usize, PerturbError> {
    let tasks = corpus_tasks(manifest, &manifest.model_names(), &manifest.seeds);
    perturb_tasks(&tasks, opts)
}

/// Runs perturbation tasks on a bounded pool. All inputs are checked before
/// anything is written; on failure the first error in task order is returned.
pub fn perturb_tasks(tasks: &[PerturbTask], opts: &PerturbOptions) -> Result<usize, PerturbError> {
    if let Some(missing) = tasks.iter().find(|t| !t.original.location.is_file()) {
        return Err(PerturbError::MissingInput(missing.original.clone()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| PerturbError::Pool(e.to_string()))?;
    let results: Vec<Result<(), PerturbError>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let img = decode_image(&task.original.location)?;
                write_png(&task.output, &perturb_image(&img, opts.alpha))
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    Ok(tasks.len())
}

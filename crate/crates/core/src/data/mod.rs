//! Image I/O, dataset manifests, crop augmentation and the tensor container.

pub mod container;
mod manifest;
pub mod synthetic;

use std::io::Write;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::Rng;

use crate::degrade::bicubic_resize;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use manifest::{ingest_folder, split_counts, DatasetManifest, IngestReport, ManifestEntry, Split};

/// Side of the stored, roughly aligned faces.
pub const ALIGNED_SIZE: usize = 144;
/// Side of the training crops.
pub const CROP_SIZE: usize = 128;

/// Write through a sibling temp file and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| invalid!("not a file path: {}", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decode any supported raster file into an 8-bit `[3, H, W]` tensor.
pub fn load_rgb(path: &Path) -> Result<Tensor<u8>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0u8; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c];
        }
    }
    Tensor::from_vec([3, h, w], data)
}

/// Encode a `[3, H, W]` or `[1, H, W]` 8-bit tensor; format from the extension.
pub fn save_image(path: &Path, img: &Tensor<u8>) -> Result<()> {
    let sh = img.shape();
    if sh.len() != 3 || !(sh[0] == 1 || sh[0] == 3) {
        return Err(Error::shape("save_image", "C (channels)", format!("expected [1|3,H,W], got {sh:?}")));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for k in 0..3 {
            raw[3 * i + k] = img.data()[(k % c) * h * w + i];
        }
    }
    let rgb = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized h*w*3");
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let mut buf = std::io::Cursor::new(Vec::new());
    if c == 1 {
        image::DynamicImage::ImageRgb8(rgb).to_luma8().write_to(&mut buf, format)
    } else {
        rgb.write_to(&mut buf, format)
    }
    .map_err(|e| image_error(path, e))?;
    write_atomic(path, buf.get_ref())
}

/// `x / 127.5 − 1`, mapping 8-bit values onto `[−1, 1]`.
pub fn normalize<T: Scalar>(img: &Tensor<u8>) -> Tensor<T> {
    img.map(|v| T::lit(v as f64 / 127.5 - 1.0))
}

/// Inverse of [`normalize`], rounded and clamped to `[0, 255]`.
pub fn denormalize<T: Scalar>(img: &Tensor<T>) -> Tensor<u8> {
    img.map(|v| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
}

/// Bicubic resize of an 8-bit `[3, H, W]` image to `size × size` (no-op if already there).
pub fn resize_u8(img: &Tensor<u8>, size: usize) -> Result<Tensor<u8>> {
    if img.dim(1) == size && img.dim(2) == size {
        return Ok(img.clone());
    }
    let f = img.map(|v| v as f64);
    Ok(bicubic_resize(&f, size, size)?.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Load an aligned face at `ALIGNED_SIZE`, resizing if needed.
pub fn load_aligned(path: &Path) -> Result<Tensor<u8>> {
    resize_u8(&load_rgb(path)?, ALIGNED_SIZE)
}

/// `size × size` window of a `[C, H, W]` tensor at `(top, left)`.
pub fn crop<T: crate::scalar::Element>(img: &Tensor<T>, top: usize, left: usize, size: usize) -> Result<Tensor<T>> {
    let sh = img.shape();
    if sh.len() != 3 || top + size > sh[1] || left + size > sh[2] {
        return Err(Error::shape("crop", "H/W", format!("{size}x{size} at ({top},{left}) outside {sh:?}")));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let base = ch * h * w + r * w;
            data.extend_from_slice(&img.data()[base + left..base + left + size]);
        }
    }
    Tensor::from_vec([c, size, size], data)
}

/// Uniform 128×128 crop of a 144×144 image; returns the crop and its `(top, left)` offset.
pub fn random_crop_128<T: crate::scalar::Element, R: Rng + ?Sized>(img: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, (usize, usize))> {
    let sh = img.shape();
    if sh.len() != 3 || sh[1] != ALIGNED_SIZE || sh[2] != ALIGNED_SIZE {
        return Err(Error::shape("random_crop_128", "H/W", format!("expected [C,144,144], got {sh:?}")));
    }
    let slack = ALIGNED_SIZE - CROP_SIZE;
    let top = rng.random_range(0..=slack);
    let left = rng.random_range(0..=slack);
    Ok((crop(img, top, left, CROP_SIZE)?, (top, left)))
}

/// Images decodable from a directory, sorted bytewise by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_ok() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().unwrap().as_encoded_bytes().cmp(b.file_name().unwrap().as_encoded_bytes()));
    Ok(out)
}

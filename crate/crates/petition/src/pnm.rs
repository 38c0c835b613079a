//! Binary PNM interchange: P6 for RGB, P5 for grayscale, 8-bit samples.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::PnmDecoder;
use image::{ColorType, ImageDecoder};
use petition_core::imaging::RasterImage;
use thiserror::Error;

/// Largest accepted pixel count; keeps a hostile header from asking for
/// gigabytes.
pub const MAX_PIXELS: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("unsupported raster format (magic {0:?}); only binary P5 and P6 are accepted")]
    UnsupportedMagic(String),
    #[error("malformed pixmap: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn decode(data: &[u8]) -> Result<RasterImage, PnmError> {
    let magic = &data[..data.len().min(2)];
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(PnmError::UnsupportedMagic(String::from_utf8_lossy(magic).into_owned())),
    };
    let malformed = |e: image::ImageError| PnmError::Malformed(e.to_string());
    let decoder = PnmDecoder::new(Cursor::new(data)).map_err(malformed)?;
    let (w, h) = decoder.dimensions();
    if !matches!(decoder.color_type(), ColorType::L8 | ColorType::Rgb8) {
        return Err(PnmError::Malformed("only 8-bit samples are supported".into()));
    }
    if u64::from(w) * u64::from(h) > MAX_PIXELS {
        return Err(PnmError::Malformed(format!("{w}x{h} exceeds the pixel limit")));
    }
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut buf).map_err(malformed)?;
    RasterImage::from_bytes(w as usize, h as usize, channels, buf).map_err(|e| PnmError::Malformed(e.to_string()))
}

/// P6 for three channels, P5 for one. Unit-domain images are quantized.
pub fn encode(img: &RasterImage) -> Result<Vec<u8>, PnmError> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(PnmError::Malformed(format!("{c} channels cannot be written as PNM"))),
    };
    let bytes = img.to_bytes();
    let data = bytes.bytes().expect("byte domain after to_bytes");
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn read(path: &Path) -> Result<RasterImage, PnmError> {
    let data = std::fs::read(path).map_err(|source| PnmError::Io { path: path.display().to_string(), source })?;
    decode(&data)
}

pub fn write(path: &Path, img: &RasterImage) -> Result<(), PnmError> {
    std::fs::write(path, encode(img)?).map_err(|source| PnmError::Io { path: path.display().to_string(), source })
}

//! Binary PGM (P5, 8- and 16-bit) and PPM (P6) files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageDecoder, ImageEncoder, RgbImage};

use crate::error::{CoreError, Result};

fn format_err(path: &Path, detail: impl Into<String>) -> CoreError {
    CoreError::Format { path: path.to_path_buf(), detail: detail.into() }
}

fn encoder(path: &Path, subtype: PnmSubtype) -> Result<PnmEncoder<BufWriter<File>>> {
    Ok(PnmEncoder::new(BufWriter::new(File::create(path)?)).with_subtype(subtype))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    encoder(path, PnmSubtype::Graymap(SampleEncoding::Binary))?.write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::L8,
    )?;
    Ok(())
}

/// 16-bit PGM with maxval 65535.
pub fn write_pgm16(path: impl AsRef<Path>, width: u32, height: u32, values: &[u16]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != (width * height) as usize {
        return Err(format_err(path, "value count does not match the image size"));
    }
    // The image crate's PNM encoder has no 16-bit path; the format is a short
    // header followed by big-endian samples.
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n65535\n")?;
    for v in values {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    encoder(path, PnmSubtype::Pixmap(SampleEncoding::Binary))?.write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path)?;
    let dec = PnmDecoder::new(BufReader::new(file)).map_err(|e| format_err(path, e.to_string()))?;
    DynamicImage::from_decoder(dec).map_err(|e| format_err(path, e.to_string()))
}

/// Reads an 8-bit grayscale PGM. Other layouts are rejected.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(format_err(path, format!("expected 8-bit grayscale, found {:?}", other.color()))),
    }
}

/// Reads a 16-bit grayscale PGM as `(width, height, values)`.
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u16>)> {
    let path = path.as_ref();
    let dec = PnmDecoder::new(BufReader::new(File::open(path)?)).map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = dec.dimensions();
    match DynamicImage::from_decoder(dec).map_err(|e| format_err(path, e.to_string()))? {
        DynamicImage::ImageLuma16(img) => Ok((w, h, img.into_raw())),
        other => Err(format_err(path, format!("expected 16-bit grayscale, found {:?}", other.color()))),
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(format_err(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

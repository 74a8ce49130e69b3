use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::{ImageError, ImagePlane, ImageRGB, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => return Err(ImageError::UnsupportedFormat(path.to_path_buf())),
    }
    reader.decode().map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a PNG or binary PPM/PGM file as 8-bit RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let img = decode(path)?.to_rgb8();
    ImageRGB::new(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Loads a PNG or PGM file as 8-bit gray values: `(width, height, values)`.
pub fn load_gray_u8(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = decode(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

enum Container {
    Png,
    Pnm,
}

fn container(path: &Path) -> Result<Container> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(Container::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(Container::Pnm),
        _ => Err(ImageError::UnsupportedFormat(path.to_path_buf())),
    }
}

fn write(path: &Path, width: usize, height: usize, data: &[u8], gray: bool) -> Result<()> {
    let mut buf = Vec::new();
    let color = if gray {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let encoded = match container(path)? {
        Container::Png => image::codecs::png::PngEncoder::new(&mut buf).write_image(
            data,
            width as u32,
            height as u32,
            color,
        ),
        Container::Pnm => {
            let subtype = if gray {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(&mut buf)
                .with_subtype(subtype)
                .write_image(data, width as u32, height as u32, color)
        }
    };
    encoded.map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, buf).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an RGB image as PNG or PPM (P6), chosen by extension.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), img.width(), img.height(), img.pixels(), false)
}

/// Writes a plane as 8-bit gray PNG or PGM (P5), `round(255 v)`.
pub fn save_plane(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        plane.width(),
        plane.height(),
        &plane.to_u8(),
        true,
    )
}

//! Frame sequences on disk: binary PGM (P5) or PPM (P6), 8-bit, named
//! `frame_%05d.pgm` / `frame_%05d.ppm`.

use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{invalid, Error, Result};
use crate::flow::Frame;

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.display().to_string(), message: message.into() }
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)
        .map_err(|e| image_err(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e.to_string()))?;
    if img.format() != Some(ImageFormat::Pnm) {
        return Err(image_err(path, "not a PGM/PPM file"));
    }
    let decoded = img.decode().map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let frame = match decoded {
        DynamicImage::ImageLuma8(buf) => Frame::from_luma8(w, h, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => Frame::from_rgb8(w, h, buf.as_raw()),
        other => {
            return Err(image_err(path, format!("unsupported sample layout {:?}; expected maxval 255", other.color())))
        }
    };
    frame.map_err(|e| image_err(path, e.to_string()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, luma: &[u8]) -> Result<()> {
    if luma.len() != width * height {
        return Err(invalid(format!("{}x{} image needs {} bytes, got {}", width, height, width * height, luma.len())));
    }
    let file = std::fs::File::create(path).map_err(|e| image_err(path, e.to_string()))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(luma, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e.to_string()))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_pgm(path, frame.width(), frame.height(), &frame.to_luma8())
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

/// Frame files in `dir`, sorted by index.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_prefix("frame_") else { continue };
        let Some(digits) = stem.strip_suffix(".pgm").or_else(|| stem.strip_suffix(".ppm")) else {
            continue;
        };
        if let Ok(idx) = digits.parse::<usize>() {
            found.push((idx, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(invalid(format!("no frame_*.pgm/ppm files in {}", dir.display())));
    }
    paths.iter().map(|p| read_frame(p)).collect()
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|t| Frame::from_luma8(9, 8, &(0..72).map(|i| (i * 3 + t) as u8).collect::<Vec<_>>()).unwrap())
            .collect();
        write_frames(dir.path(), &frames).unwrap();
        let bytes = std::fs::read(dir.path().join("frame_00000.pgm")).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        let back = read_frames(dir.path()).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn ppm_is_converted_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_00000.ppm");
        let rgb: Vec<u8> = [0u8, 255, 0].repeat(64);
        image::save_buffer_with_format(&path, &rgb, 8, 8, image::ExtendedColorType::Rgb8, ImageFormat::Pnm).unwrap();
        let f = read_frame(&path).unwrap();
        assert!((f.get(3, 3) - 0.587).abs() < 1e-6);
    }

    #[test]
    fn corrupt_header_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_00000.pgm");
        std::fs::write(&path, b"P5\n8 x\n255\n").unwrap();
        let err = read_frame(&path).unwrap_err().to_string();
        assert!(err.contains("frame_00000.pgm"), "{err}");
    }
}

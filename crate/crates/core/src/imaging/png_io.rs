use std::fs;
use std::io::Cursor;
use std::path::Path;

use ndarray::Array3;

use super::ImageBuffer;
use crate::error::{Error, Result};

/// Storage encodings for PNG output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngEncoding {
    /// 16 bits per channel, values stored linearly.
    Linear16,
    /// 8 bits per channel with the sRGB transfer curve applied.
    Srgb8,
}

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn write_image(path: &Path, image: &ImageBuffer, encoding: PngEncoding) -> Result<()> {
    let bytes = encode(image, encoding).map_err(|e| Error::Unsupported {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode(image: &ImageBuffer, encoding: PngEncoding) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(if image.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        let payload: Vec<u8> = match encoding {
            PngEncoding::Linear16 => {
                enc.set_depth(png::BitDepth::Sixteen);
                image
                    .view()
                    .iter()
                    .flat_map(|&v| quantize16(v).to_be_bytes())
                    .collect()
            }
            PngEncoding::Srgb8 => {
                enc.set_depth(png::BitDepth::Eight);
                enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
                image
                    .view()
                    .iter()
                    .map(|&v| (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round() as u8)
                    .collect()
            }
        };
        let mut writer = enc.write_header()?;
        writer.write_image_data(&payload)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Quantise a linear value to 16 bits, clamping to `[0, 1]`.
pub(crate) fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

/// Read an 8-bit (sRGB) or 16-bit (linear) PNG. Alpha channels are dropped.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    validate_chunks(path, &bytes)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        message,
    };
    let decoder = png::Decoder::new(Cursor::new(&bytes));
    let mut reader = decoder.read_info().map_err(|e| parse_err(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    let unsupported = |message: String| Error::Unsupported {
        path: path.to_path_buf(),
        message,
    };
    let src_channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(unsupported("indexed color".into())),
    };
    let bytes_per_sample = match depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => return Err(unsupported(format!("bit depth {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| parse_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| parse_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Array3::<f32>::zeros((h, w, channels));
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            for c in 0..channels {
                let i = (x * src_channels + c) * bytes_per_sample;
                data[[y, x, c]] = if bytes_per_sample == 2 {
                    u16::from_be_bytes([row[i], row[i + 1]]) as f32 / 65535.0
                } else {
                    srgb_to_linear(row[i] as f32 / 255.0)
                };
            }
        }
    }
    ImageBuffer::new(data)
}

/// Walk the chunk list so structural damage is reported with its byte offset.
fn validate_chunks(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Err(fail(0, "missing PNG signature"));
    }
    let mut pos = 8;
    loop {
        if pos + 8 > bytes.len() {
            return Err(fail(pos, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let end = pos + 8 + len + 4;
        if end > bytes.len() {
            return Err(fail(pos, "chunk extends past end of file"));
        }
        let crc = u32::from_be_bytes(bytes[end - 4..end].try_into().unwrap());
        if crc32fast::hash(&bytes[pos + 4..end - 4]) != crc {
            return Err(fail(pos, "chunk CRC mismatch"));
        }
        if kind == b"IEND" {
            return Ok(());
        }
        pos = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn random_image(h: usize, w: usize, c: usize) -> ImageBuffer {
        let mut s = 12345u64;
        ImageBuffer::new(Array3::from_shape_fn((h, w, c), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        }))
        .unwrap()
    }

    #[test]
    fn linear16_roundtrip_bound() {
        let dir = tmp();
        let p = dir.path().join("a.png");
        let img = random_image(7, 9, 3);
        write_image(&p, &img, PngEncoding::Linear16).unwrap();
        let back = read_image(&p).unwrap();
        let err = img
            .view()
            .iter()
            .zip(back.view().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 65535.0, "max error {err}");
    }

    #[test]
    fn endpoints_are_exact() {
        let dir = tmp();
        for (v, enc) in [(0.0, PngEncoding::Linear16), (1.0, PngEncoding::Linear16), (0.0, PngEncoding::Srgb8), (1.0, PngEncoding::Srgb8)] {
            let p = dir.path().join("c.png");
            let img = ImageBuffer::filled(4, 5, 3, v).unwrap();
            write_image(&p, &img, enc).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn srgb8_mid_gray() {
        let dir = tmp();
        let p = dir.path().join("g.png");
        let img = ImageBuffer::filled(3, 3, 1, 0.5).unwrap();
        write_image(&p, &img, PngEncoding::Srgb8).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.channels(), 1);
        // Stored code: round(255 * srgb(0.5)) = 188.
        let code = (linear_to_srgb(0.5) * 255.0).round();
        assert_eq!(code, 188.0);
        let err = (back.view()[[1, 1, 0]] - 0.5).abs();
        assert!(err <= 1.0 / 255.0, "error {err}");
    }

    #[test]
    fn srgb_curve_inverts() {
        for i in 0..=100 {
            let v = i as f32 / 100.0;
            assert!((srgb_to_linear(linear_to_srgb(v)) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn malformed_reports_offset() {
        let dir = tmp();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        match read_image(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Corrupt the CRC of the first chunk (IHDR starts at byte 8).
        let good = dir.path().join("good.png");
        write_image(&good, &ImageBuffer::filled(2, 2, 3, 0.3).unwrap(), PngEncoding::Linear16).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[8 + 8 + 13] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        match read_image(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Truncation.
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn unsupported_bit_depth() {
        let dir = tmp();
        let p = dir.path().join("b.png");
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 8, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0b1010_1010]).unwrap();
        }
        std::fs::write(&p, out).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Unsupported { .. })));
    }
}

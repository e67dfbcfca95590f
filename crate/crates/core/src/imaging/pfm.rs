//! Grayscale PFM depth maps. Rows are stored bottom-up; invalid pixels are 0.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write_depth(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    if let Some(bad) = map.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("depth map contains {bad}")));
    }
    let header = format!("Pf\n{w} {h}\n-1.0\n");
    let mut bytes = Vec::with_capacity(header.len() + 4 * w * h);
    bytes.extend_from_slice(header.as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&map[[y, x]].to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };

    // Header: three whitespace-separated tokens after the magic, each line
    // terminated by a single whitespace byte.
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "unexpected end of header".into()));
        }
        let s = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        Ok((start, s))
    };
    let (off, magic) = token(&mut pos)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                message: "colour PFM; depth maps must be grayscale".into(),
            })
        }
        _ => return Err(fail(off, format!("bad magic {magic:?}"))),
    }
    let dim = |pos: &mut usize, what: &str| -> Result<usize> {
        let (off, s) = token(pos)?;
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| fail(off, format!("bad {what} {s:?}")))
    };
    let w = dim(&mut pos, "width")?;
    let h = dim(&mut pos, "height")?;
    let (off, scale) = token(&mut pos)?;
    let scale: f32 = scale
        .parse()
        .ok()
        .filter(|s: &f32| *s != 0.0 && s.is_finite())
        .ok_or_else(|| fail(off, format!("bad scale {scale:?}")))?;
    let little = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = 4 * w * h;
    if bytes.len() < pos + need {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: need {need} bytes after offset {pos}"),
        ));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for (i, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let row = h - 1 - i / w;
        out[[row, i % w]] = v;
    }
    Ok(out)
}

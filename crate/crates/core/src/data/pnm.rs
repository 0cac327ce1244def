//! Binary PGM (`P5`, one channel) and PPM (`P6`, three channels).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor};

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Quantizes `[0, 1]` values to 8 bits, rounding to nearest.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `H x W x C` tensor (C = 1 or 3) with maxval 255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape()[..] {
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => {
            return Err(Error::shape(format!(
                "PGM/PPM needs an HxWx1 or HxWx3 image, got {}",
                ShapeDisplay(image.shape())
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

/// Decodes a binary PGM/PPM into an `H x W x C` tensor scaled to `[0, 1]`.
/// Header comments are allowed; 16-bit samples (maxval > 255) are big-endian.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut at = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(image_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).unwrap_or(""));
    }
    // exactly one whitespace byte separates the header from the raster
    at += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(image_err(path, format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| image_err(path, format!("bad {what} {s:?}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval > 65535 {
        return Err(image_err(path, format!("maxval {maxval} out of range")));
    }
    let count = width * height * channels;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let raster = bytes
        .get(at..)
        .filter(|r| r.len() >= count * bytes_per)
        .ok_or_else(|| image_err(path, "truncated raster"))?;
    let maxval_f = maxval as f64;
    let data = if bytes_per == 1 {
        raster[..count].iter().map(|&b| b as f64 / maxval_f).collect()
    } else {
        raster[..count * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval_f)
            .collect()
    };
    Tensor::new(&[height, width, channels], data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_pnm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_on_grid() {
        let img = Tensor::from_fn(&[3, 4, 1], |i| (i * 20) as f64 / 255.0);
        let bytes = encode_pnm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let back = decode_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn color_with_comment_and_16_bit() {
        let bytes = b"P6\n# made by hand\n1 1\n65535\n\xff\xff\x00\x00\x80\x00".to_vec();
        let t = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn malformed() {
        let p = Path::new("bad.pgm");
        assert!(decode_pnm(b"P2\n1 1\n255\n0", p).is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00", p).is_err());
        assert!(decode_pnm(b"P5\n2", p).is_err());
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}

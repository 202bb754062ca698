//! Binary PPM (P6, maxval 255) images.

use std::fs;
use std::path::Path;

use kldiff_core::tensor::{ImageShape, ImageTensor};

use crate::error::{Error, Result};

/// Maps `[-1, 1]` to `0..=255`, rounding halves away from zero.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode(img: &ImageTensor) -> Result<Vec<u8>> {
    let ImageShape {
        channels,
        height,
        width,
    } = img.shape;
    if channels != 3 {
        return Err(kldiff_core::Error::Shape(format!("PPM needs 3 channels, image has {channels}")).into());
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                out.push(to_byte(img.at(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = encode(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_image`]. Comments in the header are
/// not supported.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        msg,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    // header: four whitespace-separated fields, then exactly one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("incomplete PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6, found {:?}", fields[0]));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (width, height, maxval) = (dim(&fields[1])?, dim(&fields[2])?, dim(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != width * height * 3 {
        return Err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            width * height * 3
        ));
    }
    let shape = ImageShape::new(3, height, width);
    let mut img = ImageTensor::zeros(shape);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let i = img.index(c, y, x);
                img.data[i] = from_byte(payload[(y * width + x) * 3 + c]);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(-3.0), 0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn black_image_payload_is_zero() {
        let img = ImageTensor::filled(ImageShape::new(3, 4, 5), -1.0);
        let bytes = encode(&img).unwrap();
        let header = b"P6\n5 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 60);
    }

    #[test]
    fn read_back_recovers_quantized_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let img = ImageTensor::randn(ImageShape::new(3, 16, 16), &mut rng).scaled(0.6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*b, from_byte(to_byte(*a)));
        }
        let again = dir.path().join("y.ppm");
        write_image(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode(b"P3\n1 1\n255\n000").is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode(b"P6\n2").is_err());
        assert!(encode(&ImageTensor::zeros(ImageShape::new(1, 2, 2))).is_err());
    }
}

//! Binary PGM/PPM dumps for eyeballing images.

use std::fs;
use std::path::Path;

use crate::error::{invalid, io_err, Error, Result};

/// Encodes one `(c, h, w)` image with `c ∈ {1, 3}` as P5 or P6, 8-bit.
pub fn encode(image: &[f64], [c, h, w]: [usize; 3]) -> Result<Vec<u8>> {
    if image.len() != c * h * w {
        return Err(invalid("image", format!("{} values for shape {:?}", image.len(), [c, h, w])));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(invalid("image channels", format!("{c} channels cannot be written as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push((image[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes what [`encode`] writes back into `(c, h, w)` planes in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<(Vec<f64>, [usize; 3])> {
    let bad = |offset: usize, msg: &str| Error::Format { offset: offset as u64, msg: msg.into() };
    let mut fields = Vec::with_capacity(4);
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
            return Err(bad(pos, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad(start, "header is not ASCII"))?.to_string());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad(0, "expected P5 or P6")),
    };
    let num = |i: usize| fields[i].parse::<usize>().map_err(|_| bad(0, "bad header number"));
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(bad(0, "only 8-bit images are supported"));
    }
    let plane = h * w;
    let body = bytes.get(pos..).filter(|b| b.len() == plane * c).ok_or_else(|| bad(pos, "pixel data length mismatch"))?;
    let mut image = vec![0.0; c * plane];
    for (i, &b) in body.iter().enumerate() {
        image[(i % c) * plane + i / c] = f64::from(b) / 255.0;
    }
    Ok((image, [c, h, w]))
}

pub fn write(path: &Path, image: &[f64], shape: [usize; 3]) -> Result<()> {
    fs::write(path, encode(image, shape)?).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<(Vec<f64>, [usize; 3])> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let img: Vec<f64> = (0..3 * 4 * 5).map(|i| i as f64 / 59.0).collect();
        let bytes = encode(&img, [3, 4, 5]).unwrap();
        let (back, shape) = decode(&bytes).unwrap();
        assert_eq!(shape, [3, 4, 5]);
        assert_eq!(encode(&back, shape).unwrap(), bytes);
        assert!(back.iter().zip(&img).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn grey_header() {
        let bytes = encode(&[0.0, 1.0], [1, 1, 2]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }
}

//! Binary PPM (P6) images and PGM (P5) label maps, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let pos = skip_space_and_comments(bytes, pos);
    let end = pos + bytes[pos.min(bytes.len())..].iter().take_while(|b| b.is_ascii_digit()).count();
    if end == pos {
        return Err(parse_err(pos, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[pos..end]).expect("ascii digits");
    let v = text
        .parse::<usize>()
        .map_err(|_| parse_err(pos, format!("{what} {text} out of range")))?;
    Ok((v, end))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let (width, pos) = read_uint(bytes, 2, "width")?;
    let (height, pos) = read_uint(bytes, pos, "height")?;
    let (maxval, pos) = read_uint(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(parse_err(pos, format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(pos, "zero-sized image"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(parse_err(pos, "expected one whitespace byte before the payload")),
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(parse_err(h.data_start + need, "trailing bytes after payload"));
    }
    Ok(&bytes[h.data_start..])
}

/// Encodes an `[H, W, 3]` image with values in `[0, 1]`; values are rounded
/// to the nearest of 256 levels and clamped.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Data(format!("PPM needs an [H, W, 3] image, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes a P6 file into an `[H, W, 3]` image scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(Tensor::new(
        vec![h.height, h.width, 3],
        data.iter().map(|&b| b as f32 / 255.0).collect(),
    )?)
}

/// Encodes a label map. Ids above 255 cannot be stored and are rejected.
pub fn encode_pgm<L: Copy + Into<u32>>(labels: &[L], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Data(format!(
            "{} labels for a {height}×{width} map",
            labels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for (i, &l) in labels.iter().enumerate() {
        let v: u32 = l.into();
        let b = u8::try_from(v).map_err(|_| Error::Data(format!("label {v} at pixel {i} exceeds 255")))?;
        out.push(b);
    }
    Ok(out)
}

/// Decodes a P5 label map into `(labels, height, width)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    Ok((data.to_vec(), h.height, h.width))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_labels<L: Copy + Into<u32>>(path: &Path, labels: &[L], height: usize, width: usize) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(labels, height, width)?)?)
}

pub fn read_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_pgm(&std::fs::read(path)?)
}

//! Portable float maps: `Pf` (one channel) or `PF` (three channels),
//! little-endian `f32`, rows stored bottom to top.

use std::path::Path;

use crate::tensor::Tensor;

use super::{IoError, Result};

/// Encode a `[C, H, W]` tensor with `C` of 1 or 3. Channels are interleaved
/// per pixel in the file.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(IoError::Format(format!("PFM needs [1|3, H, W], got {s:?}"))),
    };
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let plane = h * w;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(t.data()[ch * plane + y * w + x] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| IoError::Format("non-ASCII PFM header".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let c = match next_token(bytes, &mut pos)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(IoError::Format(format!("bad PFM tag {other:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| IoError::Format(format!("bad PFM extent {s:?}")))
    };
    let w = parse(next_token(bytes, &mut pos)?)?;
    let h = parse(next_token(bytes, &mut pos)?)?;
    let scale: f64 = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| IoError::Format("bad PFM scale".into()))?;
    // exactly one whitespace byte ends the header
    pos += 1;
    let need = c * w * h * 4;
    if bytes.len() < pos + need {
        return Err(IoError::Format(format!("PFM payload truncated: {} < {need}", bytes.len() - pos.min(bytes.len()))));
    }
    let little = scale < 0.0;
    let plane = w * h;
    let mut data = vec![0.0; c * plane];
    let mut k = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let b: [u8; 4] = bytes[k..k + 4].try_into().expect("4 bytes");
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                data[ch * plane + y * w + x] = v as f64;
                k += 4;
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], data)?)
}

pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    super::write_file(path, &encode_pfm(t)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&super::read_file(path)?)
}

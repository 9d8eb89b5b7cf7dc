//! Output containers: lossless float video files, PNG dumps, CSV tables.
//!
//! The binary AVF1 file is the authoritative artifact for tests; PNG dumps
//! exist for eyeballing results.

use crate::error::{Error, Result};
use ndarray::Array4;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const VIDEO_MAGIC: &[u8; 4] = b"AVF1";

/// Serialize frames to the little-endian AVF1 container.
pub fn video_to_bytes(frames: &Array4<f64>) -> Vec<u8> {
    let (n, h, w, c) = frames.dim();
    let mut out = Vec::with_capacity(20 + 4 * n * h * w * c);
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [n, h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn video_from_bytes(buf: &[u8]) -> Result<Array4<f64>> {
    if buf.len() < 20 || &buf[0..4] != VIDEO_MAGIC {
        return Err(Error::Format("bad video magic, expected AVF1".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    }
    let [n, h, w, c] = dims;
    let expect = 20 + 4 * n * h * w * c;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "video payload is {} bytes, header implies {expect}",
            buf.len()
        )));
    }
    let mut frames = Array4::zeros((n, h, w, c));
    for (i, v) in frames.iter_mut().enumerate() {
        let off = 20 + 4 * i;
        *v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64;
    }
    Ok(frames)
}

pub fn write_video(path: &Path, frames: &Array4<f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&video_to_bytes(frames))?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<Array4<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    video_from_bytes(&buf)
}

/// Dump every frame as an 8-bit PNG, mapping [-1, 1] to [0, 255].
pub fn dump_pngs(dir: &Path, frames: &Array4<f64>, prefix: &str) -> Result<()> {
    let (n, h, w, c) = frames.dim();
    if c != 3 && c != 1 {
        return Err(Error::Validation(format!("PNG dump supports 1 or 3 channels, got {c}")));
    }
    for fi in 0..n {
        let path = dir.join(format!("{prefix}{fi:03}.png"));
        let mut buf = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = (frames[[fi, i, j, ch]].clamp(-1.0, 1.0) + 1.0) * 127.5;
                    buf.push(v.round() as u8);
                }
            }
        }
        let result = if c == 3 {
            image::save_buffer(&path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        } else {
            image::save_buffer(&path, &buf, w as u32, h as u32, image::ColorType::L8)
        };
        result.map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// Write a CSV table with a header row. Values are written with enough
/// precision to round-trip f64.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn video_container_round_trips() {
        let frames = Array::from_shape_fn((2, 4, 4, 3), |(n, i, j, c)| {
            ((n + i + j + c) as f64 * 0.11).sin()
        });
        let bytes = video_to_bytes(&frames);
        let back = video_from_bytes(&bytes).unwrap();
        for (a, b) in frames.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(video_from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(video_from_bytes(&bad), Err(Error::Format(_))));
    }
}

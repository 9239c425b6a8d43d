//! 16-bit binary PGM (`P5`, maxval 65535, big-endian samples).

use std::io::{self, Read, Write};

use super::render::SynthImage;

pub const MAXVAL: u32 = 65535;

pub fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * MAXVAL as f64).round() as u16
}

pub fn dequantize(q: u16) -> f32 {
    (q as f64 / MAXVAL as f64) as f32
}

/// Image after a write/read round trip.
pub fn quantized(img: &SynthImage) -> SynthImage {
    SynthImage { pixels: img.pixels.iter().map(|v| dequantize(quantize(*v))).collect(), ..img.clone() }
}

pub fn write_pgm<W: Write>(img: &SynthImage, mut out: W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n{}\n", img.width, img.height, MAXVAL)?;
    let mut buf = Vec::with_capacity(img.pixels.len() * 2);
    for v in &img.pixels {
        buf.extend_from_slice(&quantize(*v).to_be_bytes());
    }
    out.write_all(&buf)
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Reads a binary PGM with 8- or 16-bit samples.
pub fn read_pgm<R: Read>(mut input: R) -> io::Result<SynthImage> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad(format!("unsupported PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad PGM header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("bad maxval {maxval}")));
    }
    let wide = maxval > 255;
    let n = width * height;
    let need = if wide { 2 * n } else { n };
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated PGM data"))?;
    let pixels = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32).collect()
    } else {
        data.iter().map(|b| *b as f32 / maxval as f32).collect()
    };
    Ok(SynthImage { height, width, pixels })
}

//! Binary PGM (P5) reading and writing.
//!
//! Float images are exported as 16-bit big-endian greymaps, linearly
//! rescaled so that the image minimum maps to 0 and the maximum to 65535.
//! The range used is returned (and written to a JSON sidecar by
//! [`write_scaled_with_sidecar`]) so values can be recovered.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Quantisation range recorded next to an exported map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    pub min: f64,
    pub max: f64,
    pub maxval: u16,
}

/// Raw decoded greymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn encode(map: &Greymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, map.maxval).into_bytes();
    if map.maxval > 255 {
        for &s in &map.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(map.samples.iter().map(|&s| s as u8));
    }
    out
}

/// Quantises `img` onto `0..=65535`.
pub fn quantize(img: &Image) -> (Greymap, Quantization) {
    let (min, max) = img.min_max();
    let span = max - min;
    let samples = img
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    (
        Greymap {
            width: img.width(),
            height: img.height(),
            maxval: 65535,
            samples,
        },
        Quantization {
            min,
            max,
            maxval: 65535,
        },
    )
}

pub fn write_scaled(path: impl AsRef<Path>, img: &Image) -> Result<Quantization> {
    let (map, q) = quantize(img);
    std::fs::File::create(path)?.write_all(&encode(&map))?;
    Ok(q)
}

/// Writes `name.pgm` plus `name.json` holding the quantisation range.
pub fn write_scaled_with_sidecar(
    dir: impl AsRef<Path>,
    name: &str,
    img: &Image,
) -> Result<Quantization> {
    let dir = dir.as_ref();
    let q = write_scaled(dir.join(format!("{name}.pgm")), img)?;
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&q)? + "\n",
    )?;
    Ok(q)
}

/// Writes label masks as an 8-bit greymap; `labels` are summed bit values.
pub fn write_labels(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    labels: &[u16],
    maxval: u16,
) -> Result<()> {
    let map = Greymap {
        width,
        height,
        maxval,
        samples: labels.to_vec(),
    };
    std::fs::File::create(path)?.write_all(&encode(&map))?;
    Ok(())
}

/// Body mask as bit 0, optional anomaly mask as bit 1.
pub fn mask_labels(body: &Mask, anomaly: Option<&Mask>) -> Vec<u16> {
    body.data()
        .iter()
        .enumerate()
        .map(|(i, &b)| b as u16 + 2 * anomaly.is_some_and(|a| a.data()[i]) as u16)
        .collect()
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<Greymap> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::Format(
            "only binary P5 greymaps are supported".into(),
        ));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "bad PGM geometry {width}x{height} max {maxval}"
        )));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width * height;
    let raster = &bytes[pos.min(bytes.len())..];
    let samples = if maxval > 255 {
        if raster.len() < 2 * n {
            return Err(Error::Format("truncated 16-bit raster".into()));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if raster.len() < n {
            return Err(Error::Format("truncated 8-bit raster".into()));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    };
    Ok(Greymap {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// Reconstructs float values from a greymap and its quantisation range.
pub fn dequantize(map: &Greymap, q: &Quantization) -> Result<Image> {
    let span = q.max - q.min;
    let data = map
        .samples
        .iter()
        .map(|&s| q.min + span * s as f64 / map.maxval as f64)
        .collect();
    Image::new(map.width, map.height, data)
}

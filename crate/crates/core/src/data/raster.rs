//! Binary Netpbm rasters: `P5` graymaps and `P6` pixmaps.
//!
//! Header: magic, width, height, maxval separated by whitespace (comments
//! starting with `#` are skipped), one whitespace byte, then samples.
//! Maxval up to 255 uses one byte per sample; up to 65535 uses two bytes,
//! big-endian.

use std::fs;
use std::path::Path;

use super::{DataError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, samples: Vec<u16>, maxval: u16) -> Self {
        assert_eq!(samples.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            maxval,
            samples,
        }
    }

    pub fn rgb(width: usize, height: usize, samples: Vec<u16>) -> Self {
        assert_eq!(samples.len(), width * height * 3);
        Self {
            width,
            height,
            channels: 3,
            maxval: 255,
            samples,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |offset: usize, msg: &str| DataError::Format {
            path: path.to_string(),
            offset,
            msg: msg.to_string(),
        };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(err(0, "bad magic, expected P5 or P6")),
        };
        let mut pos = 2;
        let mut field = |name: &str| -> Result<usize> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos {
                return Err(err(start, &format!("expected {name}")));
            }
            std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(start, &format!("{name} out of range")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(err(pos, "maxval must be in 1..=65535"));
        }
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(err(pos, "expected whitespace after header"));
        }
        pos += 1;
        let count = width * height * channels;
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let body = &bytes[pos..];
        if body.len() < count * bytes_per {
            return Err(err(pos + body.len(), "truncated sample data"));
        }
        let samples: Vec<u16> = if bytes_per == 2 {
            body[..count * 2].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            body[..count].iter().map(|&b| b as u16).collect()
        };
        if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
            return Err(err(pos + i * bytes_per, "sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Raster::decode(&bytes, &path.display().to_string())
}

pub const WHITE: [u16; 3] = [255, 255, 255];
pub const BLACK: [u16; 3] = [0, 0, 0];
pub const RED: [u16; 3] = [255, 0, 0];
pub const GREEN: [u16; 3] = [0, 255, 0];

/// Binary map as a 0/255 graymap, or, with ground truth, a colour-coded
/// pixmap: white true positive, black true negative, red false positive,
/// green false negative.
pub fn change_map(pred: &[u8], truth: Option<&[u8]>, width: usize, height: usize) -> Result<Raster> {
    if pred.len() != width * height || truth.is_some_and(|t| t.len() != pred.len()) {
        return Err(DataError::Invalid("change map size mismatch".into()));
    }
    if pred.iter().chain(truth.unwrap_or(&[])).any(|&v| v > 1) {
        return Err(DataError::Invalid("change maps must be binary".into()));
    }
    Ok(match truth {
        None => Raster::gray(width, height, pred.iter().map(|&p| p as u16 * 255).collect(), 255),
        Some(truth) => {
            let samples = pred
                .iter()
                .zip(truth)
                .flat_map(|(&p, &t)| match (p, t) {
                    (1, 1) => WHITE,
                    (0, 0) => BLACK,
                    (1, 0) => RED,
                    _ => GREEN,
                })
                .collect();
            Raster::rgb(width, height, samples)
        }
    })
}

pub fn write_change_map(pred: &[u8], truth: Option<&[u8]>, width: usize, height: usize, path: &Path) -> Result<()> {
    change_map(pred, truth, width, height)?.write(path)
}

/// Quantised 8-bit pixmap of an `H x W x 3` image in `[0, 1]`.
pub fn image_raster(image: &[f64], width: usize, height: usize) -> Raster {
    Raster::rgb(
        width,
        height,
        image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_code_fixture() {
        let r = change_map(&[1, 0, 0, 1], Some(&[1, 1, 0, 0]), 2, 2).unwrap();
        assert_eq!(r.samples, [WHITE, GREEN, BLACK, RED].concat());
    }

    #[test]
    fn graymap_bytes() {
        let bytes = change_map(&[1, 0], None, 2, 1).unwrap().encode();
        assert_eq!(bytes, b"P5\n2 1\n255\n\xff\x00");
    }

    #[test]
    fn decode_skips_comments() {
        let r = Raster::decode(b"P5 # made by hand\n1 2\n255\n\x07\x08", "mem").unwrap();
        assert_eq!((r.width, r.height, r.samples.clone()), (1, 2, vec![7, 8]));
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let r = Raster::gray(2, 1, vec![300, 65535], 65535);
        assert_eq!(Raster::decode(&r.encode(), "mem").unwrap(), r);
    }

    #[test]
    fn bad_magic_reports_offset() {
        match Raster::decode(b"P3\n1 1\n255\n0", "x.pgm") {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
        match Raster::decode(b"P5\n2 2\n255\n\x00", "x.pgm") {
            Err(DataError::Format { offset, msg, .. }) => {
                assert_eq!(offset, 12);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Bi-temporal samples, the synthetic change generator, tiling, and the
//! on-disk raster/dataset formats.

pub mod dataset;
pub mod raster;
pub mod synth;
pub mod tile;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("{path}: {msg} (at byte {offset})")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizeClass {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        SizeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown size class {s:?}")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rect,
    Disc,
    Polyline,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Polyline];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Disc => "disc",
            ShapeKind::Polyline => "polyline",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown shape {s:?}")))
    }
}

/// Whether the planted object appears in the second image or disappears from it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeKind {
    Added,
    Removed,
}

impl ChangeKind {
    pub fn name(self) -> &'static str {
        match self {
            ChangeKind::Added => "added",
            ChangeKind::Removed => "removed",
        }
    }
}

impl FromStr for ChangeKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "added" => Ok(ChangeKind::Added),
            "removed" => Ok(ChangeKind::Removed),
            _ => Err(DataError::Invalid(format!("unknown change kind {s:?}"))),
        }
    }
}

/// One planted change. `center` is in the sample's pixel coordinates and
/// may fall outside a tile that only partially contains the region.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub center: (i64, i64),
    pub radius: usize,
    pub size_class: SizeClass,
    pub shape: ShapeKind,
    pub kind: ChangeKind,
    pub pixels: usize,
}

/// Bi-temporal image pair with its change mask.
///
/// Images are `H x W x 3`, row-major interleaved, values in `[0, 1]`.
/// `region_map` holds `k + 1` at pixels of `regions[k]` and 0 elsewhere; the
/// mask is exactly its support.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSample {
    pub height: usize,
    pub width: usize,
    pub image_t1: Vec<f64>,
    pub image_t2: Vec<f64>,
    pub mask: Vec<u8>,
    pub region_map: Vec<u16>,
    pub regions: Vec<Region>,
}

impl ChangeSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.image_t1.len() != 3 * n || self.image_t2.len() != 3 * n {
            return Err(DataError::Invalid("image buffers do not match H x W x 3".into()));
        }
        if self.mask.len() != n || self.region_map.len() != n {
            return Err(DataError::Invalid("mask does not match H x W".into()));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(DataError::Invalid("mask must be binary".into()));
        }
        for (m, &r) in self.mask.iter().zip(&self.region_map) {
            if (*m == 1) != (r != 0) || r as usize > self.regions.len() {
                return Err(DataError::Invalid("mask and region map disagree".into()));
            }
        }
        Ok(())
    }

    /// Pixel membership of region `k` (0-based).
    pub fn region_pixels(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let label = (k + 1) as u16;
        self.region_map
            .iter()
            .enumerate()
            .filter(move |(_, &r)| r == label)
            .map(|(i, _)| i)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Date {
    T1,
    T2,
}

/// Stacks one date of several equally sized samples into `[N, 3, H, W]`.
pub fn images_to_tensor(samples: &[&ChangeSample], date: Date) -> Tensor {
    let (h, w) = (samples[0].height, samples[0].width);
    let hw = h * w;
    let mut out = vec![0.0; samples.len() * 3 * hw];
    for (b, s) in samples.iter().enumerate() {
        assert_eq!((s.height, s.width), (h, w), "samples in a batch must share a size");
        let img = match date {
            Date::T1 => &s.image_t1,
            Date::T2 => &s.image_t2,
        };
        for p in 0..hw {
            for c in 0..3 {
                out[(b * 3 + c) * hw + p] = img[p * 3 + c];
            }
        }
    }
    Tensor::new([samples.len(), 3, h, w], out).expect("consistent batch shape")
}

/// Concatenated `[N, H, W]` masks.
pub fn masks_of(samples: &[&ChangeSample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_to_tensor_is_nchw() {
        let s = ChangeSample {
            height: 1,
            width: 2,
            image_t1: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            image_t2: vec![0.0; 6],
            mask: vec![0, 0],
            region_map: vec![0, 0],
            regions: vec![],
        };
        let t = images_to_tensor(&[&s], Date::T1);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn names_round_trip() {
        for c in SizeClass::ALL {
            assert_eq!(c.name().parse::<SizeClass>().unwrap(), c);
        }
        for s in ShapeKind::ALL {
            assert_eq!(s.name().parse::<ShapeKind>().unwrap(), s);
        }
    }
}

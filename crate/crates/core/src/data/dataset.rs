//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.txt      one "<stem> <split>" line per sample
//! <dir>/regions.txt       one line per planted region
//! <dir>/t1/<stem>.ppm     first date, 8-bit pixmap
//! <dir>/t2/<stem>.ppm     second date
//! <dir>/mask/<stem>.pgm   change mask, 0 or 255
//! <dir>/labels/<stem>.pgm region map (0 background, k for the k-th region)
//! ```
//!
//! Lines starting with `#` are comments. Region lines read
//! `<stem> <k> <class> <shape> <kind> <cy> <cx> <radius> <pixels>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::raster::{image_raster, read_raster, Raster};
use super::synth::{Split, SplitCounts};
use super::{ChangeSample, DataError, Region, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const REGIONS: &str = "regions.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub stem: String,
    pub split: Split,
}

pub fn stem_of(index: usize) -> String {
    format!("sample_{index:05}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    [
        dir.join("t1").join(format!("{stem}.ppm")),
        dir.join("t2").join(format!("{stem}.ppm")),
        dir.join("mask").join(format!("{stem}.pgm")),
        dir.join("labels").join(format!("{stem}.pgm")),
    ]
}

/// Writes samples in split order as given by `splits`.
pub fn write_dataset(dir: &Path, samples: &[ChangeSample], splits: &SplitCounts) -> Result<Vec<Entry>> {
    if samples.len() != splits.total() {
        return Err(DataError::Invalid(format!(
            "{} samples for {} split slots",
            samples.len(),
            splits.total()
        )));
    }
    for sub in ["t1", "t2", "mask", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut manifest = String::from("# stem split\n");
    let mut regions = String::from("# stem k class shape kind cy cx radius pixels\n");
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let stem = stem_of(i);
        let split = splits.split_of(i);
        let [p1, p2, pm, pl] = paths(dir, &stem);
        image_raster(&s.image_t1, s.width, s.height).write(&p1)?;
        image_raster(&s.image_t2, s.width, s.height).write(&p2)?;
        Raster::gray(s.width, s.height, s.mask.iter().map(|&m| m as u16 * 255).collect(), 255).write(&pm)?;
        let maxval = if s.regions.len() > 255 { 65535 } else { 255 };
        Raster::gray(s.width, s.height, s.region_map.clone(), maxval).write(&pl)?;
        writeln!(manifest, "{stem} {}", split.name()).unwrap();
        for (k, r) in s.regions.iter().enumerate() {
            writeln!(
                regions,
                "{stem} {} {} {} {} {} {} {} {}",
                k + 1,
                r.size_class.name(),
                r.shape.name(),
                r.kind.name(),
                r.center.0,
                r.center.1,
                r.radius,
                r.pixels
            )
            .unwrap();
        }
        entries.push(Entry { stem, split });
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(io_err(&p))?;
    let p = dir.join(REGIONS);
    fs::write(&p, regions).map_err(io_err(&p))?;
    Ok(entries)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    content_lines(&text)
        .map(|(n, line)| {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(stem), Some(split), None) => Ok(Entry {
                    stem: stem.to_string(),
                    split: Split::parse(split)?,
                }),
                _ => Err(DataError::Invalid(format!("{}:{n}: expected \"<stem> <split>\"", p.display()))),
            }
        })
        .collect()
}

fn read_regions(dir: &Path) -> Result<Vec<(String, usize, Region)>> {
    let p = dir.join(REGIONS);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    content_lines(&text)
        .map(|(n, line)| {
            let bad = || DataError::Invalid(format!("{}:{n}: malformed region line", p.display()));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad());
            Ok((
                f[0].to_string(),
                f[1].parse::<usize>().map_err(|_| bad())?,
                Region {
                    size_class: f[2].parse()?,
                    shape: f[3].parse()?,
                    kind: f[4].parse()?,
                    center: (int(f[5])?, int(f[6])?),
                    radius: int(f[7])? as usize,
                    pixels: int(f[8])? as usize,
                },
            ))
        })
        .collect()
}

fn to_unit(r: &Raster, path: &Path) -> Result<Vec<f64>> {
    if r.channels != 3 || r.maxval != 255 {
        return Err(DataError::Invalid(format!("{}: expected an 8-bit pixmap", path.display())));
    }
    Ok(r.samples.iter().map(|&v| v as f64 / 255.0).collect())
}

fn read_pair(dir: &Path, stem: &str, regions: Vec<Region>) -> Result<ChangeSample> {
    let [p1, p2, pm, pl] = paths(dir, stem);
    let (r1, r2, rm, rl) = (read_raster(&p1)?, read_raster(&p2)?, read_raster(&pm)?, read_raster(&pl)?);
    let dims = (r1.width, r1.height);
    if [(r2.width, r2.height), (rm.width, rm.height), (rl.width, rl.height)].iter().any(|d| *d != dims) {
        return Err(DataError::Invalid(format!("{stem}: rasters disagree in size")));
    }
    if rm.channels != 1 || rm.samples.iter().any(|&v| v != 0 && v != rm.maxval) {
        return Err(DataError::Invalid(format!("{}: mask must be a binary graymap", pm.display())));
    }
    let s = ChangeSample {
        height: r1.height,
        width: r1.width,
        image_t1: to_unit(&r1, &p1)?,
        image_t2: to_unit(&r2, &p2)?,
        mask: rm.samples.iter().map(|&v| (v != 0) as u8).collect(),
        region_map: rl.samples,
        regions,
    };
    s.validate()?;
    Ok(s)
}

/// Every sample of `split`, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ChangeSample>> {
    let entries = read_manifest(dir)?;
    let mut regions = read_regions(dir)?;
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let mut mine: Vec<(usize, Region)> = Vec::new();
            regions.retain(|(stem, k, r)| {
                let hit = *stem == e.stem;
                if hit {
                    mine.push((*k, r.clone()));
                }
                !hit
            });
            mine.sort_by_key(|(k, _)| *k);
            if mine.iter().enumerate().any(|(i, (k, _))| *k != i + 1) {
                return Err(DataError::Invalid(format!("{}: region ids are not 1..n", e.stem)));
            }
            read_pair(dir, &e.stem, mine.into_iter().map(|(_, r)| r).collect())
        })
        .collect()
}

/// A standalone pair without mask, e.g. for prediction.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let r = read_raster(path)?;
    Ok((r.height, r.width, to_unit(&r, path)?))
}

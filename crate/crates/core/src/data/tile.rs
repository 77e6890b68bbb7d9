//! Row-major tiling with boundary-anchored edge windows.

use super::{ChangeSample, DataError, Region, Result};

/// Window origins along one axis: `0, stride, 2*stride, ...` with the last
/// window shifted so it ends exactly at the boundary.
pub fn anchors(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(DataError::Invalid("tile size and stride must be positive".into()));
    }
    if extent < size {
        return Err(DataError::Invalid(format!("image extent {extent} is smaller than tile size {size}")));
    }
    let last = extent - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub y: usize,
    pub x: usize,
    pub sample: ChangeSample,
}

pub fn tile(sample: &ChangeSample, size: usize, stride: usize) -> Result<Vec<Tile>> {
    let ys = anchors(sample.height, size, stride)?;
    let xs = anchors(sample.width, size, stride)?;
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .map(|(y, x)| Tile {
            y,
            x,
            sample: crop(sample, y, x, size, size),
        })
        .collect())
}

/// Congruent crop of both images, the mask and the region map. Regions with
/// no pixel inside the window are dropped and the rest relabelled in order.
pub fn crop(s: &ChangeSample, y0: usize, x0: usize, h: usize, w: usize) -> ChangeSample {
    let mut image_t1 = Vec::with_capacity(h * w * 3);
    let mut image_t2 = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        let row = y * s.width;
        image_t1.extend_from_slice(&s.image_t1[(row + x0) * 3..(row + x0 + w) * 3]);
        image_t2.extend_from_slice(&s.image_t2[(row + x0) * 3..(row + x0 + w) * 3]);
        mask.extend_from_slice(&s.mask[row + x0..row + x0 + w]);
        labels.extend_from_slice(&s.region_map[row + x0..row + x0 + w]);
    }
    let mut counts = vec![0usize; s.regions.len() + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut relabel = vec![0u16; s.regions.len() + 1];
    let mut regions = Vec::new();
    for (k, r) in s.regions.iter().enumerate() {
        if counts[k + 1] > 0 {
            regions.push(Region {
                center: (r.center.0 - y0 as i64, r.center.1 - x0 as i64),
                pixels: counts[k + 1],
                ..r.clone()
            });
            relabel[k + 1] = regions.len() as u16;
        }
    }
    let region_map = labels.iter().map(|&l| relabel[l as usize]).collect();
    ChangeSample {
        height: h,
        width: w,
        image_t1,
        image_t2,
        mask,
        region_map,
        regions,
    }
}

/// Writes every tile back at its anchor. Overlapping pixels take the value of
/// the later tile; region metadata is not reconstructed.
pub fn untile(tiles: &[Tile], height: usize, width: usize) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
    let mut t1 = vec![0.0; height * width * 3];
    let mut t2 = vec![0.0; height * width * 3];
    let mut mask = vec![0u8; height * width];
    for t in tiles {
        let s = &t.sample;
        for dy in 0..s.height {
            let dst = (t.y + dy) * width + t.x;
            let src = dy * s.width;
            t1[dst * 3..(dst + s.width) * 3].copy_from_slice(&s.image_t1[src * 3..(src + s.width) * 3]);
            t2[dst * 3..(dst + s.width) * 3].copy_from_slice(&s.image_t2[src * 3..(src + s.width) * 3]);
            mask[dst..dst + s.width].copy_from_slice(&s.mask[src..src + s.width]);
        }
    }
    (t1, t2, mask)
}

//! Slice preprocessing: short-side resize and Otsu-based background cropping
//! with one crop rect per volume.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Half-open crop rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::InvalidInput(format!(
                "invalid crop rect {self:?} for {width}x{height} image"
            )));
        }
        Ok(())
    }
}

/// Bilinear resample of `image` to exactly (out_h, out_w).
pub fn resize_bilinear(image: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = image.dim();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f32;
        let dx = fx - x0 as f32;
        let top = image[[y0, x0]] * (1.0 - dx) + image[[y0, x1]] * dx;
        let bot = image[[y1, x0]] * (1.0 - dx) + image[[y1, x1]] * dx;
        top * (1.0 - dy) + bot * dy
    })
}

/// Resizes so the short side equals `target`, preserving aspect ratio within
/// rounding. Returns the input unchanged when the short side already matches.
pub fn resize_short_side(image: &Array2<f32>, target: usize) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if target == 0 {
        return Err(Error::InvalidInput("resize target must be >= 1".into()));
    }
    let short = h.min(w);
    if short == target {
        return Ok(image.clone());
    }
    let scale = target as f64 / short as f64;
    let (out_h, out_w) = if h <= w {
        (target, ((w as f64) * scale).round() as usize)
    } else {
        (((h as f64) * scale).round() as usize, target)
    };
    Ok(resize_bilinear(image, out_h.max(1), out_w.max(1)))
}

/// Otsu threshold over a 256-bin histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuResult {
    /// Chosen bin level `t`; foreground is everything in bins above `t`.
    pub level: u8,
    /// Set when every pixel falls in a single bin, so no split has positive
    /// between-class variance.
    pub degenerate: bool,
}

/// Returns the level maximizing between-class variance, ties broken toward
/// the lower level. For a constant image the occupied bin's level is returned
/// with the degenerate flag set.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<OtsuResult> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("empty histogram".into()));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(OtsuResult {
            level: occupied[0] as u8,
            degenerate: true,
        });
    }

    let total_f = total as f64;
    let total_sum: f64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();

    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best_level = 0u8;
    let mut best_var = f64::NEG_INFINITY;
    for (t, &count) in histogram.iter().enumerate() {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_level = t as u8;
        }
    }
    Ok(OtsuResult {
        level: best_level,
        degenerate: false,
    })
}

/// Bins f32 intensities into 256 levels by linear scaling of [lo, hi].
pub fn bin_intensity(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo) * 255.0).round();
    t.clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBounds {
    pub rect: CropRect,
    /// True when every slice was constant, so the full-image rect was used.
    pub degenerate: bool,
}

/// Computes the volume-wide crop: foreground = pixels strictly above the Otsu
/// level of the pooled (per-volume min/max binned) histogram; the rect is the
/// bounding box of the union of per-slice foregrounds, padded by `pad` pixels
/// and clipped to the image bounds.
pub fn volume_crop_bounds_detailed(slices: &[Array2<f32>], pad: usize) -> Result<CropBounds> {
    if slices.is_empty() {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    let (h, w) = slices[0].dim();
    if slices.iter().any(|s| s.dim() != (h, w)) {
        return Err(Error::InvalidInput(
            "all slices of a volume must share one shape".into(),
        ));
    }
    let full = CropRect {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
    };

    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for s in slices {
        for &v in s.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi <= lo {
        log::warn!("degenerate volume (constant intensity); using full-image crop");
        return Ok(CropBounds {
            rect: full,
            degenerate: true,
        });
    }

    let mut hist = [0u64; 256];
    for s in slices {
        for &v in s.iter() {
            hist[bin_intensity(v, lo, hi) as usize] += 1;
        }
    }
    let otsu = otsu_threshold(&hist)?;
    if otsu.degenerate {
        log::warn!("degenerate volume histogram; using full-image crop");
        return Ok(CropBounds {
            rect: full,
            degenerate: true,
        });
    }

    let mut min_x = w;
    let mut max_x = 0usize;
    let mut min_y = h;
    let mut max_y = 0usize;
    let mut any = false;
    for s in slices {
        for ((y, x), &v) in s.indexed_iter() {
            if bin_intensity(v, lo, hi) > otsu.level {
                any = true;
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        log::warn!("no foreground pixels above Otsu level; using full-image crop");
        return Ok(CropBounds {
            rect: full,
            degenerate: true,
        });
    }

    let rect = CropRect {
        x0: min_x.saturating_sub(pad),
        y0: min_y.saturating_sub(pad),
        x1: (max_x + 1 + pad).min(w),
        y1: (max_y + 1 + pad).min(h),
    };
    Ok(CropBounds {
        rect,
        degenerate: false,
    })
}

/// See [`volume_crop_bounds_detailed`]; default padding of 8 pixels.
pub fn volume_crop_bounds(slices: &[Array2<f32>]) -> Result<CropRect> {
    Ok(volume_crop_bounds_detailed(slices, DEFAULT_CROP_PAD)?.rect)
}

pub const DEFAULT_CROP_PAD: usize = 8;

pub fn crop(image: &Array2<f32>, rect: &CropRect) -> Array2<f32> {
    image
        .slice(ndarray::s![rect.y0..rect.y1, rect.x0..rect.x1])
        .to_owned()
}

/// Result of preprocessing one volume.
pub struct PreprocessedVolume {
    pub volume: Volume,
    pub rect: CropRect,
    pub degenerate: bool,
    /// Annotation bbox mapped into the output coordinate frame, if any.
    pub bbox: Option<BBox>,
}

/// Maps a bbox through the short-side resize (scale) and crop (offset),
/// clipping the result into the cropped frame.
pub fn remap_bbox(
    bbox: &BBox,
    orig: (usize, usize),
    resized: (usize, usize),
    rect: &CropRect,
) -> BBox {
    let (oh, ow) = orig;
    let (rh, rw) = resized;
    let sx = rw as f64 / ow as f64;
    let sy = rh as f64 / oh as f64;
    let x0 = (f64::from(bbox.x) * sx).round() as i64 - rect.x0 as i64;
    let y0 = (f64::from(bbox.y) * sy).round() as i64 - rect.y0 as i64;
    let bw = ((f64::from(bbox.w) * sx).round() as i64).max(1);
    let bh = ((f64::from(bbox.h) * sy).round() as i64).max(1);
    let cw = rect.width() as i64;
    let ch = rect.height() as i64;
    let cx0 = x0.clamp(0, cw - 1);
    let cy0 = y0.clamp(0, ch - 1);
    let cx1 = (x0 + bw).clamp(cx0 + 1, cw);
    let cy1 = (y0 + bh).clamp(cy0 + 1, ch);
    BBox {
        x: cx0 as u32,
        y: cy0 as u32,
        w: (cx1 - cx0) as u32,
        h: (cy1 - cy0) as u32,
    }
}

/// Resizes every slice of a volume to `short_side`, computes the volume crop,
/// applies it to all slices, and remaps the annotation bbox.
pub fn preprocess_volume(
    volume: &Volume,
    bbox: Option<&BBox>,
    short_side: usize,
    pad: usize,
) -> Result<PreprocessedVolume> {
    let n = volume.n_slices();
    let (oh, ow) = (volume.height(), volume.width());
    let mut resized: Vec<Array2<f32>> = Vec::with_capacity(n);
    for z in 0..n {
        resized.push(resize_short_side(&volume.slice_f32(z), short_side)?);
    }
    let (rh, rw) = resized[0].dim();
    let bounds = volume_crop_bounds_detailed(&resized, pad)?;
    let rect = bounds.rect;
    let mut out = Array3::<u16>::zeros((n, rect.height(), rect.width()));
    for (z, s) in resized.iter().enumerate() {
        let cropped = crop(s, &rect);
        let quantized = cropped.map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16);
        out.index_axis_mut(ndarray::Axis(0), z).assign(&quantized);
    }
    let mapped = bbox.map(|b| remap_bbox(b, (oh, ow), (rh, rw), &rect));
    Ok(PreprocessedVolume {
        volume: Volume { data: out },
        rect,
        degenerate: bounds.degenerate,
        bbox: mapped,
    })
}

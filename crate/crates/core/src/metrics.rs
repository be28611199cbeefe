//! Harmonization fidelity metrics (MAE/PSNR and their foreground variants)
//! and segmentation metrics (Dice, average surface distance, 95th-percentile
//! Hausdorff distance).

use thiserror::Error;

use crate::volume::{Mask3D, Volume3D};

/// PSNR reported when the error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("volume dims {lhs:?} do not match {rhs:?}")]
    DimMismatch { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
    #[error("metric region is empty")]
    EmptyRegion,
    #[error("surface metrics are undefined for an empty mask")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonizationReport {
    pub mae: f64,
    pub fmae: f64,
    pub psnr_db: f64,
    pub fpsnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationReport {
    pub dice: f64,
    pub asd_mm: f64,
    pub hd95_mm: f64,
}

fn check_dims(a: &Volume3D, b: &Volume3D, region: Option<&Mask3D>) -> Result<(), MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch { lhs: a.dims, rhs: b.dims });
    }
    if let Some(m) = region {
        if m.dims != a.dims {
            return Err(MetricsError::DimMismatch { lhs: m.dims, rhs: a.dims });
        }
    }
    Ok(())
}

fn region_moments(
    a: &Volume3D,
    b: &Volume3D,
    region: Option<&Mask3D>,
) -> Result<(f64, f64), MetricsError> {
    check_dims(a, b, region)?;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for v in 0..a.data.len() {
        if let Some(m) = region {
            if m.data[v] == 0 {
                continue;
            }
        }
        let d = a.data[v] as f64 - b.data[v] as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok((abs_sum / count as f64, sq_sum / count as f64))
}

/// Mean absolute error over the region (whole volume when absent).
pub fn mae(a: &Volume3D, b: &Volume3D, region: Option<&Mask3D>) -> Result<f64, MetricsError> {
    Ok(region_moments(a, b, region)?.0)
}

/// 10 log10(peak^2 / MSE) over the region, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Volume3D, b: &Volume3D, region: Option<&Mask3D>) -> Result<f64, MetricsError> {
    psnr_with(a, b, region, 1.0)
}

pub fn psnr_with(
    a: &Volume3D,
    b: &Volume3D,
    region: Option<&Mask3D>,
    peak: f64,
) -> Result<f64, MetricsError> {
    let mse = region_moments(a, b, region)?.1;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn harmonization_report(
    target: &Volume3D,
    output: &Volume3D,
    mask: &Mask3D,
) -> Result<HarmonizationReport, MetricsError> {
    Ok(HarmonizationReport {
        mae: mae(target, output, None)?,
        fmae: mae(target, output, Some(mask))?,
        psnr_db: psnr(target, output, None)?,
        fpsnr_db: psnr(target, output, Some(mask))?,
    })
}

/// 2|A and B| / (|A| + |B|); 1 when both masks are empty.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64, MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch { lhs: a.dims, rhs: b.dims });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x != 0 && y != 0) as usize;
        total += (x != 0) as usize + (y != 0) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with at least one background 6-neighbor; the volume
/// border counts as background.
pub fn surface_voxels(m: &Mask3D) -> Vec<(usize, usize, usize)> {
    let (h, w, d) = m.dims;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if m.get(i, j, k) == 0 {
                    continue;
                }
                let exposed = i == 0
                    || m.get(i - 1, j, k) == 0
                    || i + 1 == h
                    || m.get(i + 1, j, k) == 0
                    || j == 0
                    || m.get(i, j - 1, k) == 0
                    || j + 1 == w
                    || m.get(i, j + 1, k) == 0
                    || k == 0
                    || m.get(i, j, k - 1) == 0
                    || k + 1 == d
                    || m.get(i, j, k + 1) == 0;
                if exposed {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// Sorted symmetric multiset of nearest-surface distances in mm: every
/// surface voxel of A to B's surface, and vice versa.
pub fn surface_distances(
    a: &Mask3D,
    b: &Mask3D,
    spacing: (f32, f32, f32),
) -> Result<Vec<f64>, MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch { lhs: a.dims, rhs: b.dims });
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    let nearest = |p: (usize, usize, usize), set: &[(usize, usize, usize)]| -> f64 {
        set.iter()
            .map(|q| {
                let di = (p.0 as f64 - q.0 as f64) * spacing.0 as f64;
                let dj = (p.1 as f64 - q.1 as f64) * spacing.1 as f64;
                let dk = (p.2 as f64 - q.2 as f64) * spacing.2 as f64;
                (di * di + dj * dj + dk * dk).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    for &p in &sa {
        out.push(nearest(p, &sb));
    }
    for &p in &sb {
        out.push(nearest(p, &sa));
    }
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(out)
}

/// Mean of the combined multiset.
pub fn asd(distances: &[f64]) -> f64 {
    distances.iter().sum::<f64>() / distances.len() as f64
}

/// 95th percentile with linear interpolation between order statistics.
pub fn hd95(distances: &[f64]) -> f64 {
    percentile(distances, 95.0)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn segmentation_report(
    a: &Mask3D,
    b: &Mask3D,
    spacing: (f32, f32, f32),
) -> Result<SegmentationReport, MetricsError> {
    let d = dice(a, b)?;
    let distances = surface_distances(a, b, spacing)?;
    Ok(SegmentationReport { dice: d, asd_mm: asd(&distances), hd95_mm: hd95(&distances) })
}

#[cfg(test)]
mod tests;

//! Lesion-aware augmentation: foreground intensity perturbation, boundary
//! extraction and Copy-Paste compositing.

use rand::Rng;
use thiserror::Error;

use crate::volume::{Mask3D, Volume3D};

pub const PERTURBATION_RANGE: f32 = 0.3;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("dimension mismatch: {context} (left {left:?}, right {right:?})")]
    DimMismatch {
        context: &'static str,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("no valid placement found within {attempts} attempts")]
    PlacementFailure { attempts: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Multiplicative/additive foreground intensity perturbation factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub alpha: f32,
    pub lambda: f32,
}

impl Perturbation {
    pub const IDENTITY: Perturbation = Perturbation { alpha: 0.0, lambda: 0.0 };
}

/// Draw alpha and lambda independently, uniform on [-0.3, 0.3].
pub fn sample_perturbation(rng: &mut impl Rng) -> Perturbation {
    let alpha = rng.gen_range(-PERTURBATION_RANGE..=PERTURBATION_RANGE);
    let lambda = rng.gen_range(-PERTURBATION_RANGE..=PERTURBATION_RANGE);
    Perturbation { alpha, lambda }
}

/// Foreground: clamp01((1+alpha)*I + lambda); background voxels bit-identical.
pub fn perturb_foreground(
    image: &Volume3D,
    mask: &Mask3D,
    p: Perturbation,
) -> Result<Volume3D, AugmentError> {
    if image.dims != mask.dims {
        return Err(AugmentError::DimMismatch {
            context: "perturb_foreground",
            left: image.dims,
            right: mask.dims,
        });
    }
    let mut out = image.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask.data) {
        if m == 1 {
            *v = ((1.0 + p.alpha) * *v + p.lambda).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Band of voxels straddling the mask border:
/// dilate(M, radius) AND NOT erode(M, radius), 6-connected.
pub fn extract_boundary(mask: &Mask3D, radius: usize) -> Mask3D {
    assert!(radius >= 1, "boundary radius must be >= 1");
    let dilated = morph(mask, radius, true);
    let eroded = morph(mask, radius, false);
    let data = dilated
        .data
        .iter()
        .zip(&eroded.data)
        .map(|(&d, &e)| d & (1 - e))
        .collect();
    Mask3D { dims: mask.dims, data }
}

/// 6-connected dilation applied `radius` times.
pub fn dilate(mask: &Mask3D, radius: usize) -> Mask3D {
    morph(mask, radius, true)
}

/// One 6-connected dilation or erosion step applied `radius` times.
/// Outside the volume counts as background.
fn morph(mask: &Mask3D, radius: usize, dilate: bool) -> Mask3D {
    let (h, w, d) = mask.dims;
    let mut cur = mask.clone();
    for _ in 0..radius {
        let mut next = cur.clone();
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let neighbors = [
                        (i > 0).then(|| cur.get(i - 1, j, k)),
                        (i + 1 < h).then(|| cur.get(i + 1, j, k)),
                        (j > 0).then(|| cur.get(i, j - 1, k)),
                        (j + 1 < w).then(|| cur.get(i, j + 1, k)),
                        (k > 0).then(|| cur.get(i, j, k - 1)),
                        (k + 1 < d).then(|| cur.get(i, j, k + 1)),
                    ];
                    if dilate {
                        if cur.get(i, j, k) == 0 && neighbors.iter().flatten().any(|&n| n == 1) {
                            next.set(i, j, k, 1);
                        }
                    } else if cur.get(i, j, k) == 1
                        && neighbors.iter().any(|n| n.map_or(true, |n| n == 0))
                    {
                        next.set(i, j, k, 0);
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Placement constraints for Copy-Paste compositing.
#[derive(Debug, Clone)]
pub struct PlacementPolicy {
    pub max_attempts: usize,
    pub allow_overlap: bool,
    /// Optional mask restricting where pasted foreground voxels may land.
    pub host_region: Option<Mask3D>,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy { max_attempts: 100, allow_overlap: false, host_region: None }
    }
}

/// Hard-paste the donor lesion into the host at a uniformly sampled offset.
pub fn copy_paste(
    host: &Volume3D,
    host_mask: &Mask3D,
    donor: &Volume3D,
    donor_mask: &Mask3D,
    policy: &PlacementPolicy,
    rng: &mut impl Rng,
) -> Result<(Volume3D, Mask3D), AugmentError> {
    assert!(policy.max_attempts >= 1);
    if host.dims != host_mask.dims {
        return Err(AugmentError::DimMismatch {
            context: "copy_paste host",
            left: host.dims,
            right: host_mask.dims,
        });
    }
    if donor.dims != donor_mask.dims {
        return Err(AugmentError::DimMismatch {
            context: "copy_paste donor",
            left: donor.dims,
            right: donor_mask.dims,
        });
    }
    let (lo, hi) = donor_mask
        .bounding_box()
        .ok_or_else(|| AugmentError::Precondition("donor mask is empty".into()))?;
    let bbox = (hi.0 - lo.0 + 1, hi.1 - lo.1 + 1, hi.2 - lo.2 + 1);
    let (hh, hw, hd) = host.dims;
    if bbox.0 > hh || bbox.1 > hw || bbox.2 > hd {
        return Err(AugmentError::Precondition(format!(
            "donor lesion bounding box {bbox:?} does not fit inside host dims {:?}",
            host.dims
        )));
    }

    // Foreground voxels of the donor lesion, bbox-relative.
    let lesion: Vec<((usize, usize, usize), f32)> = (lo.0..=hi.0)
        .flat_map(|i| {
            (lo.1..=hi.1).flat_map(move |j| {
                (lo.2..=hi.2).filter_map(move |k| {
                    (donor_mask.get(i, j, k) == 1)
                        .then(|| ((i - lo.0, j - lo.1, k - lo.2), donor.get(i, j, k)))
                })
            })
        })
        .collect();

    for _ in 0..policy.max_attempts {
        let oi = rng.gen_range(0..=(hh - bbox.0));
        let oj = rng.gen_range(0..=(hw - bbox.1));
        let ok = rng.gen_range(0..=(hd - bbox.2));
        let fits = lesion.iter().all(|&((i, j, k), _)| {
            let (pi, pj, pk) = (oi + i, oj + j, ok + k);
            if !policy.allow_overlap && host_mask.get(pi, pj, pk) == 1 {
                return false;
            }
            match &policy.host_region {
                Some(region) => region.get(pi, pj, pk) == 1,
                None => true,
            }
        });
        if fits {
            let mut out_vol = host.clone();
            let mut out_mask = host_mask.clone();
            for &((i, j, k), value) in &lesion {
                out_vol.set(oi + i, oj + j, ok + k, value);
                out_mask.set(oi + i, oj + j, ok + k, 1);
            }
            return Ok((out_vol, out_mask));
        }
    }
    Err(AugmentError::PlacementFailure { attempts: policy.max_attempts })
}

//! Volume and mask value types, intensity normalization and patch geometry.
//!
//! Voxel storage order is fixed as `index = (i*W + j)*D + k` for dims `(H, W, D)`.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dimension mismatch: {context} (left {left:?}, right {right:?})")]
    DimMismatch {
        context: &'static str,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("invalid patch spec: origin {origin:?} size {size:?} for volume dims {dims:?}")]
    InvalidPatch {
        origin: (usize, usize, usize),
        size: (usize, usize, usize),
        dims: (usize, usize, usize),
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Scalar 3D intensity field with spacing and passthrough affine metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: Vec<f32>,
    pub affine: Option<[[f32; 4]; 4]>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Self {
        assert_eq!(data.len(), dims.0 * dims.1 * dims.2, "data length must be H*W*D");
        assert!(
            spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0,
            "spacing components must be positive"
        );
        Volume3D { dims, spacing, data, affine: None }
    }

    pub fn filled(dims: (usize, usize, usize), value: f32) -> Self {
        Self::new(dims, (1.0, 1.0, 1.0), vec![value; dims.0 * dims.1 * dims.2])
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self::filled(dims, 0.0)
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.idx(i, j, k);
        self.data[idx] = v;
    }
}

/// Binary 3D field paired with a [`Volume3D`] of the same dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    pub dims: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl Mask3D {
    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Self {
        assert_eq!(data.len(), dims.0 * dims.1 * dims.2, "data length must be H*W*D");
        assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Mask3D { dims, data }
    }

    pub fn empty(dims: (usize, usize, usize)) -> Self {
        Mask3D { dims, data: vec![0; dims.0 * dims.1 * dims.2] }
    }

    pub fn filled(dims: (usize, usize, usize)) -> Self {
        Mask3D { dims, data: vec![1; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u8) {
        debug_assert!(v <= 1);
        let idx = self.idx(i, j, k);
        self.data[idx] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Inclusive bounding box of foreground voxels, or None when empty.
    pub fn bounding_box(&self) -> Option<((usize, usize, usize), (usize, usize, usize))> {
        let (h, w, d) = self.dims;
        let mut lo = (usize::MAX, usize::MAX, usize::MAX);
        let mut hi = (0usize, 0usize, 0usize);
        let mut any = false;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    if self.get(i, j, k) == 1 {
                        any = true;
                        lo = (lo.0.min(i), lo.1.min(j), lo.2.min(k));
                        hi = (hi.0.max(i), hi.1.max(j), hi.2.max(k));
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Binarize a float volume (> 0.5 is foreground).
    pub fn from_volume(v: &Volume3D) -> Self {
        Mask3D {
            dims: v.dims,
            data: v.data.iter().map(|&x| u8::from(x > 0.5)).collect(),
        }
    }

    /// Represent the mask as a 0/1 float volume with unit spacing.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(
            self.dims,
            (1.0, 1.0, 1.0),
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// A window into a volume: voxel origin plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (usize, usize, usize),
    pub size: (usize, usize, usize),
}

impl PatchSpec {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<(), VolumeError> {
        let ok = self.origin.0 + self.size.0 <= dims.0
            && self.origin.1 + self.size.1 <= dims.1
            && self.origin.2 + self.size.2 <= dims.2;
        if ok {
            Ok(())
        } else {
            Err(VolumeError::InvalidPatch { origin: self.origin, size: self.size, dims })
        }
    }
}

/// Min-max scale to [0, 1]; a constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume3D) -> Volume3D {
    assert!(v.voxel_count() > 0, "volume must have at least one voxel");
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let mut out = v.clone();
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for x in &mut out.data {
            *x = (*x - lo) * inv;
        }
    } else {
        out.data.fill(0.0);
    }
    out
}

/// Uniformly pick a patch window that contains at least one foreground voxel.
pub fn extract_patch(
    v: &Volume3D,
    m: &Mask3D,
    size: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<(Volume3D, Mask3D, PatchSpec), VolumeError> {
    if v.dims != m.dims {
        return Err(VolumeError::DimMismatch { context: "extract_patch", left: v.dims, right: m.dims });
    }
    let (vh, vw, vd) = v.dims;
    let (h, w, d) = size;
    if h > vh || w > vw || d > vd {
        return Err(VolumeError::Precondition(format!(
            "patch size {size:?} exceeds volume dims {:?}",
            v.dims
        )));
    }

    // Prefix sums over the mask so window occupancy is O(1) per candidate origin.
    let ps = prefix_sum(m);
    let mut candidates = Vec::new();
    for i in 0..=(vh - h) {
        for j in 0..=(vw - w) {
            for k in 0..=(vd - d) {
                if window_sum(&ps, v.dims, (i, j, k), size) > 0 {
                    candidates.push((i, j, k));
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(VolumeError::Precondition(
            "mask has no foreground voxel; no valid patch origin".into(),
        ));
    }
    let origin = candidates[rng.gen_range(0..candidates.len())];
    let spec = PatchSpec { origin, size };
    let (pv, pm) = read_patch(v, m, spec)?;
    Ok((pv, pm, spec))
}

/// Copy out the window named by `spec`.
pub fn read_patch(
    v: &Volume3D,
    m: &Mask3D,
    spec: PatchSpec,
) -> Result<(Volume3D, Mask3D), VolumeError> {
    spec.validate(v.dims)?;
    let (h, w, d) = spec.size;
    let (oi, oj, ok) = spec.origin;
    let mut pv = Volume3D::zeros((h, w, d));
    pv.spacing = v.spacing;
    let mut pm = Mask3D::empty((h, w, d));
    for i in 0..h {
        for j in 0..w {
            let src = v.idx(oi + i, oj + j, ok);
            let dst = pv.idx(i, j, 0);
            pv.data[dst..dst + d].copy_from_slice(&v.data[src..src + d]);
            pm.data[dst..dst + d].copy_from_slice(&m.data[src..src + d]);
        }
    }
    Ok((pv, pm))
}

/// Write `patch` back into a copy of `v` at the window named by `spec`.
pub fn insert_patch(v: &Volume3D, patch: &Volume3D, spec: PatchSpec) -> Result<Volume3D, VolumeError> {
    spec.validate(v.dims)?;
    if patch.dims != spec.size {
        return Err(VolumeError::DimMismatch {
            context: "insert_patch: patch dims vs spec size",
            left: patch.dims,
            right: spec.size,
        });
    }
    let mut out = v.clone();
    let (h, w, d) = spec.size;
    let (oi, oj, ok) = spec.origin;
    for i in 0..h {
        for j in 0..w {
            let dst = out.idx(oi + i, oj + j, ok);
            let src = patch.idx(i, j, 0);
            out.data[dst..dst + d].copy_from_slice(&patch.data[src..src + d]);
        }
    }
    Ok(out)
}

fn prefix_sum(m: &Mask3D) -> Vec<u32> {
    let (h, w, d) = m.dims;
    let mut ps = vec![0u32; (h + 1) * (w + 1) * (d + 1)];
    let at = |i: usize, j: usize, k: usize| (i * (w + 1) + j) * (d + 1) + k;
    for i in 1..=h {
        for j in 1..=w {
            for k in 1..=d {
                ps[at(i, j, k)] = m.get(i - 1, j - 1, k - 1) as u32
                    + ps[at(i - 1, j, k)]
                    + ps[at(i, j - 1, k)]
                    + ps[at(i, j, k - 1)]
                    - ps[at(i - 1, j - 1, k)]
                    - ps[at(i - 1, j, k - 1)]
                    - ps[at(i, j - 1, k - 1)]
                    + ps[at(i - 1, j - 1, k - 1)];
            }
        }
    }
    ps
}

fn window_sum(
    ps: &[u32],
    dims: (usize, usize, usize),
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
) -> u32 {
    let (_, w, d) = dims;
    let at = |i: usize, j: usize, k: usize| (i * (w + 1) + j) * (d + 1) + k;
    let (i0, j0, k0) = origin;
    let (i1, j1, k1) = (i0 + size.0, j0 + size.1, k0 + size.2);
    // Group the inclusion-exclusion terms so no intermediate goes negative.
    let add = ps[at(i1, j1, k1)] + ps[at(i0, j0, k1)] + ps[at(i0, j1, k0)] + ps[at(i1, j0, k0)];
    let sub = ps[at(i0, j1, k1)] + ps[at(i1, j0, k1)] + ps[at(i1, j1, k0)] + ps[at(i0, j0, k0)];
    add - sub
}

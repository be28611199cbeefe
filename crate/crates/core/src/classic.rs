//! Non-learned harmonization baselines: the untouched composite and
//! histogram matching of the foreground onto surrounding tissue.

use thiserror::Error;

use crate::augment::dilate;
use crate::volume::{Mask3D, Volume3D};

#[derive(Debug, Error)]
pub enum ClassicError {
    #[error("volume dims {lhs:?} do not match {rhs:?}")]
    DimMismatch { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
    #[error("foreground region is empty")]
    EmptyForeground,
    #[error("context region is empty; increase the context radius")]
    EmptyContext,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmOptions {
    pub bins: usize,
    /// Dilation radius of the reference shell around the mask.
    pub context_radius: usize,
    /// Match against the whole background instead of the local shell.
    pub global_background: bool,
}

impl Default for HmOptions {
    fn default() -> Self {
        HmOptions { bins: 256, context_radius: 8, global_background: false }
    }
}

/// The do-nothing harmonizer; all methods share one interface.
pub fn composite_identity(i_tilde: &Volume3D) -> Volume3D {
    i_tilde.clone()
}

/// Remap foreground intensities by monotone CDF matching against the
/// context region (the dilated shell around the mask, or the whole
/// background with `global_background`). Background voxels are untouched.
///
/// CDF levels use the `<=` convention, so a constant foreground resolves at
/// level 1.0 and maps to the top of the context distribution; mapped values
/// are clamped into the context [min, max] range.
pub fn histogram_match(
    i_tilde: &Volume3D,
    mask: &Mask3D,
    opts: &HmOptions,
) -> Result<Volume3D, ClassicError> {
    assert!(opts.bins >= 2, "need at least two bins");
    if i_tilde.dims != mask.dims {
        return Err(ClassicError::DimMismatch { lhs: i_tilde.dims, rhs: mask.dims });
    }
    if mask.foreground_count() == 0 {
        return Err(ClassicError::EmptyForeground);
    }
    let context: Vec<usize> = if opts.global_background {
        (0..mask.data.len()).filter(|&v| mask.data[v] == 0).collect()
    } else {
        let shell = dilate(mask, opts.context_radius);
        (0..mask.data.len()).filter(|&v| shell.data[v] != 0 && mask.data[v] == 0).collect()
    };
    if context.is_empty() {
        return Err(ClassicError::EmptyContext);
    }

    let bins = opts.bins;
    let bin_of = |x: f32| -> usize { (((x as f64).clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1) };

    let mut src_hist = vec![0usize; bins];
    let mut src_count = 0usize;
    for v in 0..mask.data.len() {
        if mask.data[v] != 0 {
            src_hist[bin_of(i_tilde.data[v])] += 1;
            src_count += 1;
        }
    }
    let mut ref_hist = vec![0usize; bins];
    let mut ctx_min = f32::INFINITY;
    let mut ctx_max = f32::NEG_INFINITY;
    for &v in &context {
        ref_hist[bin_of(i_tilde.data[v])] += 1;
        ctx_min = ctx_min.min(i_tilde.data[v]);
        ctx_max = ctx_max.max(i_tilde.data[v]);
    }

    let cdf = |hist: &[usize], count: usize| -> Vec<f64> {
        let mut acc = 0usize;
        hist.iter()
            .map(|&h| {
                acc += h;
                acc as f64 / count as f64
            })
            .collect()
    };
    let src_cdf = cdf(&src_hist, src_count);
    let ref_cdf = cdf(&ref_hist, context.len());

    // Reference quantile with linear interpolation between bin edges.
    let quantile = |q: f64| -> f64 {
        let width = 1.0 / bins as f64;
        let mut prev = 0.0;
        for (b, &c) in ref_cdf.iter().enumerate() {
            if c >= q {
                let mass = c - prev;
                let frac = if mass > 0.0 { (q - prev) / mass } else { 1.0 };
                return (b as f64 + frac) * width;
            }
            prev = c;
        }
        1.0
    };

    let mut out = i_tilde.clone();
    for v in 0..mask.data.len() {
        if mask.data[v] == 0 {
            continue;
        }
        let q = src_cdf[bin_of(i_tilde.data[v])];
        let mapped = quantile(q).clamp(ctx_min as f64, ctx_max as f64);
        out.data[v] = mapped as f32;
    }
    Ok(out)
}

//! Synthetic sphere-lesion volumes for desk-scale experiments: a smooth
//! low-frequency background field plus an ellipsoidal lesion whose intensity
//! is the local background offset by a constant.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::io::{save_volume, IoError, VolumeFormat};
use crate::volume::{Mask3D, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub lesion_offset: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { n: 8, size: 24, seed: 0, lesion_offset: 0.15 }
    }
}

/// One synthetic case: background in roughly [0.15, 0.55], lesion voxels at
/// background + offset, mask marking the lesion.
pub fn synth_case(rng: &mut ChaCha8Rng, size: usize, lesion_offset: f32) -> (Volume3D, Mask3D) {
    let dims = (size, size, size);
    let mut vol = Volume3D::zeros(dims);

    // Low-frequency background: a few random cosine waves.
    let waves: Vec<(f32, [f32; 3], f32)> = (0..4)
        .map(|_| {
            let amp = rng.gen_range(0.3f32..1.0);
            let freq = [
                rng.gen_range(0.5f32..2.0),
                rng.gen_range(0.5f32..2.0),
                rng.gen_range(0.5f32..2.0),
            ];
            let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
            (amp, freq, phase)
        })
        .collect();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for i in 0..size {
        for j in 0..size {
            for k in 0..size {
                let mut x = 0.0f32;
                for (amp, f, phase) in &waves {
                    let t = std::f32::consts::TAU
                        * (f[0] * i as f32 + f[1] * j as f32 + f[2] * k as f32)
                        / size as f32;
                    x += amp * (t + phase).cos();
                }
                vol.set(i, j, k, x);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    let span = (hi - lo).max(1e-6);
    for v in &mut vol.data {
        *v = 0.15 + 0.4 * (*v - lo) / span;
    }

    // Ellipsoidal lesion away from the border, radii scaled to the volume.
    let r_hi = (size as f32 / 5.0).max(1.5);
    let r_lo = 0.6 * r_hi;
    let r = [
        rng.gen_range(r_lo..r_hi),
        rng.gen_range(r_lo..r_hi),
        rng.gen_range(r_lo..r_hi),
    ];
    let margin = r.iter().fold(0.0f32, |a, &b| a.max(b)).ceil() as usize + 1;
    let c = [
        rng.gen_range(margin..size - margin) as f32,
        rng.gen_range(margin..size - margin) as f32,
        rng.gen_range(margin..size - margin) as f32,
    ];
    let mut mask = Mask3D::empty(dims);
    for i in 0..size {
        for j in 0..size {
            for k in 0..size {
                let d = [(i as f32 - c[0]) / r[0], (j as f32 - c[1]) / r[1], (k as f32 - c[2]) / r[2]];
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0 {
                    mask.set(i, j, k, 1);
                    let v = (vol.get(i, j, k) + lesion_offset).clamp(0.0, 1.0);
                    vol.set(i, j, k, v);
                }
            }
        }
    }
    (vol, mask)
}

/// Write `n` cases as raw float volumes under `<out>/images` and
/// `<out>/masks`, named case00, case01, ...
pub fn generate_dataset(out_dir: &Path, opts: &SynthOptions) -> Result<(), IoError> {
    use rand::SeedableRng;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| IoError::Io { path: p.to_path_buf(), source })
    };
    mkdir(&images)?;
    mkdir(&masks)?;
    for i in 0..opts.n {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        let (vol, mask) = synth_case(&mut rng, opts.size, opts.lesion_offset);
        let name = format!("case{i:02}.bin");
        save_volume(&vol, &images.join(&name), VolumeFormat::RawF32)?;
        save_volume(&mask.to_volume(), &masks.join(&name), VolumeFormat::RawF32)?;
    }
    Ok(())
}

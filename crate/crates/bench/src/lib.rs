//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arhnet_core::volume::Mask3D;
use arhnet_core::{Shape, TensorData};

pub fn rand_tensor(seed: u64, shape: Shape) -> TensorData<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.count()).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    TensorData::new(shape, data)
}

/// Centered solid block covering roughly an eighth of the volume.
pub fn block_mask(dims: (usize, usize, usize)) -> Mask3D {
    let mut m = Mask3D::empty(dims);
    for i in dims.0 / 4..3 * dims.0 / 4 {
        for j in dims.1 / 4..3 * dims.1 / 4 {
            for k in dims.2 / 4..3 * dims.2 / 4 {
                m.set(i, j, k, 1);
            }
        }
    }
    m
}

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::tempdir;

use super::*;

fn small_config(norm_kind: NormKind) -> GeneratorConfig {
    GeneratorConfig { levels: 2, base_channels: 2, norm_kind, mask_channel: true, std_style: StdStyle::Masked }
}

fn rand_volume(rng: &mut StdRng, dims: (usize, usize, usize)) -> Volume3D {
    let n = dims.0 * dims.1 * dims.2;
    Volume3D::new(dims, (1.0, 1.0, 1.0), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
}

fn rand_mask(rng: &mut StdRng, dims: (usize, usize, usize)) -> Mask3D {
    let n = dims.0 * dims.1 * dims.2;
    Mask3D::new(dims, (0..n).map(|_| rng.gen_range(0..2) as u8).collect())
}

fn zeroed_discriminator(config: &DiscriminatorConfig) -> DiscriminatorParams<f32> {
    let mut p = DiscriminatorParams::init(config, &mut StdRng::seed_from_u64(0));
    p.visit_mut("d", &mut |_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
    p
}

#[test]
fn init_is_deterministic() {
    let config = GeneratorConfig::default();
    let a: GeneratorParams<f32> = GeneratorParams::init(&config, &mut StdRng::seed_from_u64(9));
    let b: GeneratorParams<f32> = GeneratorParams::init(&config, &mut StdRng::seed_from_u64(9));
    assert_eq!(a, b);
    let c: GeneratorParams<f32> = GeneratorParams::init(&config, &mut StdRng::seed_from_u64(10));
    assert_ne!(a, c);
}

#[test]
fn final_layer_starts_at_zero() {
    let p: GeneratorParams<f32> = GeneratorParams::init(&GeneratorConfig::default(), &mut StdRng::seed_from_u64(1));
    assert!(p.final_conv.weight.data.iter().all(|v| *v == 0.0));
    assert!(p.final_conv.bias.data.iter().all(|v| *v == 0.0));
}

#[test]
fn weights_respect_the_fan_in_bound_and_biases_are_zero() {
    let p: GeneratorParams<f64> = GeneratorParams::init(&GeneratorConfig::default(), &mut StdRng::seed_from_u64(2));
    p.visit("g", &mut |name, t| {
        if name.ends_with(".weight") {
            let s = t.shape;
            let a = (1.0 / (s.c() * s.h() * s.w() * s.d()) as f64).sqrt();
            assert!(t.data.iter().all(|v| v.abs() <= a), "{name} exceeds bound {a}");
        } else {
            assert!(t.data.iter().all(|v| *v == 0.0), "{name} has nonzero bias");
        }
    });
}

#[test]
fn zero_initialized_generator_is_the_identity() {
    let mut rng = StdRng::seed_from_u64(3);
    let p: GeneratorParams<f32> = GeneratorParams::init(&small_config(NormKind::Arh), &mut rng);
    let vol = rand_volume(&mut rng, (8, 8, 8));
    let mask = rand_mask(&mut rng, (8, 8, 8));
    let (diff, out) = generator_forward(&vol, &mask, &p).unwrap();
    assert!(diff.data.iter().all(|v| *v == 0.0));
    assert_eq!(out.data, vol.data);
}

#[test]
fn background_voxels_pass_through_bit_exactly() {
    let mut rng = StdRng::seed_from_u64(4);
    for kind in [NormKind::Arh, NormKind::Instance, NormKind::Batch, NormKind::Rain] {
        let mut p: GeneratorParams<f32> = GeneratorParams::init(&small_config(kind), &mut rng);
        p.final_conv = Conv3dParam::init(1, p.config.base_channels, 3, &mut rng);
        let vol = rand_volume(&mut rng, (8, 8, 8));
        let mask = rand_mask(&mut rng, (8, 8, 8));
        let (diff, out) = generator_forward(&vol, &mask, &p).unwrap();
        assert!(diff.data.iter().any(|v| *v != 0.0));
        for v in 0..vol.data.len() {
            if mask.data[v] == 0 {
                assert_eq!(out.data[v], vol.data[v]);
            }
        }
    }
}

#[test]
fn output_shape_matches_input_shape() {
    let mut rng = StdRng::seed_from_u64(5);
    let config = GeneratorConfig { levels: 3, base_channels: 1, ..small_config(NormKind::Instance) };
    let p: GeneratorParams<f32> = GeneratorParams::init(&config, &mut rng);
    for dims in [(16, 16, 16), (32, 32, 32)] {
        let vol = rand_volume(&mut rng, dims);
        let mask = rand_mask(&mut rng, dims);
        let (diff, out) = generator_forward(&vol, &mask, &p).unwrap();
        assert_eq!(out.dims, dims);
        assert_eq!(diff.shape, Shape::new(1, 1, dims.0, dims.1, dims.2));
    }
}

#[test]
fn indivisible_dims_are_rejected() {
    let mut rng = StdRng::seed_from_u64(6);
    let config = GeneratorConfig { levels: 3, base_channels: 1, ..small_config(NormKind::Instance) };
    let p: GeneratorParams<f32> = GeneratorParams::init(&config, &mut rng);
    let vol = rand_volume(&mut rng, (10, 10, 10));
    let mask = rand_mask(&mut rng, (10, 10, 10));
    assert!(matches!(
        generator_forward(&vol, &mask, &p),
        Err(NetworkError::IndivisibleDims { .. })
    ));
}

#[test]
fn zero_discriminator_scores_zero() {
    let mut rng = StdRng::seed_from_u64(7);
    let config = DiscriminatorConfig { layers: 2, base_channels: 2 };
    let p = zeroed_discriminator(&config);
    let vol = rand_volume(&mut rng, (8, 8, 8));
    let cand = rand_volume(&mut rng, (8, 8, 8));
    let mask = rand_mask(&mut rng, (8, 8, 8));
    assert_eq!(discriminator_forward(&cand, &vol, &mask, &p).unwrap(), 0.0);
}

#[test]
fn discriminator_scores_are_finite() {
    let mut rng = StdRng::seed_from_u64(8);
    let config = DiscriminatorConfig { layers: 3, base_channels: 2 };
    let p: DiscriminatorParams<f32> = DiscriminatorParams::init(&config, &mut rng);
    for _ in 0..5 {
        let vol = rand_volume(&mut rng, (8, 8, 8));
        let cand = rand_volume(&mut rng, (8, 8, 8));
        let mask = rand_mask(&mut rng, (8, 8, 8));
        assert!(discriminator_forward(&cand, &vol, &mask, &p).unwrap().is_finite());
    }
}

#[test]
fn permuting_the_batch_permutes_the_scores() {
    let mut rng = StdRng::seed_from_u64(9);
    let config = DiscriminatorConfig { layers: 2, base_channels: 2 };
    let p: DiscriminatorParams<f32> = DiscriminatorParams::init(&config, &mut rng);
    let a = rand_volume(&mut rng, (4, 4, 4));
    let b = rand_volume(&mut rng, (4, 4, 4));
    let tilde = rand_volume(&mut rng, (4, 4, 4));
    let ma = rand_mask(&mut rng, (4, 4, 4));
    let mb = rand_mask(&mut rng, (4, 4, 4));

    let run = |first: (&Volume3D, &Mask3D), second: (&Volume3D, &Mask3D)| -> Vec<f32> {
        let mut g: Graph<f32> = Graph::new();
        let vars = p.bind(&mut g, false);
        let mut cdata = first.0.data.clone();
        cdata.extend_from_slice(&second.0.data);
        let cand = g.constant(TensorData::new(Shape::new(2, 1, 4, 4, 4), cdata));
        let mut idata = tilde.data.clone();
        idata.extend_from_slice(&tilde.data);
        let it = g.constant(TensorData::new(Shape::new(2, 1, 4, 4, 4), idata));
        let scores =
            discriminator_forward_graph(&mut g, &vars, cand, it, &[first.1.clone(), second.1.clone()]).unwrap();
        g.value(scores).to_vec()
    };
    let fwd = run((&a, &ma), (&b, &mb));
    let rev = run((&b, &mb), (&a, &ma));
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[0]);
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.arhf");
    let ckpt = Checkpoint {
        buffers: vec![
            ("g.enc0.a.weight".into(), vec![0.1, -2.5e-8, f32::MIN_POSITIVE, 1.0]),
            ("iter".into(), vec![f32::from_bits(12345)]),
            ("empty".into(), vec![]),
        ],
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);

    let path2 = dir.path().join("model2.arhf");
    save_checkpoint(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_bad_magic_and_version() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.arhf");
    let ckpt = Checkpoint { buffers: vec![("x".into(), vec![1.0])] };
    save_checkpoint(&ckpt, &path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let bad_magic = dir.path().join("bad_magic.arhf");
    std::fs::write(&bad_magic, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad_magic), Err(CheckpointError::BadMagic)));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 99;
    let bad_version = dir.path().join("bad_version.arhf");
    std::fs::write(&bad_version, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad_version), Err(CheckpointError::Version { found: 99 })));
}

#[test]
fn visit_names_round_trip_parameters() {
    let mut rng = StdRng::seed_from_u64(10);
    let gc = small_config(NormKind::Arh);
    let dc = DiscriminatorConfig { layers: 2, base_channels: 2 };
    let gp: GeneratorParams<f32> = GeneratorParams::init(&gc, &mut rng);
    let dp: DiscriminatorParams<f32> = DiscriminatorParams::init(&dc, &mut rng);

    let mut buffers = Vec::new();
    gp.visit("g", &mut |name, t| buffers.push((name, t.data.clone())));
    dp.visit("d", &mut |name, t| buffers.push((name, t.data.clone())));
    let ckpt = Checkpoint { buffers };

    let mut gp2: GeneratorParams<f32> = GeneratorParams::init(&gc, &mut StdRng::seed_from_u64(99));
    let mut dp2: DiscriminatorParams<f32> = DiscriminatorParams::init(&dc, &mut StdRng::seed_from_u64(99));
    gp2.visit_mut("g", &mut |name, t| {
        t.data.copy_from_slice(ckpt.get(&name).expect("buffer present"));
    });
    dp2.visit_mut("d", &mut |name, t| {
        t.data.copy_from_slice(ckpt.get(&name).expect("buffer present"));
    });
    assert_eq!(gp, gp2);
    assert_eq!(dp, dp2);
}

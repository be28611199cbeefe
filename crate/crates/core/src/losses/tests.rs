use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::tensor::{finite_difference_check, Shape, TensorData};

fn scalar_var(g: &mut Graph<f64>, v: f64) -> Var {
    g.constant(TensorData::scalar(v))
}

fn rand_data(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn rec_of_identical_volumes_is_zero() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(TensorData::full(Shape::new(1, 1, 2, 2, 2), 0.4));
    let l = loss_rec(&mut g, a, a, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn rec_of_unit_gap_is_one() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(TensorData::full(Shape::new(1, 1, 2, 2, 2), 1.0));
    let b = g.constant(TensorData::zeros(Shape::new(1, 1, 2, 2, 2)));
    let l = loss_rec(&mut g, a, b, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 1.0);
}

#[test]
fn rec_matches_scalar_loop() {
    let mut rng = StdRng::seed_from_u64(41);
    for _ in 0..10 {
        let x = rand_data(&mut rng, 27);
        let y = rand_data(&mut rng, 27);
        let expected: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 27.0;

        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(TensorData::new(Shape::new(1, 1, 3, 3, 3), x.clone()));
        let b = g.constant(TensorData::new(Shape::new(1, 1, 3, 3, 3), y.clone()));
        let mean = loss_rec(&mut g, a, b, Reduction::Mean).unwrap();
        let sum = loss_rec(&mut g, a, b, Reduction::Sum).unwrap();
        assert!((g.scalar(mean) - expected).abs() < 1e-7);
        assert!((g.scalar(sum) - expected * 27.0).abs() < 1e-7);
    }
}

#[test]
fn rec_rejects_mismatched_shapes() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(TensorData::zeros(Shape::new(1, 1, 2, 2, 2)));
    let b = g.constant(TensorData::zeros(Shape::new(1, 1, 2, 2, 4)));
    assert!(loss_rec(&mut g, a, b, Reduction::Mean).is_err());
}

#[test]
fn btv_of_constant_volume_is_zero() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(TensorData::full(Shape::new(1, 1, 3, 3, 3), 0.7));
    let b = g.constant(TensorData::full(Shape::new(1, 1, 3, 3, 3), 1.0));
    let l = loss_btv(&mut g, x, b, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn btv_single_spike_on_two_cube() {
    let mut g: Graph<f64> = Graph::new();
    let mut data = vec![0.0; 8];
    data[0] = 1.0;
    let mut sel = vec![0.0; 8];
    sel[0] = 1.0;
    let x = g.constant(TensorData::new(Shape::new(1, 1, 2, 2, 2), data));
    let b = g.constant(TensorData::new(Shape::new(1, 1, 2, 2, 2), sel));
    let l = loss_btv(&mut g, x, b, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 3.0);
}

#[test]
fn btv_matches_scalar_loop() {
    let mut rng = StdRng::seed_from_u64(42);
    for _ in 0..10 {
        let data = rand_data(&mut rng, 64);
        let sel: Vec<f64> = (0..64).map(|_| rng.gen_range(0..2) as f64).collect();
        let vol = Volume3D::new((4, 4, 4), (1.0, 1.0, 1.0), data.iter().map(|v| *v as f32).collect());
        let mask = Mask3D::new((4, 4, 4), sel.iter().map(|v| *v as u8).collect());
        let f32_data: Vec<f64> = vol.data.iter().map(|v| *v as f64).collect();

        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(TensorData::new(Shape::new(1, 1, 4, 4, 4), f32_data));
        let b = g.constant(TensorData::new(Shape::new(1, 1, 4, 4, 4), sel));
        for red in [Reduction::Mean, Reduction::Sum] {
            let l = loss_btv(&mut g, x, b, red).unwrap();
            assert!((g.scalar(l) - btv_volume(&vol, &mask, red)).abs() < 1e-7);
        }
    }
}

#[test]
fn btv_empty_boundary_is_zero() {
    let mut rng = StdRng::seed_from_u64(43);
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(TensorData::new(Shape::new(1, 1, 3, 3, 3), rand_data(&mut rng, 27)));
    let b = g.constant(TensorData::zeros(Shape::new(1, 1, 3, 3, 3)));
    let l = loss_btv(&mut g, x, b, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn btv_ignores_voxels_outside_the_stencil() {
    let mut rng = StdRng::seed_from_u64(44);
    let data = rand_data(&mut rng, 64);
    let mut sel = vec![0.0; 64];
    sel[0] = 1.0;
    let mut far = data.clone();
    far[63] = 9.0;

    let mut g: Graph<f64> = Graph::new();
    let b = g.constant(TensorData::new(Shape::new(1, 1, 4, 4, 4), sel));
    let x1 = g.constant(TensorData::new(Shape::new(1, 1, 4, 4, 4), data));
    let x2 = g.constant(TensorData::new(Shape::new(1, 1, 4, 4, 4), far));
    let l1 = loss_btv(&mut g, x1, b, Reduction::Mean).unwrap();
    let l2 = loss_btv(&mut g, x2, b, Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l1), g.scalar(l2));
}

#[test]
fn hinge_critic_table() {
    let mut g: Graph<f64> = Graph::new();
    let cases = [((0.0, 0.0), 2.0), ((2.0, -2.0), 0.0), ((-1.0, 1.0), 4.0)];
    for ((fake, real), expected) in cases {
        let sf = scalar_var(&mut g, fake);
        let sr = scalar_var(&mut g, real);
        let l = loss_adv_d(&mut g, sf, sr, HingeConvention::Paper).unwrap();
        assert_eq!(g.scalar(l), expected);
    }
}

#[test]
fn hinge_critic_is_nonnegative() {
    let mut rng = StdRng::seed_from_u64(45);
    let mut g: Graph<f64> = Graph::new();
    for _ in 0..50 {
        let sf = scalar_var(&mut g, rng.gen_range(-3.0..3.0));
        let sr = scalar_var(&mut g, rng.gen_range(-3.0..3.0));
        for conv in [HingeConvention::Paper, HingeConvention::Standard] {
            let l = loss_adv_d(&mut g, sf, sr, conv).unwrap();
            assert!(g.scalar(l) >= 0.0);
        }
    }
}

#[test]
fn hinge_standard_swaps_roles() {
    let mut g: Graph<f64> = Graph::new();
    let sf = scalar_var(&mut g, -2.0);
    let sr = scalar_var(&mut g, 2.0);
    let l = loss_adv_d(&mut g, sf, sr, HingeConvention::Standard).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn generator_hinge_negates_the_score() {
    let mut g: Graph<f64> = Graph::new();
    let s0 = scalar_var(&mut g, 0.0);
    let s1 = scalar_var(&mut g, 0.5);
    let l0 = loss_adv_g(&mut g, s0);
    let l1 = loss_adv_g(&mut g, s1);
    assert_eq!(g.scalar(l0), 0.0);
    assert_eq!(g.scalar(l1), -0.5);
}

#[test]
fn generator_hinge_is_linear_in_the_batch_mean() {
    let mut rng = StdRng::seed_from_u64(46);
    let scores: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let expected = -scores.iter().sum::<f64>() / 8.0;

    let mut g: Graph<f64> = Graph::new();
    let s = g.constant(TensorData::new(Shape::new(8, 1, 1, 1, 1), scores));
    let mean = g.mean_all(s);
    let l = loss_adv_g(&mut g, mean);
    assert!((g.scalar(l) - expected).abs() < 1e-12);
}

#[test]
fn total_default_weights_example() {
    let mut g: Graph<f64> = Graph::new();
    let rec = scalar_var(&mut g, 0.01);
    let btv = scalar_var(&mut g, 0.002);
    let adv = scalar_var(&mut g, -0.5);
    let l = loss_total(&mut g, rec, btv, adv, &LossWeights::default()).unwrap();
    assert!((g.scalar(l) - 0.52).abs() < 1e-12);
}

#[test]
fn total_zero_weights_is_zero() {
    let mut g: Graph<f64> = Graph::new();
    let rec = scalar_var(&mut g, 0.3);
    let btv = scalar_var(&mut g, 0.7);
    let adv = scalar_var(&mut g, -0.1);
    let w = LossWeights { w_rec: 0.0, w_btv: 0.0, w_adv: 0.0 };
    let l = loss_total(&mut g, rec, btv, adv, &w).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn total_gradient_reaches_every_branch() {
    let mut rng = StdRng::seed_from_u64(47);
    let target: Vec<f64> = rand_data(&mut rng, 27);
    let sel: Vec<f64> = (0..27).map(|v| if v % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let theta = TensorData::new(Shape::new(1, 1, 3, 3, 3), rand_data(&mut rng, 27));

    let build = |g: &mut Graph<f64>, x: Var| -> Var {
        let t = g.constant(TensorData::new(Shape::new(1, 1, 3, 3, 3), target.clone()));
        let b = g.constant(TensorData::new(Shape::new(1, 1, 3, 3, 3), sel.clone()));
        let rec = loss_rec(g, t, x, Reduction::Mean).unwrap();
        let btv = loss_btv(g, x, b, Reduction::Mean).unwrap();
        let score = g.mean_all(x);
        let adv = loss_adv_g(g, score);
        loss_total(g, rec, btv, adv, &LossWeights::default()).unwrap()
    };
    let probes: Vec<usize> = (0..27).step_by(4).collect();
    let err = finite_difference_check(&build, &theta, &probes, 1e-6);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn parse_flags() {
    assert_eq!(Reduction::parse("mean"), Some(Reduction::Mean));
    assert_eq!(Reduction::parse("sum"), Some(Reduction::Sum));
    assert_eq!(Reduction::parse("max"), None);
    assert_eq!(HingeConvention::parse("paper"), Some(HingeConvention::Paper));
    assert_eq!(HingeConvention::parse("standard"), Some(HingeConvention::Standard));
    assert_eq!(HingeConvention::parse("wgan"), None);
}

//! Finite-difference verification of every differentiable op plus the full
//! training-loss composition, shared by the CLI subcommand and the
//! acceptance gate.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::arh::{arh_forward, mask_tensor, ArhParams, StdStyle};
use crate::augment::extract_boundary;
use crate::losses::{loss_adv_g, loss_btv, loss_rec, loss_total, LossWeights, Reduction};
use crate::networks::{
    discriminator_forward_graph, generator_forward_graph, DiscriminatorConfig, DiscriminatorParams,
    GeneratorConfig, GeneratorParams,
};
use crate::tensor::{finite_difference_check, Graph, Shape, TensorData, Var};
use crate::volume::Mask3D;

pub const OP_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel.is_finite() && self.max_rel < self.tol
    }
}

fn rand_tensor(rng: &mut StdRng, shape: Shape, lo: f64, hi: f64) -> TensorData<f64> {
    let data = (0..shape.count()).map(|_| rng.gen_range(lo..hi)).collect();
    TensorData::new(shape, data)
}

fn rand_mask(rng: &mut StdRng, dims: (usize, usize, usize)) -> Mask3D {
    let n = dims.0 * dims.1 * dims.2;
    let mut m = Mask3D::new(dims, (0..n).map(|_| rng.gen_range(0..2) as u8).collect());
    m.data[0] = 1;
    m.data[n - 1] = 0;
    m
}

/// Weighted scalar readout so transposed or misplaced gradients cannot cancel.
fn readout(g: &mut Graph<f64>, x: Var, rng: &mut StdRng) -> Var {
    let shape = g.shape(x);
    let w = g.constant(rand_tensor(rng, shape, -1.0, 1.0));
    let prod = g.mul(x, w).expect("same shape");
    g.sum_all(prod)
}

fn check_unary(seed: u64, f: impl Fn(&mut Graph<f64>, Var) -> Var, lo: f64, hi: f64) -> f64 {
    check_unary_shaped(seed, f, lo, hi, Shape::new(2, 2, 3, 3, 3))
}

fn check_unary_shaped(
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var) -> Var,
    lo: f64,
    hi: f64,
    shape: Shape,
) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let theta = rand_tensor(&mut rng, shape, lo, hi);
    let wrng = StdRng::seed_from_u64(seed + 1);
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, x| {
            let y = f(g, x);
            readout(g, y, &mut wrng.clone())
        },
        &theta,
        &probes,
        1e-5,
    )
}

fn check_binary(seed: u64, f: impl Fn(&mut Graph<f64>, Var, Var) -> Var, lo: f64, hi: f64) -> f64 {
    let shape = Shape::new(2, 2, 3, 3, 3);
    let mut rng = StdRng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, shape, lo, hi);
    let b = rand_tensor(&mut rng, shape, lo, hi);
    let probes: Vec<usize> = (0..a.data.len()).collect();
    let wseed = seed + 7;
    // Check the gradient through each argument in turn.
    let wrt_a = finite_difference_check(
        &|g, x| {
            let other = g.constant(b.clone());
            let y = f(g, x, other);
            readout(g, y, &mut StdRng::seed_from_u64(wseed))
        },
        &a,
        &probes,
        1e-5,
    );
    let wrt_b = finite_difference_check(
        &|g, x| {
            let other = g.constant(a.clone());
            let y = f(g, other, x);
            readout(g, y, &mut StdRng::seed_from_u64(wseed))
        },
        &b,
        &probes,
        1e-5,
    );
    wrt_a.max(wrt_b)
}

fn check_leaky_relu() -> f64 {
    // Inputs kept away from the kink at zero.
    let mut rng = StdRng::seed_from_u64(10);
    let mut theta = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3, 3), 0.1, 1.0);
    for (i, v) in theta.data.iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, x| {
            let y = g.leaky_relu(x, 0.2);
            readout(g, y, &mut StdRng::seed_from_u64(11))
        },
        &theta,
        &probes,
        1e-5,
    )
}

fn check_conv3d(wrt: usize) -> f64 {
    let mut rng = StdRng::seed_from_u64(20 + wrt as u64);
    let x = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4, 4), -1.0, 1.0);
    let w = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3, 3), -0.5, 0.5);
    let b = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1, 1), -0.5, 0.5);
    let theta = [&x, &w, &b][wrt].clone();
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, leaf| {
            let xv = if wrt == 0 { leaf } else { g.constant(x.clone()) };
            let wv = if wrt == 1 { leaf } else { g.constant(w.clone()) };
            let bv = if wrt == 2 { leaf } else { g.constant(b.clone()) };
            let y = g.conv3d(xv, wv, bv, 1, 1).expect("valid conv");
            readout(g, y, &mut StdRng::seed_from_u64(21))
        },
        &theta,
        &probes,
        1e-5,
    )
}

fn check_conv3d_strided() -> f64 {
    let mut rng = StdRng::seed_from_u64(25);
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4, 4), -1.0, 1.0);
    let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3, 3), -0.5, 0.5);
    let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1, 1), -0.5, 0.5);
    let probes: Vec<usize> = (0..x.data.len()).collect();
    finite_difference_check(
        &|g, leaf| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv3d(leaf, wv, bv, 2, 1).expect("valid conv");
            readout(g, y, &mut StdRng::seed_from_u64(26))
        },
        &x,
        &probes,
        1e-5,
    )
}

fn check_reduce(axes: &'static [usize]) -> f64 {
    check_unary(30 + axes.len() as u64, move |g, x| g.reduce_mean(x, axes).expect("valid axes"), -1.0, 1.0)
}

fn check_reduce_max() -> f64 {
    // Distinct values so the argmax is stable under the probe step.
    let shape = Shape::new(2, 2, 3, 3, 3);
    let mut data: Vec<f64> = (0..shape.count()).map(|i| i as f64 * 0.37).collect();
    let mut rng = StdRng::seed_from_u64(33);
    use rand::seq::SliceRandom;
    data.shuffle(&mut rng);
    let theta = TensorData::new(shape, data);
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, x| {
            let y = g.reduce_max(x, &[2, 3, 4]).expect("valid axes");
            readout(g, y, &mut StdRng::seed_from_u64(34))
        },
        &theta,
        &probes,
        1e-4,
    )
}

fn check_concat_channels() -> f64 {
    check_unary(40, |g, x| {
        let shape = g.shape(x);
        let other = g.constant(TensorData::new(shape, vec![0.3; shape.count()]));
        g.concat_channels(&[x, other]).expect("same spatial dims")
    }, -1.0, 1.0)
}

fn check_slice_stack() -> f64 {
    check_unary(41, |g, x| {
        let a = g.slice_batch(x, 0).expect("index in range");
        let b = g.slice_batch(x, 1).expect("index in range");
        let restacked = g.stack_batch(&[b, a]).expect("same shapes");
        g.scale(restacked, 1.5)
    }, -1.0, 1.0)
}

fn check_boundary_tv() -> f64 {
    let mut rng = StdRng::seed_from_u64(50);
    let theta = rand_tensor(&mut rng, Shape::new(2, 1, 4, 4, 4), 0.0, 1.0);
    let mask = rand_mask(&mut rng, (4, 4, 4));
    let boundary = extract_boundary(&mask, 1);
    let mut bdata = Vec::new();
    for _ in 0..2 {
        bdata.extend(boundary.data.iter().map(|&v| v as f64));
    }
    let btensor = TensorData::new(Shape::new(2, 1, 4, 4, 4), bdata);
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, x| {
            let b = g.constant(btensor.clone());
            g.boundary_tv(x, b, true).expect("matching shapes")
        },
        &theta,
        &probes,
        1e-5,
    )
}

fn check_instance_norm() -> f64 {
    check_unary(55, |g, x| g.instance_norm(x, 1e-5), -1.0, 1.0)
}

fn check_arh_forward() -> f64 {
    let mut rng = StdRng::seed_from_u64(60);
    let theta = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4, 4), -1.0, 1.0);
    let masks = vec![rand_mask(&mut rng, (4, 4, 4)), rand_mask(&mut rng, (4, 4, 4))];
    let params = ArhParams::<f64>::init(2, &mut rng);
    let probes: Vec<usize> = (0..theta.data.len()).collect();
    finite_difference_check(
        &|g, x| {
            let vars = params.bind(g, false);
            let y = arh_forward(g, x, &masks, &vars, StdStyle::Masked).expect("valid inputs");
            readout(g, y, &mut StdRng::seed_from_u64(61))
        },
        &theta,
        &probes,
        1e-5,
    )
}

/// Full training objective at f32 on an 8-cube patch, differentiated through
/// the generator's first encoder weight.
fn check_end_to_end() -> f64 {
    let mut rng = StdRng::seed_from_u64(70);
    let gen_cfg = GeneratorConfig {
        levels: 2,
        base_channels: 2,
        ..GeneratorConfig::default()
    };
    let disc_cfg = DiscriminatorConfig { layers: 2, base_channels: 2 };
    let gen = GeneratorParams::<f32>::init(&gen_cfg, &mut rng);
    let disc = DiscriminatorParams::<f32>::init(&disc_cfg, &mut rng);

    let dims = (8, 8, 8);
    let n = 8 * 8 * 8;
    let mask = {
        let mut m = Mask3D::empty(dims);
        for i in 2..6 {
            for j in 2..6 {
                for k in 2..6 {
                    m.set(i, j, k, 1);
                }
            }
        }
        m
    };
    let boundary = extract_boundary(&mask, 1);
    let i_real = TensorData::new(Shape::new(1, 1, 8, 8, 8), (0..n).map(|_| rng.gen_range(0.2f32..0.8)).collect());
    let i_tilde = TensorData::new(
        Shape::new(1, 1, 8, 8, 8),
        i_real.data.iter().zip(mask.data.iter()).map(|(&v, &m)| if m != 0 { (v + 0.1).min(1.0) } else { v }).collect(),
    );

    let theta = gen.encoder[0][0].weight.clone();
    let probes: Vec<usize> = (0..theta.data.len()).step_by(3).collect();
    finite_difference_check(
        &|g, leaf| {
            let mut gvars = gen.bind(g, false);
            gvars.encoder[0][0].w = leaf;
            let dvars = disc.bind(g, false);
            let x = g.constant(i_tilde.clone());
            let real = g.constant(i_real.clone());
            let b: Var = g.constant(mask_tensor::<f32>(&boundary));
            let masks = std::slice::from_ref(&mask);
            let (_, i_hat) = generator_forward_graph(g, &gen_cfg, &gvars, x, masks).expect("forward");
            let rec = loss_rec(g, real, i_hat, Reduction::Mean).expect("shapes match");
            let btv = loss_btv(g, i_hat, b, Reduction::Mean).expect("shapes match");
            let score = discriminator_forward_graph(g, &dvars, i_hat, x, masks).expect("forward");
            let score = g.mean_all(score);
            let adv = loss_adv_g(g, score);
            loss_total(g, rec, btv, adv, &LossWeights::default()).expect("scalar terms")
        },
        &theta,
        &probes,
        2e-3,
    )
}

type CheckFn = fn() -> f64;

fn registry() -> Vec<(&'static str, CheckFn, f64)> {
    vec![
        ("leaky_relu", check_leaky_relu as CheckFn, OP_TOL),
        ("sigmoid", || check_unary(1, |g, x| g.sigmoid(x), -2.0, 2.0), OP_TOL),
        ("scale", || check_unary(2, |g, x| g.scale(x, -1.7), -1.0, 1.0), OP_TOL),
        ("add_scalar", || check_unary(3, |g, x| g.add_scalar(x, 0.4), -1.0, 1.0), OP_TOL),
        ("sqrt", || check_unary(4, |g, x| g.sqrt(x), 0.5, 2.0), OP_TOL),
        ("abs", || check_unary(5, |g, x| g.abs(x), 0.2, 1.0), OP_TOL),
        ("clamp01", || check_unary(6, |g, x| g.clamp01(x), 0.1, 0.9), OP_TOL),
        ("add", || check_binary(7, |g, a, b| g.add(a, b).expect("shapes"), -1.0, 1.0), OP_TOL),
        ("sub", || check_binary(8, |g, a, b| g.sub(a, b).expect("shapes"), -1.0, 1.0), OP_TOL),
        ("mul", || check_binary(9, |g, a, b| g.mul(a, b).expect("shapes"), -1.0, 1.0), OP_TOL),
        ("div", || check_binary(10, |g, a, b| g.div(a, b).expect("shapes"), 0.5, 2.0), OP_TOL),
        ("conv3d_x", || check_conv3d(0), OP_TOL),
        ("conv3d_w", || check_conv3d(1), OP_TOL),
        ("conv3d_b", || check_conv3d(2), OP_TOL),
        ("conv3d_strided", check_conv3d_strided as CheckFn, OP_TOL),
        ("instance_norm", check_instance_norm as CheckFn, OP_TOL),
        ("reduce_spatial", || check_reduce(&[2, 3, 4]), OP_TOL),
        ("reduce_channel", || check_reduce(&[1]), OP_TOL),
        ("reduce_max", check_reduce_max as CheckFn, OP_TOL),
        ("sum_all", || check_unary(11, |g, x| g.sum_all(x), -1.0, 1.0), OP_TOL),
        ("mean_all", || check_unary(12, |g, x| g.mean_all(x), -1.0, 1.0), OP_TOL),
        ("concat_channels", check_concat_channels as CheckFn, OP_TOL),
        ("slice_stack_batch", check_slice_stack as CheckFn, OP_TOL),
        (
            "upsample_nearest2",
            || check_unary_shaped(13, |g, x| g.upsample_nearest2(x), -1.0, 1.0, Shape::new(2, 2, 2, 2, 2)),
            OP_TOL,
        ),
        (
            "avg_pool2",
            || check_unary_shaped(14, |g, x| g.avg_pool2(x).expect("even dims"), -1.0, 1.0, Shape::new(2, 2, 4, 4, 4)),
            OP_TOL,
        ),
        ("boundary_tv", check_boundary_tv as CheckFn, OP_TOL),
        ("arh_forward", check_arh_forward as CheckFn, OP_TOL),
        ("end_to_end", check_end_to_end as CheckFn, END_TO_END_TOL),
    ]
}

pub fn available() -> Vec<&'static str> {
    registry().iter().map(|(n, _, _)| *n).collect()
}

pub fn run_one(name: &str) -> Option<CheckReport> {
    registry()
        .into_iter()
        .find(|(n, _, _)| *n == name)
        .map(|(name, f, tol)| CheckReport { name, max_rel: f(), tol })
}

pub fn run_all() -> Vec<CheckReport> {
    registry()
        .into_iter()
        .map(|(name, f, tol)| CheckReport { name, max_rel: f(), tol })
        .collect()
}

//! Adaptive region harmonization: a normalization layer that re-scales the
//! region-normalized foreground features using background channel statistics
//! modulated by a learned spatial attention map. Also hosts the ablation
//! normalization variants (batch, instance, RAIN-style transfer).

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Element, Graph, ReduceKind, Shape, TensorData, TensorError, Var};
use crate::volume::Mask3D;

/// Epsilon inside every normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ArhError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask dims {mask:?} do not reduce to {target:?} by a power-of-two factor")]
    BadResize { mask: (usize, usize, usize), target: (usize, usize, usize) },
    #[error("mask dims {mask:?} do not match feature spatial dims {feature:?}")]
    MaskMismatch { mask: (usize, usize, usize), feature: (usize, usize, usize) },
    #[error("expected {expected} masks for batch size {expected}, got {got}")]
    MaskCount { expected: usize, got: usize },
    #[error("empty background region")]
    EmptyBackground,
}

/// How the background standard deviation treats the mean term: `Masked`
/// subtracts the mean at background voxels only, `Literal` subtracts it at
/// every voxel before squaring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdStyle {
    #[default]
    Masked,
    Literal,
}

impl StdStyle {
    pub fn parse(s: &str) -> Option<StdStyle> {
        match s {
            "masked" => Some(StdStyle::Masked),
            "literal" => Some(StdStyle::Literal),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StdStyle::Masked => "masked",
            StdStyle::Literal => "literal",
        }
    }
}

/// Feature normalization variants selectable in the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Arh,
    Batch,
    Instance,
    Rain,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<NormKind> {
        match s {
            "arh" => Some(NormKind::Arh),
            "batch" => Some(NormKind::Batch),
            "instance" => Some(NormKind::Instance),
            "rain" => Some(NormKind::Rain),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Arh => "arh",
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
            NormKind::Rain => "rain",
        }
    }
}

/// Weights and bias of one 3D convolution, stored outside any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParam<T> {
    /// Shape (C_out, C_in, k, k, k).
    pub weight: TensorData<T>,
    /// Shape (1, C_out, 1, 1, 1).
    pub bias: TensorData<T>,
}

impl<T: Element> Conv3dParam<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Conv3dParam {
            weight: TensorData::zeros(Shape::new(c_out, c_in, k, k, k)),
            bias: TensorData::zeros(Shape::new(1, c_out, 1, 1, 1)),
        }
    }

    /// Weights uniform in (-a, a) with a = sqrt(1 / fan_in); bias zero.
    pub fn init<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(c_out, c_in, k);
        let a = (1.0 / (c_in * k * k * k) as f64).sqrt();
        for w in &mut p.weight.data {
            *w = T::from_f64(a * (2.0 * rng.gen::<f64>() - 1.0));
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape.c()
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape.h()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ConvVars {
        let (w, b) = if trainable {
            (g.leaf(self.weight.clone()), g.leaf(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        ConvVars { w, b, pad: self.kernel() / 2 }
    }
}

/// A bound convolution inside a graph; `pad` keeps spatial dims fixed.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub pad: usize,
}

impl ConvVars {
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        g.conv3d(x, self.w, self.b, 1, self.pad)
    }
}

/// Learnable state of one ARH layer for feature width C.
#[derive(Debug, Clone, PartialEq)]
pub struct ArhParams<T> {
    /// C -> 1 reduction feeding the attention fusion.
    pub attn_reduce: Conv3dParam<T>,
    /// 3 -> 1 fusion over (channel max, channel mean, reduced features).
    pub attn_fuse: Conv3dParam<T>,
    /// 1 -> C spatial scaling from the attention map.
    pub gamma_conv: Conv3dParam<T>,
    pub beta_conv: Conv3dParam<T>,
    /// C -> C foreground scaling after mixing in background statistics.
    pub gamma_f_conv: Conv3dParam<T>,
    pub beta_f_conv: Conv3dParam<T>,
}

impl<T: Element> ArhParams<T> {
    pub fn zeros(channels: usize) -> Self {
        ArhParams {
            attn_reduce: Conv3dParam::zeros(1, channels, 3),
            attn_fuse: Conv3dParam::zeros(1, 3, 3),
            gamma_conv: Conv3dParam::zeros(channels, 1, 3),
            beta_conv: Conv3dParam::zeros(channels, 1, 3),
            gamma_f_conv: Conv3dParam::zeros(channels, channels, 3),
            beta_f_conv: Conv3dParam::zeros(channels, channels, 3),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        ArhParams {
            attn_reduce: Conv3dParam::init(1, channels, 3, rng),
            attn_fuse: Conv3dParam::init(1, 3, 3, rng),
            gamma_conv: Conv3dParam::init(channels, 1, 3, rng),
            beta_conv: Conv3dParam::init(channels, 1, 3, rng),
            gamma_f_conv: Conv3dParam::init(channels, channels, 3, rng),
            beta_f_conv: Conv3dParam::init(channels, channels, 3, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma_conv.out_channels()
    }

    /// Visit every parameter tensor in a stable order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData<T>)) {
        for (name, p) in self.named() {
            f(format!("{prefix}.{name}.weight"), &p.weight);
            f(format!("{prefix}.{name}.bias"), &p.bias);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData<T>)) {
        for (name, p) in self.named_mut() {
            f(format!("{prefix}.{name}.weight"), &mut p.weight);
            f(format!("{prefix}.{name}.bias"), &mut p.bias);
        }
    }

    fn named(&self) -> [(&'static str, &Conv3dParam<T>); 6] {
        [
            ("attn_reduce", &self.attn_reduce),
            ("attn_fuse", &self.attn_fuse),
            ("gamma", &self.gamma_conv),
            ("beta", &self.beta_conv),
            ("gamma_f", &self.gamma_f_conv),
            ("beta_f", &self.beta_f_conv),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Conv3dParam<T>); 6] {
        [
            ("attn_reduce", &mut self.attn_reduce),
            ("attn_fuse", &mut self.attn_fuse),
            ("gamma", &mut self.gamma_conv),
            ("beta", &mut self.beta_conv),
            ("gamma_f", &mut self.gamma_f_conv),
            ("beta_f", &mut self.beta_f_conv),
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ArhVars {
        ArhVars {
            attn_reduce: self.attn_reduce.bind(g, trainable),
            attn_fuse: self.attn_fuse.bind(g, trainable),
            gamma_conv: self.gamma_conv.bind(g, trainable),
            beta_conv: self.beta_conv.bind(g, trainable),
            gamma_f_conv: self.gamma_f_conv.bind(g, trainable),
            beta_f_conv: self.beta_f_conv.bind(g, trainable),
        }
    }
}

/// ARH parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ArhVars {
    pub attn_reduce: ConvVars,
    pub attn_fuse: ConvVars,
    pub gamma_conv: ConvVars,
    pub beta_conv: ConvVars,
    pub gamma_f_conv: ConvVars,
    pub beta_f_conv: ConvVars,
}

/// Per-channel background statistics.
#[derive(Debug, Clone, Copy)]
pub struct RegionStats {
    /// (1, C, 1, 1, 1) mean.
    pub mu: Var,
    /// (1, C, 1, 1, 1) standard deviation (population).
    pub sigma: Var,
}

/// Nearest-neighbor downsampling; the coarse voxel takes the value of the
/// smallest-index fine voxel of its block. Each axis must shrink by a
/// power-of-two factor.
pub fn mask_resize(m: &Mask3D, target: (usize, usize, usize)) -> Result<Mask3D, ArhError> {
    let ratio = |full: usize, coarse: usize| -> Option<usize> {
        if coarse == 0 || full % coarse != 0 {
            return None;
        }
        let r = full / coarse;
        r.is_power_of_two().then_some(r)
    };
    let (Some(ri), Some(rj), Some(rk)) = (
        ratio(m.dims.0, target.0),
        ratio(m.dims.1, target.1),
        ratio(m.dims.2, target.2),
    ) else {
        return Err(ArhError::BadResize { mask: m.dims, target });
    };
    let mut out = Mask3D::empty(target);
    for i in 0..target.0 {
        for j in 0..target.1 {
            for k in 0..target.2 {
                let v = m.get(i * ri, j * rj, k * rk);
                out.set(i, j, k, v);
            }
        }
    }
    Ok(out)
}

/// A (1, 1, H, W, D) 0/1 tensor mirroring the mask.
pub fn mask_tensor<T: Element>(m: &Mask3D) -> TensorData<T> {
    let (h, w, d) = m.dims;
    let data = m.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    TensorData::new(Shape::new(1, 1, h, w, d), data)
}

fn check_mask<T: Element>(g: &Graph<T>, f: Var, m: Var) -> Result<(), ArhError> {
    let (fs, ms) = (g.shape(f), g.shape(m));
    if fs.0[2..] != ms.0[2..] {
        return Err(ArhError::MaskMismatch {
            mask: (ms.h(), ms.w(), ms.d()),
            feature: (fs.h(), fs.w(), fs.d()),
        });
    }
    Ok(())
}

/// F_f = F (.) M, F_b = F (.) (1 - M); the partition is bit-exact because the
/// mask is binary.
pub fn split_regions<T: Element>(g: &mut Graph<T>, f: Var, m: Var) -> Result<(Var, Var), ArhError> {
    check_mask(g, f, m)?;
    let inv = invert_mask(g, m);
    let ff = g.mul(f, m)?;
    let fb = g.mul(f, inv)?;
    Ok((ff, fb))
}

fn invert_mask<T: Element>(g: &mut Graph<T>, m: Var) -> Var {
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Instance normalization restricted to the voxels selected by `m`; output is
/// zero outside the region. `count` is the number of selected voxels.
fn region_norm<T: Element>(g: &mut Graph<T>, f: Var, m: Var, count: usize) -> Result<Var, TensorError> {
    debug_assert!(count > 0);
    let inv_count = 1.0 / count as f64;
    let fm = g.mul(f, m)?;
    let sum = g.reduce_sum(fm, &[2, 3, 4])?;
    let mean = g.scale(sum, inv_count);
    let centered0 = g.sub(f, mean)?;
    let centered = g.mul(centered0, m)?;
    let sq = g.mul(centered, centered)?;
    let var_sum = g.reduce_sum(sq, &[2, 3, 4])?;
    let var = g.scale(var_sum, inv_count);
    let shifted = g.add_scalar(var, NORM_EPS);
    let denom = g.sqrt(shifted);
    g.div(centered, denom)
}

/// Channel-wise mean and population standard deviation over the voxels
/// selected by `bg` (1 at background). Errors if the region is empty.
pub fn background_stats<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    bg: Var,
    style: StdStyle,
) -> Result<RegionStats, ArhError> {
    check_mask(g, f, bg)?;
    let count = g.value(bg).iter().filter(|v| **v != T::zero()).count();
    if count == 0 {
        return Err(ArhError::EmptyBackground);
    }
    Ok(background_stats_unchecked(g, f, bg, count, style)?)
}

fn background_stats_unchecked<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    bg: Var,
    count: usize,
    style: StdStyle,
) -> Result<RegionStats, TensorError> {
    let inv_count = 1.0 / count as f64;
    let fm = g.mul(f, bg)?;
    let sum = g.reduce_sum(fm, &[2, 3, 4])?;
    let mu = g.scale(sum, inv_count);
    let dev = match style {
        StdStyle::Masked => {
            let centered = g.sub(f, mu)?;
            g.mul(centered, bg)?
        }
        StdStyle::Literal => g.sub(fm, mu)?,
    };
    let sq = g.mul(dev, dev)?;
    let var_sum = g.reduce_sum(sq, &[2, 3, 4])?;
    let var = g.scale(var_sum, inv_count);
    let sigma = g.sqrt(var);
    Ok(RegionStats { mu, sigma })
}

/// F_a = sigmoid(fuse(concat[channel max, channel mean, reduce(F)])), one
/// channel over F's spatial dims, values in (0, 1).
pub fn attention_map<T: Element>(g: &mut Graph<T>, f: Var, p: &ArhVars) -> Result<Var, TensorError> {
    let ch_max = g.reduce(ReduceKind::Max, f, &[1])?;
    let ch_mean = g.reduce(ReduceKind::Mean, f, &[1])?;
    let reduced = p.attn_reduce.apply(g, f)?;
    let cat = g.concat_channels(&[ch_max, ch_mean, reduced])?;
    let fused = p.attn_fuse.apply(g, cat)?;
    Ok(g.sigmoid(fused))
}

/// gamma = gamma_conv(F_a), beta = beta_conv(F_a), each (N, C, H, W, D).
pub fn scaling_params<T: Element>(
    g: &mut Graph<T>,
    f_a: Var,
    p: &ArhVars,
) -> Result<(Var, Var), TensorError> {
    let gamma = p.gamma_conv.apply(g, f_a)?;
    let beta = p.beta_conv.apply(g, f_a)?;
    Ok((gamma, beta))
}

/// gamma_f = gamma_f_conv(gamma + sigma), beta_f = beta_f_conv(beta + mu),
/// with the per-channel statistics broadcast over space.
pub fn foreground_scaling<T: Element>(
    g: &mut Graph<T>,
    gamma: Var,
    beta: Var,
    stats: RegionStats,
    p: &ArhVars,
) -> Result<(Var, Var), TensorError> {
    let gs = g.add(gamma, stats.sigma)?;
    let gamma_f = p.gamma_f_conv.apply(g, gs)?;
    let bm = g.add(beta, stats.mu)?;
    let beta_f = p.beta_f_conv.apply(g, bm)?;
    Ok((gamma_f, beta_f))
}

/// One sample (N = 1). Degenerate regions fall back to whole-map statistics:
/// an empty foreground reduces the layer to plain instance normalization, and
/// an empty background computes mu/sigma over the whole map.
fn arh_forward_sample<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    m: &Mask3D,
    p: &ArhVars,
    style: StdStyle,
) -> Result<Var, ArhError> {
    let fg = m.foreground_count();
    if fg == 0 {
        return Ok(g.instance_norm(f, NORM_EPS));
    }
    let total = g.shape(f).spatial_count();
    let bg = total - fg;
    let mv = g.constant(mask_tensor(m));
    check_mask(g, f, mv)?;
    let inv = invert_mask(g, mv);

    let ff_norm = region_norm(g, f, mv, fg)?;
    let (fb_norm, stats) = if bg == 0 {
        let ones = g.constant(TensorData::full(g.shape(mv), T::one()));
        let stats = background_stats_unchecked(g, f, ones, total, style)?;
        (g.scale(f, 0.0), stats)
    } else {
        let stats = background_stats_unchecked(g, f, inv, bg, style)?;
        (region_norm(g, f, inv, bg)?, stats)
    };

    let f_a = attention_map(g, f, p)?;
    let (gamma, beta) = scaling_params(g, f_a, p)?;
    let (gamma_f, beta_f) = foreground_scaling(g, gamma, beta, stats, p)?;

    let scale = g.add_scalar(gamma_f, 1.0);
    let scaled = g.mul(ff_norm, scale)?;
    let with_beta = g.add(scaled, beta_f)?;
    Ok(g.add(with_beta, fb_norm)?)
}

/// Full ARH layer over a batch; `masks` holds one mask per sample, already
/// resized to F's spatial dims.
pub fn arh_forward<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    masks: &[Mask3D],
    p: &ArhVars,
    style: StdStyle,
) -> Result<Var, ArhError> {
    let n = g.shape(f).n();
    if masks.len() != n {
        return Err(ArhError::MaskCount { expected: n, got: masks.len() });
    }
    let mut outs = Vec::with_capacity(n);
    for (i, m) in masks.iter().enumerate() {
        let fi = g.slice_batch(f, i)?;
        outs.push(arh_forward_sample(g, fi, m, p, style)?);
    }
    Ok(g.stack_batch(&outs)?)
}

fn rain_forward_sample<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    m: &Mask3D,
    style: StdStyle,
) -> Result<Var, ArhError> {
    let fg = m.foreground_count();
    if fg == 0 {
        return Ok(g.instance_norm(f, NORM_EPS));
    }
    let total = g.shape(f).spatial_count();
    let bg = total - fg;
    let mv = g.constant(mask_tensor(m));
    check_mask(g, f, mv)?;
    let inv = invert_mask(g, mv);

    let ff_norm = region_norm(g, f, mv, fg)?;
    let stats = if bg == 0 {
        let ones = g.constant(TensorData::full(g.shape(mv), T::one()));
        background_stats_unchecked(g, f, ones, total, style)?
    } else {
        background_stats_unchecked(g, f, inv, bg, style)?
    };
    let fb = g.mul(f, inv)?;

    let scaled = g.mul(ff_norm, stats.sigma)?;
    let shifted = g.add(scaled, stats.mu)?;
    Ok(g.add(shifted, fb)?)
}

/// Ablation normalizations: `batch` over (N, spatial) per channel, `instance`
/// per (N, C), `rain` transfers raw background mu/sigma onto the
/// region-normalized foreground.
pub fn baseline_norm<T: Element>(
    g: &mut Graph<T>,
    kind: NormKind,
    f: Var,
    masks: &[Mask3D],
    style: StdStyle,
) -> Result<Var, ArhError> {
    match kind {
        NormKind::Arh => panic!("baseline_norm does not handle the arh kind"),
        NormKind::Instance => Ok(g.instance_norm(f, NORM_EPS)),
        NormKind::Batch => {
            let mean = g.reduce_mean(f, &[0, 2, 3, 4])?;
            let centered = g.sub(f, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.reduce_mean(sq, &[0, 2, 3, 4])?;
            let shifted = g.add_scalar(var, NORM_EPS);
            let denom = g.sqrt(shifted);
            Ok(g.div(centered, denom)?)
        }
        NormKind::Rain => {
            let n = g.shape(f).n();
            if masks.len() != n {
                return Err(ArhError::MaskCount { expected: n, got: masks.len() });
            }
            let mut outs = Vec::with_capacity(n);
            for (i, m) in masks.iter().enumerate() {
                let fi = g.slice_batch(f, i)?;
                outs.push(rain_forward_sample(g, fi, m, style)?);
            }
            Ok(g.stack_batch(&outs)?)
        }
    }
}

//! Generator (encoder-decoder predicting an intensity-difference map) and
//! mask-conditioned patch discriminator, plus parameter initialization and
//! the checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use thiserror::Error;

use crate::arh::{arh_forward, baseline_norm, mask_resize, ArhError, ArhParams, ArhVars, Conv3dParam, ConvVars, NormKind, StdStyle};
use crate::tensor::{Element, Graph, Shape, TensorData, TensorError, Var};
use crate::volume::{Mask3D, Volume3D};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arh(#[from] ArhError),
    #[error("patch dims {dims:?} are not divisible by 2^{pools} (levels = {levels})")]
    IndivisibleDims { dims: (usize, usize, usize), pools: u32, levels: usize },
    #[error("batch size {inputs} does not match {masks} masks")]
    BatchMismatch { inputs: usize, masks: usize },
    #[error("input dims {lhs:?} do not match {rhs:?}")]
    DimMismatch { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Encoder depth; the patch is pooled levels - 1 times.
    pub levels: usize,
    /// Channels at the top level, doubled per level.
    pub base_channels: usize,
    pub norm_kind: NormKind,
    /// Feed the mask as a second input channel.
    pub mask_channel: bool,
    pub std_style: StdStyle,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 3,
            base_channels: 16,
            norm_kind: NormKind::Arh,
            mask_channel: true,
            std_style: StdStyle::Masked,
        }
    }
}

impl GeneratorConfig {
    pub fn in_channels(&self) -> usize {
        if self.mask_channel {
            2
        } else {
            1
        }
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate_dims(&self, dims: (usize, usize, usize)) -> Result<(), NetworkError> {
        let pools = (self.levels - 1) as u32;
        let f = 1usize << pools;
        if dims.0 % f != 0 || dims.1 % f != 0 || dims.2 % f != 0 {
            return Err(NetworkError::IndivisibleDims { dims, pools, levels: self.levels });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Stride-2 conv stages.
    pub layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { layers: 4, base_channels: 16 }
    }
}

pub const DISC_IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel<T> {
    pub conv1: Conv3dParam<T>,
    pub conv2: Conv3dParam<T>,
    pub norm1: Option<ArhParams<T>>,
    pub norm2: Option<ArhParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: GeneratorConfig,
    /// Two convs per encoder level, top first.
    pub encoder: Vec<[Conv3dParam<T>; 2]>,
    /// Decoder levels indexed by target scale, top first.
    pub decoder: Vec<DecoderLevel<T>>,
    /// Zero-initialized 1-channel output conv.
    pub final_conv: Conv3dParam<T>,
}

impl<T: Element> GeneratorParams<T> {
    /// Conv weights uniform in (-a, a) with a = sqrt(1 / fan_in), biases
    /// zero; the final conv is fully zero so training starts from the
    /// identity harmonization.
    pub fn init<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Self {
        assert!(config.levels >= 1 && config.base_channels >= 1);
        let mut encoder = Vec::new();
        let mut c_in = config.in_channels();
        for l in 0..config.levels {
            let c = config.level_channels(l);
            encoder.push([Conv3dParam::init(c, c_in, 3, rng), Conv3dParam::init(c, c, 3, rng)]);
            c_in = c;
        }
        let mut decoder = Vec::new();
        for l in 0..config.levels.saturating_sub(1) {
            let c = config.level_channels(l);
            let c_below = config.level_channels(l + 1);
            let arh = |rng: &mut R| {
                (config.norm_kind == NormKind::Arh).then(|| ArhParams::init(c, rng))
            };
            decoder.push(DecoderLevel {
                conv1: Conv3dParam::init(c, c_below + c, 3, rng),
                norm1: arh(rng),
                conv2: Conv3dParam::init(c, c, 3, rng),
                norm2: arh(rng),
            });
        }
        let final_conv = Conv3dParam::zeros(1, config.base_channels, 3);
        GeneratorParams { config: config.clone(), encoder, decoder, final_conv }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData<T>)) {
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            visit_conv(&format!("{prefix}.enc{l}.a"), a, f);
            visit_conv(&format!("{prefix}.enc{l}.b"), b, f);
        }
        for (l, dec) in self.decoder.iter().enumerate() {
            visit_conv(&format!("{prefix}.dec{l}.conv1"), &dec.conv1, f);
            if let Some(n) = &dec.norm1 {
                n.visit(&format!("{prefix}.dec{l}.norm1"), f);
            }
            visit_conv(&format!("{prefix}.dec{l}.conv2"), &dec.conv2, f);
            if let Some(n) = &dec.norm2 {
                n.visit(&format!("{prefix}.dec{l}.norm2"), f);
            }
        }
        visit_conv(&format!("{prefix}.final"), &self.final_conv, f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData<T>)) {
        for (l, [a, b]) in self.encoder.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.enc{l}.a"), a, f);
            visit_conv_mut(&format!("{prefix}.enc{l}.b"), b, f);
        }
        for (l, dec) in self.decoder.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.dec{l}.conv1"), &mut dec.conv1, f);
            if let Some(n) = &mut dec.norm1 {
                n.visit_mut(&format!("{prefix}.dec{l}.norm1"), f);
            }
            visit_conv_mut(&format!("{prefix}.dec{l}.conv2"), &mut dec.conv2, f);
            if let Some(n) = &mut dec.norm2 {
                n.visit_mut(&format!("{prefix}.dec{l}.norm2"), f);
            }
        }
        visit_conv_mut(&format!("{prefix}.final"), &mut self.final_conv, f);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            encoder: self.encoder.iter().map(|[a, b]| [a.bind(g, trainable), b.bind(g, trainable)]).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderVars {
                    conv1: d.conv1.bind(g, trainable),
                    norm1: d.norm1.as_ref().map(|n| n.bind(g, trainable)),
                    conv2: d.conv2.bind(g, trainable),
                    norm2: d.norm2.as_ref().map(|n| n.bind(g, trainable)),
                })
                .collect(),
            final_conv: self.final_conv.bind(g, trainable),
        }
    }
}

fn visit_conv<'a, T>(name: &str, p: &'a Conv3dParam<T>, f: &mut impl FnMut(String, &'a TensorData<T>)) {
    f(format!("{name}.weight"), &p.weight);
    f(format!("{name}.bias"), &p.bias);
}

fn visit_conv_mut<'a, T>(name: &str, p: &'a mut Conv3dParam<T>, f: &mut impl FnMut(String, &'a mut TensorData<T>)) {
    f(format!("{name}.weight"), &mut p.weight);
    f(format!("{name}.bias"), &mut p.bias);
}

pub struct DecoderVars {
    pub conv1: ConvVars,
    pub norm1: Option<ArhVars>,
    pub conv2: ConvVars,
    pub norm2: Option<ArhVars>,
}

pub struct GeneratorVars {
    pub encoder: Vec<[ConvVars; 2]>,
    pub decoder: Vec<DecoderVars>,
    pub final_conv: ConvVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: DiscriminatorConfig,
    pub stages: Vec<Conv3dParam<T>>,
    pub final_conv: Conv3dParam<T>,
}

impl<T: Element> DiscriminatorParams<T> {
    pub fn init<R: Rng>(config: &DiscriminatorConfig, rng: &mut R) -> Self {
        assert!(config.layers >= 1 && config.base_channels >= 1);
        let mut stages = Vec::new();
        let mut c_in = DISC_IN_CHANNELS;
        for l in 0..config.layers {
            let c = config.base_channels << l;
            stages.push(Conv3dParam::init(c, c_in, 3, rng));
            c_in = c;
        }
        let final_conv = Conv3dParam::init(1, c_in, 3, rng);
        DiscriminatorParams { config: config.clone(), stages, final_conv }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData<T>)) {
        for (l, s) in self.stages.iter().enumerate() {
            visit_conv(&format!("{prefix}.stage{l}"), s, f);
        }
        visit_conv(&format!("{prefix}.final"), &self.final_conv, f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData<T>)) {
        for (l, s) in self.stages.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.stage{l}"), s, f);
        }
        visit_conv_mut(&format!("{prefix}.final"), &mut self.final_conv, f);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            stages: self.stages.iter().map(|s| s.bind(g, trainable)).collect(),
            final_conv: self.final_conv.bind(g, trainable),
        }
    }
}

pub struct DiscriminatorVars {
    pub stages: Vec<ConvVars>,
    pub final_conv: ConvVars,
}

fn apply_norm<T: Element>(
    g: &mut Graph<T>,
    config: &GeneratorConfig,
    x: Var,
    masks: &[Mask3D],
    arh: Option<&ArhVars>,
) -> Result<Var, ArhError> {
    match config.norm_kind {
        NormKind::Arh => arh_forward(g, x, masks, arh.expect("arh params present"), config.std_style),
        kind => baseline_norm(g, kind, x, masks, config.std_style),
    }
}

/// Run the generator over a batch already living in a graph. `i_tilde` is
/// (N, 1, H, W, D) in [0, 1]; `masks` holds the full-resolution patch mask of
/// every sample. Returns the raw difference map and the harmonized output
/// clamp01(i_tilde + diff (.) M); background voxels pass through bit-exactly.
pub fn generator_forward_graph<T: Element>(
    g: &mut Graph<T>,
    config: &GeneratorConfig,
    vars: &GeneratorVars,
    i_tilde: Var,
    masks: &[Mask3D],
) -> Result<(Var, Var), NetworkError> {
    let shape = g.shape(i_tilde);
    let dims = (shape.h(), shape.w(), shape.d());
    config.validate_dims(dims)?;
    if masks.len() != shape.n() {
        return Err(NetworkError::BatchMismatch { inputs: shape.n(), masks: masks.len() });
    }
    for m in masks {
        if m.dims != dims {
            return Err(NetworkError::DimMismatch { lhs: m.dims, rhs: dims });
        }
    }

    let mask_full = stack_masks(g, masks);
    let mut x = if config.mask_channel {
        g.concat_channels(&[i_tilde, mask_full])?
    } else {
        i_tilde
    };

    let mut skips = Vec::new();
    for (l, [a, b]) in vars.encoder.iter().enumerate() {
        x = a.apply(g, x)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
        x = b.apply(g, x)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
        if l + 1 < vars.encoder.len() {
            skips.push(x);
            x = g.avg_pool2(x)?;
        }
    }

    for l in (0..vars.decoder.len()).rev() {
        let dec = &vars.decoder[l];
        let scale = 1usize << l;
        let level_masks = masks
            .iter()
            .map(|m| mask_resize(m, (dims.0 / scale, dims.1 / scale, dims.2 / scale)))
            .collect::<Result<Vec<_>, _>>()?;
        x = g.upsample_nearest2(x);
        x = g.concat_channels(&[x, skips[l]])?;
        x = dec.conv1.apply(g, x)?;
        x = apply_norm(g, config, x, &level_masks, dec.norm1.as_ref())?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
        x = dec.conv2.apply(g, x)?;
        x = apply_norm(g, config, x, &level_masks, dec.norm2.as_ref())?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
    }

    let diff = vars.final_conv.apply(g, x)?;
    let masked = g.mul(diff, mask_full)?;
    let sum = g.add(i_tilde, masked)?;
    let i_hat = g.clamp01(sum);
    Ok((diff, i_hat))
}

fn stack_masks<T: Element>(g: &mut Graph<T>, masks: &[Mask3D]) -> Var {
    let (h, w, d) = masks[0].dims;
    let mut data = Vec::with_capacity(masks.len() * h * w * d);
    for m in masks {
        data.extend(m.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
    }
    g.constant(TensorData::new(Shape::new(masks.len(), 1, h, w, d), data))
}

/// Single-volume convenience wrapper around [`generator_forward_graph`].
pub fn generator_forward(
    i_tilde: &Volume3D,
    mask: &Mask3D,
    params: &GeneratorParams<f32>,
) -> Result<(TensorData<f32>, Volume3D), NetworkError> {
    if i_tilde.dims != mask.dims {
        return Err(NetworkError::DimMismatch { lhs: i_tilde.dims, rhs: mask.dims });
    }
    let mut g: Graph<f32> = Graph::new();
    let vars = params.bind(&mut g, false);
    let (h, w, d) = i_tilde.dims;
    let input = g.constant(TensorData::new(Shape::new(1, 1, h, w, d), i_tilde.data.clone()));
    let (diff, i_hat) = generator_forward_graph(&mut g, &params.config, &vars, input, std::slice::from_ref(mask))?;
    let out = Volume3D::new(i_tilde.dims, i_tilde.spacing, g.value(i_hat).to_vec());
    Ok((g.tensor_data(diff), out))
}

/// Per-sample critic scores, shape (N, 1, 1, 1, 1): concat(candidate, i_tilde,
/// mask) through stride-2 leaky-relu stages, then the spatial mean of a final
/// 1-channel map.
pub fn discriminator_forward_graph<T: Element>(
    g: &mut Graph<T>,
    vars: &DiscriminatorVars,
    candidate: Var,
    i_tilde: Var,
    masks: &[Mask3D],
) -> Result<Var, NetworkError> {
    let (cs, is) = (g.shape(candidate), g.shape(i_tilde));
    if cs != is {
        return Err(NetworkError::DimMismatch {
            lhs: (cs.h(), cs.w(), cs.d()),
            rhs: (is.h(), is.w(), is.d()),
        });
    }
    if masks.len() != cs.n() {
        return Err(NetworkError::BatchMismatch { inputs: cs.n(), masks: masks.len() });
    }
    for m in masks {
        if m.dims != (cs.h(), cs.w(), cs.d()) {
            return Err(NetworkError::DimMismatch { lhs: m.dims, rhs: (cs.h(), cs.w(), cs.d()) });
        }
    }
    let mask_full = stack_masks(g, masks);
    let mut x = g.concat_channels(&[candidate, i_tilde, mask_full])?;
    for stage in &vars.stages {
        x = g.conv3d(x, stage.w, stage.b, 2, 1)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
    }
    let map = vars.final_conv.apply(g, x)?;
    Ok(g.reduce_mean(map, &[2, 3, 4])?)
}

/// Single-volume critic score.
pub fn discriminator_forward(
    candidate: &Volume3D,
    i_tilde: &Volume3D,
    mask: &Mask3D,
    params: &DiscriminatorParams<f32>,
) -> Result<f32, NetworkError> {
    if candidate.dims != i_tilde.dims || candidate.dims != mask.dims {
        return Err(NetworkError::DimMismatch { lhs: candidate.dims, rhs: i_tilde.dims });
    }
    let mut g: Graph<f32> = Graph::new();
    let vars = params.bind(&mut g, false);
    let (h, w, d) = candidate.dims;
    let c = g.constant(TensorData::new(Shape::new(1, 1, h, w, d), candidate.data.clone()));
    let i = g.constant(TensorData::new(Shape::new(1, 1, h, w, d), i_tilde.data.clone()));
    let score = discriminator_forward_graph(&mut g, &vars, c, i, std::slice::from_ref(mask))?;
    Ok(g.value(score)[0])
}

// -- checkpointing -------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARHF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Ordered named float32 buffers; model weights, optimizer moments, and
/// training counters all travel in this one container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub buffers: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let wrap = |source: std::io::Error| CheckpointError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(ckpt.buffers.len() as u32)?;
        for (name, data) in &ckpt.buffers {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(data.len() as u32)?;
            for &v in data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()
    })()
    .map_err(wrap)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let wrap = |source: std::io::Error| CheckpointError::Io { path: path.display().to_string(), source };
    let mut r = BufReader::new(File::open(path).map_err(wrap)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(wrap)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(wrap)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.read_u32::<LittleEndian>().map_err(wrap)?;
    let mut buffers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(wrap)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt(format!("buffer name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(wrap)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let data_len = r.read_u32::<LittleEndian>().map_err(wrap)? as usize;
        let mut data = vec![0f32; data_len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(wrap)?;
        buffers.push((name, data));
    }
    Ok(Checkpoint { buffers })
}

#[cfg(test)]
mod tests;

//! Alternating adversarial training of the generator/discriminator pair over
//! perturbed-patch pairs, with AdamW for both networks, CSV loss logging,
//! periodic checkpoints, and bit-reproducible resume.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arh::{ArhError, NormKind, StdStyle};
use crate::augment::{extract_boundary, perturb_foreground, sample_perturbation, AugmentError, Perturbation};
use crate::io::{list_volume_files, load_mask, load_volume_auto, IoError};
use crate::losses::{
    loss_adv_d, loss_adv_g, loss_btv, loss_rec, loss_total, HingeConvention, LossWeights, Reduction,
};
use crate::metrics::psnr;
use crate::networks::{
    discriminator_forward_graph, generator_forward, generator_forward_graph, load_checkpoint,
    save_checkpoint, Checkpoint, CheckpointError, DiscriminatorConfig, DiscriminatorParams,
    GeneratorConfig, GeneratorParams, NetworkError,
};
use crate::optim::{adamw_update, AdamWConfig, OptimState};
use crate::tensor::{Graph, Shape, TensorData, TensorError, Var};
use crate::volume::{extract_patch, read_patch, Mask3D, PatchSpec, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arh(#[from] ArhError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("no paired image/mask cases under {0}")]
    EmptyDataset(PathBuf),
    #[error("image {name} has no mask with the same stem")]
    UnpairedCase { name: String },
    #[error(
        "non-finite loss at iteration {iter}: rec={l_rec} btv={l_btv} adv_g={l_adv_g} adv_d={l_adv_d}"
    )]
    NonFinite { iter: u64, l_rec: f64, l_btv: f64, l_adv_g: f64, l_adv_d: f64 },
    #[error("log i/o on {path}: {source}")]
    Log { path: PathBuf, source: std::io::Error },
}

// -- configuration --------------------------------------------------------------

/// Full training configuration. The struct default is the desk profile;
/// [`TrainConfig::paper`] gives the full-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Total-iteration override; when set the epoch count is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    pub patch_size: usize,
    pub seed: u64,
    pub w_rec: f64,
    pub w_btv: f64,
    pub w_adv: f64,
    pub norm_kind: String,
    pub std_style: String,
    pub mask_channel: bool,
    pub levels: usize,
    pub base_channels: usize,
    pub disc_layers: usize,
    pub disc_base: usize,
    pub loss_reduction: String,
    pub hinge_convention: String,
    pub boundary_radius: usize,
    pub data_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub probe_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-everything profile for laptop-scale experiments.
    pub fn desk() -> Self {
        TrainConfig {
            lr_g: 1e-4,
            lr_d: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 2,
            epochs: 10,
            iterations: None,
            patch_size: 16,
            seed: 0,
            w_rec: 100.0,
            w_btv: 10.0,
            w_adv: 1.0,
            norm_kind: "arh".into(),
            std_style: "masked".into(),
            mask_channel: true,
            levels: 2,
            base_channels: 8,
            disc_layers: 3,
            disc_base: 8,
            loss_reduction: "mean".into(),
            hinge_convention: "paper".into(),
            boundary_radius: 1,
            data_dir: PathBuf::from("data/train"),
            probe_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 500,
            probe_every: 500,
            resume: None,
        }
    }

    /// Full-scale profile: 64-cube patches, batch 16, 200 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            patch_size: 64,
            levels: 3,
            base_channels: 16,
            disc_layers: 4,
            disc_base: 16,
            ..TrainConfig::desk()
        }
    }

    /// Load from an optional TOML file plus `key=value` overrides. A `preset`
    /// key (`desk` or `paper`) selects the base profile; unknown keys are
    /// rejected.
    pub fn from_sources(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, TrainError> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| IoError::Io { path: p.to_owned(), source })?;
                text.parse::<toml::Table>()
                    .map_err(|e| TrainError::BadConfig(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| TrainError::BadConfig(format!("override '{ov}' is not key=value")))?;
            user.insert(key.trim().to_string(), parse_toml_value(raw.trim()));
        }

        let base = match user.remove("preset") {
            None => TrainConfig::desk(),
            Some(toml::Value::String(s)) if s == "desk" => TrainConfig::desk(),
            Some(toml::Value::String(s)) if s == "paper" => TrainConfig::paper(),
            Some(v) => return Err(TrainError::BadConfig(format!("unknown preset {v}"))),
        };
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| TrainError::BadConfig(format!("serialize defaults: {e}")))?;
        for (k, v) in user {
            if !merged.contains_key(&k) && !matches!(k.as_str(), "iterations" | "probe_dir" | "resume") {
                return Err(TrainError::BadConfig(format!("unknown config key '{k}'")));
            }
            merged.insert(k, v);
        }
        let cfg: TrainConfig = merged
            .try_into()
            .map_err(|e| TrainError::BadConfig(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return bad(format!("learning rates must be > 0, got {} / {}", self.lr_g, self.lr_d));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.levels == 0 || self.base_channels == 0 || self.disc_layers == 0 || self.disc_base == 0 {
            return bad("network sizes must be >= 1".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {div} for {} levels",
                self.patch_size, self.levels
            ));
        }
        if self.boundary_radius == 0 {
            return bad("boundary_radius must be >= 1".into());
        }
        self.parsed_norm_kind()?;
        self.parsed_std_style()?;
        self.parsed_reduction()?;
        self.parsed_hinge()?;
        Ok(())
    }

    pub fn parsed_norm_kind(&self) -> Result<NormKind, TrainError> {
        NormKind::parse(&self.norm_kind)
            .ok_or_else(|| TrainError::BadConfig(format!("unknown norm_kind '{}'", self.norm_kind)))
    }

    pub fn parsed_std_style(&self) -> Result<StdStyle, TrainError> {
        StdStyle::parse(&self.std_style)
            .ok_or_else(|| TrainError::BadConfig(format!("unknown std_style '{}'", self.std_style)))
    }

    pub fn parsed_reduction(&self) -> Result<Reduction, TrainError> {
        Reduction::parse(&self.loss_reduction).ok_or_else(|| {
            TrainError::BadConfig(format!("unknown loss_reduction '{}'", self.loss_reduction))
        })
    }

    pub fn parsed_hinge(&self) -> Result<HingeConvention, TrainError> {
        HingeConvention::parse(&self.hinge_convention).ok_or_else(|| {
            TrainError::BadConfig(format!("unknown hinge_convention '{}'", self.hinge_convention))
        })
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig, TrainError> {
        Ok(GeneratorConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            norm_kind: self.parsed_norm_kind()?,
            mask_channel: self.mask_channel,
            std_style: self.parsed_std_style()?,
        })
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { layers: self.disc_layers, base_channels: self.disc_base }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { w_rec: self.w_rec, w_btv: self.w_btv, w_adv: self.w_adv }
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn adamw_g(&self) -> AdamWConfig {
        self.adamw(self.lr_g)
    }

    pub fn adamw_d(&self) -> AdamWConfig {
        self.adamw(self.lr_d)
    }

    pub fn patch_dims(&self) -> (usize, usize, usize) {
        (self.patch_size, self.patch_size, self.patch_size)
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// -- dataset ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Volume3D,
    pub mask: Mask3D,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

/// Load `<root>/images/*` paired with `<root>/masks/<same stem>`, sorted by
/// stem.
pub fn load_dataset(root: &Path) -> Result<Dataset, TrainError> {
    let images = list_volume_files(&root.join("images"))?;
    let masks = list_volume_files(&root.join("masks"))?;
    if images.is_empty() {
        return Err(TrainError::EmptyDataset(root.to_owned()));
    }
    let mut cases = Vec::new();
    for (name, path) in images {
        let mask_path = masks
            .iter()
            .find(|(stem, _)| *stem == name)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| TrainError::UnpairedCase { name: name.clone() })?;
        cases.push(Case { name, image: load_volume_auto(&path)?, mask: load_mask(&mask_path)? });
    }
    Ok(Dataset { cases })
}

// -- rng streams -----------------------------------------------------------------

/// Stream derived from (seed, purpose tag, epoch, index) so randomness is
/// independent of batching or thread schedule.
pub fn derive_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in tag.as_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[24..32].copy_from_slice(&h.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

// -- trainer ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub l_rec: f64,
    pub l_btv: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

/// Corrupted inputs and batch tensors shared by the two phases of one step.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub i_tilde: TensorData<f32>,
    pub i_real: TensorData<f32>,
    pub masks: Vec<Mask3D>,
    pub boundaries: Vec<Mask3D>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub gen: GeneratorParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub opt_g: OptimState,
    pub opt_d: OptimState,
    /// Completed iterations.
    pub iter: u64,
}

fn grad_of(g: &Graph<f32>, leaves: &[Var]) -> Vec<Vec<f32>> {
    leaves
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect()
}

fn grad_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

fn batch_tensor(vols: &[&Volume3D]) -> TensorData<f32> {
    let (h, w, d) = vols[0].dims;
    let mut data = Vec::with_capacity(vols.len() * h * w * d);
    for v in vols {
        data.extend_from_slice(&v.data);
    }
    TensorData::new(Shape::new(vols.len(), 1, h, w, d), data)
}

fn masks_tensor(masks: &[Mask3D]) -> TensorData<f32> {
    let (h, w, d) = masks[0].dims;
    let mut data = Vec::with_capacity(masks.len() * h * w * d);
    for m in masks {
        data.extend(m.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }));
    }
    TensorData::new(Shape::new(masks.len(), 1, h, w, d), data)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer, TrainError> {
        config.validate()?;
        let gen_cfg = config.generator_config()?;
        let mut rng = derive_rng(config.seed, "init", 0, 0);
        let gen = GeneratorParams::init(&gen_cfg, &mut rng);
        let disc = DiscriminatorParams::init(&config.discriminator_config(), &mut rng);
        let mut g_sizes = Vec::new();
        gen.visit("g", &mut |_, t| g_sizes.push(t.data.len()));
        let mut d_sizes = Vec::new();
        disc.visit("d", &mut |_, t| d_sizes.push(t.data.len()));
        Ok(Trainer {
            config,
            gen,
            disc,
            opt_g: OptimState::new(&g_sizes),
            opt_d: OptimState::new(&d_sizes),
            iter: 0,
        })
    }

    /// Build the corrupted inputs and batch tensors for one step;
    /// `perts[i]` corrupts `batch[i]`.
    pub fn prepare(
        &self,
        batch: &[(Volume3D, Mask3D)],
        perts: &[Perturbation],
    ) -> Result<PreparedBatch, TrainError> {
        assert_eq!(batch.len(), perts.len(), "one perturbation per sample");
        assert!(!batch.is_empty());
        let masks: Vec<Mask3D> = batch.iter().map(|(_, m)| m.clone()).collect();
        let reals: Vec<&Volume3D> = batch.iter().map(|(v, _)| v).collect();
        let tilded: Vec<Volume3D> = batch
            .iter()
            .zip(perts)
            .map(|((v, m), &p)| perturb_foreground(v, m, p))
            .collect::<Result<_, _>>()?;
        let tilde_refs: Vec<&Volume3D> = tilded.iter().collect();
        let boundaries: Vec<Mask3D> =
            masks.iter().map(|m| extract_boundary(m, self.config.boundary_radius)).collect();
        Ok(PreparedBatch {
            i_tilde: batch_tensor(&tilde_refs),
            i_real: batch_tensor(&reals),
            masks,
            boundaries,
        })
    }

    /// Hinge update of the critic on the detached generator output; returns
    /// (l_adv_d, grad norm). Generator parameters are not touched.
    pub fn discriminator_step(&mut self, pb: &PreparedBatch) -> Result<(f64, f64), TrainError> {
        let gen_cfg = self.config.generator_config()?;
        let hinge = self.config.parsed_hinge()?;

        let i_hat_detached = {
            let mut g: Graph<f32> = Graph::new();
            let vars = self.gen.bind(&mut g, false);
            let x = g.constant(pb.i_tilde.clone());
            let (_, i_hat) = generator_forward_graph(&mut g, &gen_cfg, &vars, x, &pb.masks)?;
            g.tensor_data(i_hat)
        };

        let mut g: Graph<f32> = Graph::new();
        let dvars = self.disc.bind(&mut g, true);
        let leaves = g.trainable_leaves();
        let fake = g.constant(i_hat_detached);
        let real = g.constant(pb.i_real.clone());
        let tilde = g.constant(pb.i_tilde.clone());
        let s_fake = discriminator_forward_graph(&mut g, &dvars, fake, tilde, &pb.masks)?;
        let s_real = discriminator_forward_graph(&mut g, &dvars, real, tilde, &pb.masks)?;
        let s_fake = g.mean_all(s_fake);
        let s_real = g.mean_all(s_real);
        let loss = loss_adv_d(&mut g, s_fake, s_real, hinge)?;
        g.backward(loss)?;
        let l_adv_d = g.scalar(loss) as f64;
        if !l_adv_d.is_finite() {
            return Err(TrainError::NonFinite {
                iter: self.iter,
                l_rec: f64::NAN,
                l_btv: f64::NAN,
                l_adv_g: f64::NAN,
                l_adv_d,
            });
        }
        let grads = grad_of(&g, &leaves);
        drop(g);
        let cfg = self.config.adamw_d();
        apply_grads(|mut f| self.disc.visit_mut("d", &mut f), &grads, &mut self.opt_d, &cfg);
        Ok((l_adv_d, grad_norm(&grads)))
    }

    /// Weighted-loss update of the generator; the adversarial score flows
    /// through the frozen discriminator on the non-detached output. Returns
    /// (l_rec, l_btv, l_adv_g, grad norm).
    pub fn generator_step(&mut self, pb: &PreparedBatch) -> Result<(f64, f64, f64, f64), TrainError> {
        let gen_cfg = self.config.generator_config()?;
        let reduction = self.config.parsed_reduction()?;
        let weights = self.config.weights();

        let mut g: Graph<f32> = Graph::new();
        let gvars = self.gen.bind(&mut g, true);
        let leaves = g.trainable_leaves();
        let dvars = self.disc.bind(&mut g, false);
        let x = g.constant(pb.i_tilde.clone());
        let real = g.constant(pb.i_real.clone());
        let boundary = g.constant(masks_tensor(&pb.boundaries));
        let (_, i_hat) = generator_forward_graph(&mut g, &gen_cfg, &gvars, x, &pb.masks)?;
        let rec = loss_rec(&mut g, real, i_hat, reduction)?;
        let btv = loss_btv(&mut g, i_hat, boundary, reduction)?;
        let s_fake = discriminator_forward_graph(&mut g, &dvars, i_hat, x, &pb.masks)?;
        let s_fake = g.mean_all(s_fake);
        let adv = loss_adv_g(&mut g, s_fake);
        let total = loss_total(&mut g, rec, btv, adv, &weights)?;
        g.backward(total)?;
        let (l_rec, l_btv, l_adv_g) =
            (g.scalar(rec) as f64, g.scalar(btv) as f64, g.scalar(adv) as f64);
        if ![l_rec, l_btv, l_adv_g].iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFinite {
                iter: self.iter,
                l_rec,
                l_btv,
                l_adv_g,
                l_adv_d: f64::NAN,
            });
        }
        let grads = grad_of(&g, &leaves);
        drop(g);
        let cfg = self.config.adamw_g();
        apply_grads(|mut f| self.gen.visit_mut("g", &mut f), &grads, &mut self.opt_g, &cfg);
        Ok((l_rec, l_btv, l_adv_g, grad_norm(&grads)))
    }

    /// One alternating step: a discriminator update on the detached output,
    /// then a generator update.
    pub fn train_step(
        &mut self,
        batch: &[(Volume3D, Mask3D)],
        perts: &[Perturbation],
    ) -> Result<StepReport, TrainError> {
        let pb = self.prepare(batch, perts)?;
        let (l_adv_d, grad_norm_d) = self.discriminator_step(&pb)?;
        let (l_rec, l_btv, l_adv_g, grad_norm_g) = self.generator_step(&pb)?;
        self.iter += 1;
        Ok(StepReport { l_rec, l_btv, l_adv_g, l_adv_d, grad_norm_g, grad_norm_d })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut buffers: Vec<(String, Vec<f32>)> = Vec::new();
        self.gen.visit("g", &mut |name, t| buffers.push((name, t.data.clone())));
        self.disc.visit("d", &mut |name, t| buffers.push((name, t.data.clone())));
        let push_moments = |prefix: &str,
                                names: &[String],
                                state: &OptimState,
                                buffers: &mut Vec<(String, Vec<f32>)>| {
            for (i, name) in names.iter().enumerate() {
                buffers.push((format!("{prefix}.{name}.m"), state.m[i].clone()));
                buffers.push((format!("{prefix}.{name}.v"), state.v[i].clone()));
            }
        };
        let mut g_names = Vec::new();
        self.gen.visit("g", &mut |name, _| g_names.push(name));
        let mut d_names = Vec::new();
        self.disc.visit("d", &mut |name, _| d_names.push(name));
        push_moments("opt", &g_names, &self.opt_g, &mut buffers);
        push_moments("opt", &d_names, &self.opt_d, &mut buffers);
        buffers.push((
            "meta".into(),
            pack_u64s(&[self.iter, self.opt_g.step, self.opt_d.step]),
        ));
        Checkpoint { buffers }
    }

    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Trainer, TrainError> {
        let mut t = Trainer::new(config)?;
        let fetch = |name: &str, len: usize| -> Result<Vec<f32>, TrainError> {
            let buf = ckpt
                .get(name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing buffer {name}")))?;
            if buf.len() != len {
                return Err(CheckpointError::Corrupt(format!(
                    "buffer {name} has {} values, expected {len}",
                    buf.len()
                ))
                .into());
            }
            Ok(buf.to_vec())
        };
        let mut restore = Ok(());
        t.gen.visit_mut("g", &mut |name, td| {
            if restore.is_ok() {
                match fetch(&name, td.data.len()) {
                    Ok(buf) => td.data = buf,
                    Err(e) => restore = Err(e),
                }
            }
        });
        restore?;
        let mut restore = Ok(());
        t.disc.visit_mut("d", &mut |name, td| {
            if restore.is_ok() {
                match fetch(&name, td.data.len()) {
                    Ok(buf) => td.data = buf,
                    Err(e) => restore = Err(e),
                }
            }
        });
        restore?;
        let mut g_names = Vec::new();
        t.gen.visit("g", &mut |name, _| g_names.push(name));
        let mut d_names = Vec::new();
        t.disc.visit("d", &mut |name, _| d_names.push(name));
        for (i, name) in g_names.iter().enumerate() {
            t.opt_g.m[i] = fetch(&format!("opt.{name}.m"), t.opt_g.m[i].len())?;
            t.opt_g.v[i] = fetch(&format!("opt.{name}.v"), t.opt_g.v[i].len())?;
        }
        for (i, name) in d_names.iter().enumerate() {
            t.opt_d.m[i] = fetch(&format!("opt.{name}.m"), t.opt_d.m[i].len())?;
            t.opt_d.v[i] = fetch(&format!("opt.{name}.v"), t.opt_d.v[i].len())?;
        }
        let meta = fetch("meta", 6)?;
        let counters = unpack_u64s(&meta);
        t.iter = counters[0];
        t.opt_g.step = counters[1];
        t.opt_d.step = counters[2];
        Ok(t)
    }
}

/// Bit-preserving u64 -> two-f32 packing for the checkpoint's float buffers.
fn pack_u64s(values: &[u64]) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for &v in values {
        out.push(f32::from_bits((v & 0xffff_ffff) as u32));
        out.push(f32::from_bits((v >> 32) as u32));
    }
    out
}

fn unpack_u64s(buf: &[f32]) -> Vec<u64> {
    buf.chunks_exact(2)
        .map(|c| (c[0].to_bits() as u64) | ((c[1].to_bits() as u64) << 32))
        .collect()
}

fn apply_grads(
    visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut TensorData<f32>)),
    grads: &[Vec<f32>],
    state: &mut OptimState,
    cfg: &AdamWConfig,
) {
    state.step += 1;
    let step = state.step;
    let (m, v) = (&mut state.m, &mut state.v);
    let mut i = 0usize;
    visit_mut(&mut |_, t| {
        adamw_update(&mut t.data, &grads[i], &mut m[i], &mut v[i], step, cfg);
        i += 1;
    });
    assert_eq!(i, grads.len(), "parameter/gradient count mismatch");
}

// -- full run --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub iterations: u64,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub const LOG_HEADER: &str = "iter,l_rec,l_btv,l_adv_g,l_adv_d,probe_fpsnr";

/// Held-out probe: fixed per-case perturbations, centered crops to
/// network-divisible dims, mean foreground PSNR of the harmonized output.
pub fn probe_fpsnr(trainer: &Trainer, probe: &Dataset) -> Result<Option<f64>, TrainError> {
    let div = 1usize << (trainer.config.levels - 1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (idx, case) in probe.cases.iter().enumerate() {
        let crop = |full: usize| (full / div) * div;
        let size = (crop(case.image.dims.0), crop(case.image.dims.1), crop(case.image.dims.2));
        if size.0 == 0 || size.1 == 0 || size.2 == 0 {
            continue;
        }
        let origin = (
            (case.image.dims.0 - size.0) / 2,
            (case.image.dims.1 - size.1) / 2,
            (case.image.dims.2 - size.2) / 2,
        );
        let (img, mask) = read_patch(&case.image, &case.mask, PatchSpec { origin, size })?;
        if mask.foreground_count() == 0 {
            continue;
        }
        let mut rng = derive_rng(trainer.config.seed, "probe", 0, idx as u64);
        let pert = sample_perturbation(&mut rng);
        let i_tilde = perturb_foreground(&img, &mask, pert)?;
        let (_, i_hat) = generator_forward(&i_tilde, &mask, &trainer.gen)?;
        sum += psnr(&img, &i_hat, Some(&mask)).expect("non-empty foreground");
        count += 1;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Run the full loop: seeded epoch shuffles, one random patch per image per
/// epoch, CSV logging, periodic checkpoints, optional resume.
pub fn train(config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let dataset = load_dataset(&config.data_dir)?;
    let probe = match &config.probe_dir {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|source| TrainError::Log { path: config.out_dir.clone(), source })?;

    let mut trainer = match &config.resume {
        Some(path) => Trainer::from_checkpoint(config.clone(), &load_checkpoint(path)?)?,
        None => Trainer::new(config.clone())?,
    };

    let n = dataset.cases.len() as u64;
    let bs = config.batch_size as u64;
    let steps_per_epoch = n.div_ceil(bs);
    let total = config.iterations.unwrap_or(config.epochs * steps_per_epoch).max(trainer.iter);

    let log_path = config.out_dir.join("train_log.csv");
    let log_err = |source: std::io::Error| TrainError::Log { path: log_path.clone(), source };
    let mut log = if config.resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path).map_err(log_err)?
    } else {
        let mut f = std::fs::File::create(&log_path).map_err(log_err)?;
        writeln!(f, "{LOG_HEADER}").map_err(log_err)?;
        f
    };

    let ckpt_path = |iter: u64| config.out_dir.join(format!("ckpt_{iter:06}.arhf"));
    let mut last_ckpt = ckpt_path(total);
    let patch_dims = config.patch_dims();

    while trainer.iter < total {
        let iter = trainer.iter;
        let epoch = iter / steps_per_epoch;
        let pos = iter % steps_per_epoch;

        let mut order: Vec<usize> = (0..dataset.cases.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, "shuffle", epoch, 0));
        let lo = (pos * bs) as usize;
        let hi = ((pos + 1) * bs).min(n) as usize;

        let mut batch = Vec::new();
        let mut perts = Vec::new();
        for &case_idx in &order[lo..hi] {
            let case = &dataset.cases[case_idx];
            let mut patch_rng = derive_rng(config.seed, "patch", epoch, case_idx as u64);
            let (img, mask, _) = extract_patch(&case.image, &case.mask, patch_dims, &mut patch_rng)?;
            let mut pert_rng = derive_rng(config.seed, "perturb", epoch, case_idx as u64);
            perts.push(sample_perturbation(&mut pert_rng));
            batch.push((img, mask));
        }

        let report = trainer.train_step(&batch, &perts)?;
        let done = trainer.iter;

        let probe_cell = if config.probe_every > 0
            && (done % config.probe_every == 0 || done == total)
        {
            match &probe {
                Some(p) => probe_fpsnr(&trainer, p)?.map(|v| format!("{v:.6}")).unwrap_or_default(),
                None => String::new(),
            }
        } else {
            String::new()
        };
        writeln!(
            log,
            "{done},{:.6},{:.6},{:.6},{:.6},{probe_cell}",
            report.l_rec, report.l_btv, report.l_adv_g, report.l_adv_d
        )
        .map_err(log_err)?;

        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == total {
            let path = ckpt_path(done);
            save_checkpoint(&trainer.to_checkpoint(), &path)?;
            last_ckpt = path;
        }
    }
    log.flush().map_err(log_err)?;

    Ok(TrainOutput { iterations: total, log_path, final_checkpoint: last_ckpt })
}

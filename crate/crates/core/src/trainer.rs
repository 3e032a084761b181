//! Seeded Adam training of the chunk policy and the `HDCP` checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "HDCP" | u32 version | u32 header length | header JSON | param_count × f32
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{write_atomic, Dataset, Episode};
use crate::error::{Error, Result};
use crate::policy::{
    init_params, loss_and_gradient, normalize_action, sample_mask, ArchConfig, MaskConfig, PolicyParams, Sample,
    SparseGrid,
};
use crate::rng;
use crate::sim::{ACTION_DIM, PROPRIO_DIM};

pub const CKPT_MAGIC: [u8; 4] = *b"HDCP";
pub const CKPT_VERSION: u32 = 1;
pub const LOG_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub arch: ArchConfig,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            arch: ArchConfig::default(),
            mask: MaskConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("steps and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("lr, clip norm and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam moments must be in [0, 1)".into()));
        }
        self.mask.validate()?;
        self.arch.validate()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    /// Mean loss over each window of [`LOG_EVERY`] steps (the last window
    /// may be shorter).
    pub log: Vec<LossRecord>,
    /// Gradient norm after clipping, per step.
    pub grad_norms: Vec<f64>,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,mean_loss\n");
    for r in log {
        out.push_str(&format!("{},{}\n", r.step, r.mean_loss));
    }
    out
}

/// Frames of a corpus prepared for chunk sampling.
pub struct TrainSet {
    grids: Vec<SparseGrid>,
    proprios: Vec<[f32; PROPRIO_DIM]>,
    actions: Vec<[f32; ACTION_DIM]>,
    /// Exclusive end of the frame's episode.
    episode_end: Vec<usize>,
}

impl TrainSet {
    pub fn new<'a>(episodes: impl IntoIterator<Item = &'a Episode>, arch: &ArchConfig) -> Result<Self> {
        let mut set = TrainSet { grids: vec![], proprios: vec![], actions: vec![], episode_end: vec![] };
        for ep in episodes {
            ep.validate()?;
            let end = set.grids.len() + ep.frames.len();
            for f in &ep.frames {
                set.grids.push(SparseGrid::from_grid(&f.grid, arch)?);
                set.proprios.push(f.proprio);
                set.actions.push(normalize_action(&f.action));
                set.episode_end.push(end);
            }
        }
        if set.grids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(set)
    }

    pub fn frames(&self) -> usize {
        self.grids.len()
    }

    /// Target chunk starting at frame `i`: tails repeat the final action and
    /// are marked invalid.
    pub fn chunk(&self, i: usize, k: usize) -> (Vec<f32>, Vec<bool>) {
        let end = self.episode_end[i];
        let mut target = Vec::with_capacity(k * ACTION_DIM);
        let mut valid = Vec::with_capacity(k);
        for j in 0..k {
            let f = (i + j).min(end - 1);
            target.extend_from_slice(&self.actions[f]);
            valid.push(i + j < end);
        }
        (target, valid)
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut [f32], g: &[f32], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.lr as f32;
        let eps = cfg.eps as f32;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Trains from an in-memory frame set.
pub fn train_set(set: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let arch = cfg.arch;
    let k = arch.chunk;
    let mut params = init_params(arch, rng::derive_seed(cfg.seed, &[0x696e6974]))?;
    let n = params.values.len();
    let mut adam = Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
    let mut log = Vec::new();
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut window = (0.0, 0usize);
    let mut r = rng::stream(cfg.seed, &[0x6261_7463]);
    for step in 1..=cfg.steps {
        let mut grids = Vec::with_capacity(cfg.batch);
        let mut chunks = Vec::with_capacity(cfg.batch);
        let mut idx = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = r.random_range(0..set.frames());
            let grid = match sample_mask(&cfg.mask, &mut r) {
                Some(mask) => set.grids[i].masked(&mask),
                None => set.grids[i].clone(),
            };
            grids.push(grid);
            chunks.push(set.chunk(i, k));
            idx.push(i);
        }
        let batch: Vec<Sample> = (0..cfg.batch)
            .map(|b| Sample {
                grid: &grids[b],
                proprio: &set.proprios[idx[b]],
                target: &chunks[b].0,
                valid: &chunks[b].1,
            })
            .collect();
        let (loss, mut g) = match loss_and_gradient::<f32>(&arch, &params.values, &batch) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        if scale < 1.0 {
            let s = scale as f32;
            g.iter_mut().for_each(|v| *v *= s);
        }
        grad_norms.push(g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt());
        adam.step(&mut params.values, &g, cfg);
        window.0 += loss as f64;
        window.1 += 1;
        if step % LOG_EVERY == 0 || step == cfg.steps {
            log.push(LossRecord { step, mean_loss: window.0 / window.1 as f64 });
            window = (0.0, 0);
        }
    }
    Ok(TrainOutput { params, log, grad_norms })
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let set = TrainSet::new(&dataset.episodes, &cfg.arch)?;
    train_set(&set, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub param_count: usize,
    #[serde(default)]
    pub train_config_digest: Option<String>,
    #[serde(default)]
    pub manifest_digest: Option<String>,
}

impl CheckpointHeader {
    pub fn for_params(params: &PolicyParams, train_config_digest: Option<String>, manifest_digest: Option<String>) -> Self {
        CheckpointHeader { arch: params.arch, param_count: params.values.len(), train_config_digest, manifest_digest }
    }
}

pub fn encode_checkpoint(params: &PolicyParams, header: &CheckpointHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + params.values.len() * 4);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(params: &PolicyParams, header: &CheckpointHeader, path: &Path) -> Result<()> {
    if header.arch != params.arch || header.param_count != params.values.len() {
        return Err(Error::DimMismatch("checkpoint header does not describe the parameters".into()));
    }
    write_atomic(path, &encode_checkpoint(params, header))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(PolicyParams, CheckpointHeader)> {
    let truncated = |what: &str| Error::Truncated { path: path.into(), what: what.into() };
    let magic: [u8; 4] = bytes.get(..4).ok_or_else(|| truncated("magic"))?.try_into().expect("4 bytes");
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: magic });
    }
    let word = |at: usize, what: &str| -> Result<u32> {
        let b = bytes.get(at..at + 4).ok_or_else(|| truncated(what))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let version = word(4, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: CKPT_VERSION });
    }
    let len = word(8, "header length")? as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| truncated("header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::BadHeader { path: path.into(), reason: e.to_string() })?;
    header.arch.validate()?;
    if header.arch.param_count() != header.param_count {
        return Err(Error::DimMismatch(format!(
            "header declares {} parameters, architecture has {}",
            header.param_count,
            header.arch.param_count()
        )));
    }
    let blob = &bytes[12 + len..];
    if blob.len() < header.param_count * 4 {
        return Err(truncated(&format!("parameter blob ({} of {} values)", blob.len() / 4, header.param_count)));
    }
    if blob.len() > header.param_count * 4 {
        return Err(Error::InvalidEpisode(format!("{}: trailing bytes after parameters", path.display())));
    }
    let values = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((PolicyParams { arch: header.arch, values }, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and checks it against the observation layout the
/// caller will feed it.
pub fn load_checkpoint_for(path: &Path, grid_dims: [usize; 3]) -> Result<PolicyParams> {
    let (params, _) = load_checkpoint(path)?;
    if params.arch.grid_dims != grid_dims {
        return Err(Error::DimMismatch(format!(
            "checkpoint expects grid {:?}, evaluator provides {:?}",
            params.arch.grid_dims, grid_dims
        )));
    }
    Ok(params)
}

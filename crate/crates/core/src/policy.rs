//! Chunked behavior-cloning policy.
//!
//! Architecture: non-overlapping patch embedding with a learned positional
//! embedding and SiLU, mean-pooled over tokens; proprioception is appended
//! and passed through two SiLU hidden layers; a linear head with `tanh`
//! produces `K × 4` actions in normalized units (each coordinate divided by
//! its per-step limit, see [`Action::LIMITS`]).
//!
//! Parameter layout of the flat array, in order, all row-major:
//!
//! | block | shape |
//! |-------|-------|
//! | patch weights | `patch_len × embed` |
//! | patch bias | `embed` |
//! | positional embedding | `tokens × embed` |
//! | hidden 1 weights, bias | `(embed + proprio) × h1`, `h1` |
//! | hidden 2 weights, bias | `h1 × h2`, `h2` |
//! | head weights, bias | `h2 × K·4`, `K·4` |
//!
//! Inside a patch the input index is `channel·p² + dy·p + dx`.

use std::fmt::Debug;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Action, ObservationGrid, ACTION_DIM, GRID_CHANNELS, GRID_SIZE, PROPRIO_DIM};

pub const DEFAULT_CHUNK: usize = 32;
pub const PARAM_BUDGET: usize = 500_000;
/// Batch elements per gradient shard; shards are reduced in index order.
pub const DEFAULT_OCTAVES: usize = 6;
pub const DEFAULT_COORD_INPUTS: bool = true;
pub const SHARD: usize = 16;

/// Scalar type the network can be evaluated in.
pub trait Float: num_traits::Float + Default + Send + Sync + Debug + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;

    /// `c = alpha·a·b + beta·c` on strided row-major storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_float {
    ($t:ty, $f:path) => {
        impl Float for $t {
            fn of(v: f64) -> Self {
                v as $t
            }

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (ars, acs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (brs, bcs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices cover every element addressed by the
                // given dimensions and strides (checked above).
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), ars, acs, b.as_ptr(), brs, bcs, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub grid_dims: [usize; 3],
    pub patch: usize,
    pub embed: usize,
    pub hidden: [usize; 2],
    pub chunk: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    /// Octaves of the fixed sin/cos encoding applied to each proprio value.
    #[serde(default)]
    pub proprio_octaves: usize,
    /// Each occupied cell also feeds its plane coordinates through learned
    /// per-channel weights.
    #[serde(default)]
    pub coord_inputs: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            grid_dims: [GRID_CHANNELS, GRID_SIZE, GRID_SIZE],
            patch: 4,
            embed: 32,
            hidden: [256, 256],
            chunk: DEFAULT_CHUNK,
            proprio_dim: PROPRIO_DIM,
            action_dim: ACTION_DIM,
            proprio_octaves: DEFAULT_OCTAVES,
            coord_inputs: DEFAULT_COORD_INPUTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub coord_w: Range<usize>,
    pub pos: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl ArchConfig {
    pub fn side(&self) -> usize {
        self.grid_dims[1] / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.side() * self.side()
    }

    pub fn patch_len(&self) -> usize {
        self.grid_dims[0] * self.patch * self.patch
    }

    pub fn grid_len(&self) -> usize {
        self.grid_dims.iter().product()
    }

    /// Width of the encoded proprio vector.
    pub fn proprio_features(&self) -> usize {
        self.proprio_dim * (1 + 2 * self.proprio_octaves)
    }

    pub fn outputs(&self) -> usize {
        self.chunk * self.action_dim
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let [h1, h2] = self.hidden;
        Layout {
            patch_w: take(self.patch_len() * self.embed),
            patch_b: take(self.embed),
            coord_w: take(if self.coord_inputs { 2 * self.grid_dims[0] * self.embed } else { 0 }),
            pos: take(self.tokens() * self.embed),
            w1: take((self.embed + self.proprio_features()) * h1),
            b1: take(h1),
            w2: take(h1 * h2),
            b2: take(h2),
            w3: take(h2 * self.outputs()),
            b3: take(self.outputs()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b3.end
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArch(m));
        if self.grid_dims.contains(&0) || self.grid_dims[1] != self.grid_dims[2] {
            return bad(format!("grid dims {:?}", self.grid_dims));
        }
        if self.patch == 0 || self.grid_dims[1] % self.patch != 0 {
            return bad(format!("patch {} does not divide {}", self.patch, self.grid_dims[1]));
        }
        if self.embed == 0 || self.hidden.contains(&0) || self.chunk == 0 {
            return bad("zero width".into());
        }
        if self.proprio_dim != PROPRIO_DIM || self.action_dim != ACTION_DIM {
            return bad(format!("proprio {} / action {}", self.proprio_dim, self.action_dim));
        }
        if self.proprio_octaves > 16 {
            return bad(format!("{} proprio octaves", self.proprio_octaves));
        }
        if self.tokens() > u16::MAX as usize || self.patch_len() > u16::MAX as usize {
            return bad("grid too large".into());
        }
        let n = self.param_count();
        if n > PARAM_BUDGET {
            return bad(format!("{n} parameters exceed the budget of {PARAM_BUDGET}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: ArchConfig,
    pub values: Vec<f32>,
}

impl PolicyParams {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(PolicyParams { arch, values: vec![0.0; arch.param_count()] })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Seeded scaled-uniform initialization: weights in `±sqrt(6 / (fan_in +
/// fan_out))`, positional embedding in `±0.1`, biases zero.
pub fn init_params(arch: ArchConfig, seed: u64) -> Result<PolicyParams> {
    let mut p = PolicyParams::zeros(arch)?;
    let l = arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h1, h2] = arch.hidden;
    let mut fill = |r: Range<usize>, limit: f64| {
        for v in &mut p.values[r] {
            *v = rng.random_range(-limit..=limit) as f32;
        }
    };
    let glorot = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
    fill(l.patch_w, glorot(arch.patch_len(), arch.embed));
    fill(l.coord_w, glorot(2 * arch.grid_dims[0], arch.embed));
    fill(l.pos, 0.1);
    fill(l.w1, glorot(arch.embed + arch.proprio_features(), h1));
    fill(l.w2, glorot(h1, h2));
    fill(l.w3, glorot(h2, arch.outputs()));
    Ok(p)
}

/// Non-zero cells of a grid, grouped by patch token.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    /// `(token, index inside patch, cell index on the plane, value)`.
    pub entries: Vec<(u16, u16, u16, f32)>,
}

impl SparseGrid {
    pub fn from_grid(grid: &ObservationGrid, arch: &ArchConfig) -> Result<Self> {
        if grid.values.len() != arch.grid_len() {
            return Err(Error::DimMismatch(format!(
                "grid has {} values, policy expects {}",
                grid.values.len(),
                arch.grid_len()
            )));
        }
        let [channels, size, _] = arch.grid_dims;
        let p = arch.patch;
        let side = arch.side();
        let mut entries = Vec::new();
        for c in 0..channels {
            for row in 0..size {
                for col in 0..size {
                    let v = grid.values[(c * size + row) * size + col];
                    if v != 0.0 {
                        let token = (row / p) * side + col / p;
                        let local = c * p * p + (row % p) * p + col % p;
                        entries.push((token as u16, local as u16, (row * size + col) as u16, v));
                    }
                }
            }
        }
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        Ok(SparseGrid { entries })
    }

    /// Drops every entry whose cell is masked.
    pub fn masked(&self, mask: &CellMask) -> SparseGrid {
        SparseGrid { entries: self.entries.iter().copied().filter(|e| !mask.cells[e.2 as usize]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub apply_probability: f64,
    pub area_fraction: f64,
    pub patch_sizes: [usize; 3],
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { apply_probability: 0.7, area_fraction: 0.5, patch_sizes: [2, 4, 8] }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        MaskConfig { apply_probability: 0.0, ..Self::default() }
    }

    /// Always-on occlusion of a fixed area fraction.
    pub fn occlusion(area_fraction: f64) -> Self {
        MaskConfig { apply_probability: 1.0, area_fraction, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) || !(0.0..=1.0).contains(&self.area_fraction) {
            return Err(Error::InvalidConfig(format!("mask probability/fraction out of range: {self:?}")));
        }
        if self.patch_sizes.iter().any(|&p| p == 0 || GRID_SIZE % p != 0) {
            return Err(Error::InvalidConfig(format!("mask patch sizes {:?} must divide {GRID_SIZE}", self.patch_sizes)));
        }
        Ok(())
    }
}

/// Cells of the 32×32 plane hidden in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    pub patch: usize,
    pub patches: usize,
    pub cells: Vec<bool>,
}

impl CellMask {
    pub fn masked_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn apply(&self, grid: &ObservationGrid) -> ObservationGrid {
        let mut out = grid.clone();
        let plane = GRID_SIZE * GRID_SIZE;
        for (i, v) in out.values.iter_mut().enumerate() {
            if self.cells[i % plane] {
                *v = 0.0;
            }
        }
        out
    }
}

/// Draws the mask for one application; `None` on the identity branch.
pub fn sample_mask<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> Option<CellMask> {
    if rng.random::<f64>() >= cfg.apply_probability {
        return None;
    }
    let p = cfg.patch_sizes[rng.random_range(0..cfg.patch_sizes.len())];
    let side = GRID_SIZE / p;
    let count = (cfg.area_fraction * (side * side) as f64).round() as usize;
    let mut cells = vec![false; GRID_SIZE * GRID_SIZE];
    for k in sample(rng, side * side, count) {
        let (pr, pc) = (k / side, k % side);
        for row in pr * p..(pr + 1) * p {
            for col in pc * p..(pc + 1) * p {
                cells[row * GRID_SIZE + col] = true;
            }
        }
    }
    Some(CellMask { patch: p, patches: count, cells })
}

/// Zero-mask augmentation of a whole grid.
pub fn mask_augment<R: Rng + ?Sized>(grid: &ObservationGrid, cfg: &MaskConfig, rng: &mut R) -> ObservationGrid {
    match sample_mask(cfg, rng) {
        Some(mask) => mask.apply(grid),
        None => grid.clone(),
    }
}

/// `K × 4` normalized actions in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub k: usize,
    pub values: Vec<f32>,
}

impl Chunk {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * ACTION_DIM..(i + 1) * ACTION_DIM]
    }

    pub fn action(&self, i: usize) -> Action {
        let r = self.row(i);
        Action::from_normalized(&r.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }
}

/// Recorded action `[dx, dy, dθ, grip code]` in normalized units.
pub fn normalize_action(a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
    let mut out = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        out[i] = (a[i] as f64 / Action::LIMITS[i]) as f32;
    }
    out
}

/// Mean absolute error over valid chunk positions and all coordinates.
pub fn bc_loss(pred: &Chunk, target: &[f32], valid: &[bool]) -> Result<f64> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if target.len() != pred.values.len() || valid.len() != pred.k {
        return Err(Error::DimMismatch(format!(
            "chunk {}×{ACTION_DIM}, target {} values, mask {}",
            pred.k,
            target.len(),
            valid.len()
        )));
    }
    let mut s = 0.0;
    for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for c in 0..ACTION_DIM {
            let j = i * ACTION_DIM + c;
            s += (pred.values[j] as f64 - target[j] as f64).abs();
        }
    }
    Ok(s / (n * ACTION_DIM) as f64)
}

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub grid: &'a SparseGrid,
    pub proprio: &'a [f32; PROPRIO_DIM],
    /// `K × 4` normalized targets.
    pub target: &'a [f32],
    pub valid: &'a [bool],
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Float>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Float>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

struct Cache<F> {
    b: usize,
    /// Token pre-activations `[b × tokens × embed]`.
    z: Vec<F>,
    /// Pooled features and proprio `[b × (embed + proprio)]`.
    u: Vec<F>,
    a1: Vec<F>,
    h1: Vec<F>,
    a2: Vec<F>,
    h2: Vec<F>,
    y: Vec<F>,
}

fn forward_batch<F: Float>(
    arch: &ArchConfig,
    p: &[F],
    grids: &[&SparseGrid],
    proprios: &[&[f32; PROPRIO_DIM]],
) -> Cache<F> {
    let l = arch.layout();
    let b = grids.len();
    let (t, e) = (arch.tokens(), arch.embed);
    let [h1w, h2w] = arch.hidden;
    let uw = e + arch.proprio_features();
    let o = arch.outputs();
    let (pw, pb, pos) = (&p[l.patch_w.clone()], &p[l.patch_b.clone()], &p[l.pos.clone()]);

    let mut z = vec![F::zero(); b * t * e];
    let mut u = vec![F::zero(); b * uw];
    let inv_t = F::of(1.0 / t as f64);
    for s in 0..b {
        let zs = &mut z[s * t * e..(s + 1) * t * e];
        for tok in 0..t {
            for j in 0..e {
                zs[tok * e + j] = pb[j] + pos[tok * e + j];
            }
        }
        for &(tok, local, cell, v) in &grids[s].entries {
            let row = &pw[local as usize * e..(local as usize + 1) * e];
            let zt = &mut zs[tok as usize * e..(tok as usize + 1) * e];
            let v = F::of(v as f64);
            for j in 0..e {
                zt[j] = zt[j] + v * row[j];
            }
            if arch.coord_inputs {
                let (c, x, y) = cell_coords(arch, local, cell);
                let (vx, vy) = (v * F::of(x), v * F::of(y));
                let cw = &p[l.coord_w.clone()][2 * c * e..(2 * c + 2) * e];
                for j in 0..e {
                    zt[j] = zt[j] + vx * cw[j] + vy * cw[e + j];
                }
            }
        }
        let us = &mut u[s * uw..(s + 1) * uw];
        for tok in 0..t {
            for j in 0..e {
                us[j] = us[j] + silu(zs[tok * e + j]);
            }
        }
        for j in 0..e {
            us[j] = us[j] * inv_t;
        }
        encode_proprio(arch, proprios[s], &mut us[e..]);
    }

    let dense = |input: &[F], w: Range<usize>, bias: Range<usize>, n_in: usize, n_out: usize| {
        let mut out = vec![F::zero(); b * n_out];
        for s in 0..b {
            out[s * n_out..(s + 1) * n_out].copy_from_slice(&p[bias.clone()]);
        }
        F::gemm(b, n_in, n_out, input, false, &p[w], false, F::one(), &mut out);
        out
    };
    let a1 = dense(&u, l.w1.clone(), l.b1.clone(), uw, h1w);
    let h1: Vec<F> = a1.iter().map(|&x| silu(x)).collect();
    let a2 = dense(&h1, l.w2.clone(), l.b2.clone(), h1w, h2w);
    let h2: Vec<F> = a2.iter().map(|&x| silu(x)).collect();
    let a3 = dense(&h2, l.w3.clone(), l.b3.clone(), h2w, o);
    let y = a3.iter().map(|&x| x.tanh()).collect();
    Cache { b, z, u, a1, h1, a2, h2, y }
}

/// Channel and cell-center plane coordinates of a sparse entry.
fn cell_coords(arch: &ArchConfig, local: u16, cell: u16) -> (usize, f64, f64) {
    let size = arch.grid_dims[1];
    let c = local as usize / (arch.patch * arch.patch);
    let (row, col) = (cell as usize / size, cell as usize % size);
    (c, (col as f64 + 0.5) / size as f64, (row as f64 + 0.5) / size as f64)
}

/// Raw proprio followed by `sin(2^k π v)`, `cos(2^k π v)` per octave `k`.
fn encode_proprio<F: Float>(arch: &ArchConfig, proprio: &[f32; PROPRIO_DIM], out: &mut [F]) {
    let n = arch.proprio_dim;
    for (i, &v) in proprio.iter().enumerate() {
        let v = v as f64;
        out[i] = F::of(v);
        for k in 0..arch.proprio_octaves {
            let (sn, cs) = (v * std::f64::consts::PI * (1u32 << k) as f64).sin_cos();
            out[n + (i * arch.proprio_octaves + k) * 2] = F::of(sn);
            out[n + (i * arch.proprio_octaves + k) * 2 + 1] = F::of(cs);
        }
    }
}

fn check_input(arch: &ArchConfig, grid: &SparseGrid, proprio: &[f32]) -> Result<()> {
    if proprio.len() != arch.proprio_dim {
        return Err(Error::DimMismatch(format!("proprio has {} values, expected {}", proprio.len(), arch.proprio_dim)));
    }
    let (t, pl) = (arch.tokens(), arch.patch_len());
    if grid.entries.iter().any(|e| e.0 as usize >= t || e.1 as usize >= pl) {
        return Err(Error::DimMismatch("sparse grid does not match the patch layout".into()));
    }
    Ok(())
}

/// Chunk prediction from a dense observation.
pub fn forward(params: &PolicyParams, grid: &ObservationGrid, proprio: &[f32; PROPRIO_DIM]) -> Result<Chunk> {
    let sparse = SparseGrid::from_grid(grid, &params.arch)?;
    forward_sparse(params, &sparse, proprio)
}

pub fn forward_sparse(params: &PolicyParams, grid: &SparseGrid, proprio: &[f32; PROPRIO_DIM]) -> Result<Chunk> {
    check_input(&params.arch, grid, proprio)?;
    let c = forward_batch::<f32>(&params.arch, &params.values, &[grid], &[proprio]);
    Ok(Chunk { k: params.arch.chunk, values: c.y })
}

/// Loss and gradient accumulated into `grad` for one shard. `scale` is the
/// reciprocal of the full batch size.
fn shard_gradient<F: Float>(arch: &ArchConfig, p: &[F], batch: &[Sample], scale: F, grad: &mut [F]) -> F {
    let l = arch.layout();
    let grids: Vec<&SparseGrid> = batch.iter().map(|s| s.grid).collect();
    let props: Vec<&[f32; PROPRIO_DIM]> = batch.iter().map(|s| s.proprio).collect();
    let c = forward_batch(arch, p, &grids, &props);
    let b = c.b;
    let (t, e) = (arch.tokens(), arch.embed);
    let [h1w, h2w] = arch.hidden;
    let uw = e + arch.proprio_features();
    let o = arch.outputs();

    let mut loss = F::zero();
    let mut d3 = vec![F::zero(); b * o];
    for (s, sample) in batch.iter().enumerate() {
        let n = sample.valid.iter().filter(|&&v| v).count();
        let w = scale / F::of((n * ACTION_DIM) as f64);
        for (k, _) in sample.valid.iter().enumerate().filter(|(_, &v)| v) {
            for ch in 0..ACTION_DIM {
                let j = k * ACTION_DIM + ch;
                let y = c.y[s * o + j];
                let r = y - F::of(sample.target[j] as f64);
                loss = loss + r.abs() * w;
                let sign = if r > F::zero() {
                    F::one()
                } else if r < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                d3[s * o + j] = sign * w * (F::one() - y * y);
            }
        }
    }

    let back = |input: &[F],
                delta: &[F],
                n_in: usize,
                n_out: usize,
                w: Range<usize>,
                bias: Range<usize>,
                grad: &mut [F],
                need_input: bool|
     -> Vec<F> {
        F::gemm(n_in, b, n_out, input, true, delta, false, F::one(), &mut grad[w.clone()]);
        let gb = &mut grad[bias];
        for s in 0..b {
            for j in 0..n_out {
                gb[j] = gb[j] + delta[s * n_out + j];
            }
        }
        let mut d_in = Vec::new();
        if need_input {
            d_in = vec![F::zero(); b * n_in];
            F::gemm(b, n_out, n_in, delta, false, &p[w], true, F::zero(), &mut d_in);
        }
        d_in
    };
    let dh2 = back(&c.h2, &d3, h2w, o, l.w3.clone(), l.b3.clone(), grad, true);
    let d2: Vec<F> = dh2.iter().zip(&c.a2).map(|(&g, &a)| g * silu_grad(a)).collect();
    let dh1 = back(&c.h1, &d2, h1w, h2w, l.w2.clone(), l.b2.clone(), grad, true);
    let d1: Vec<F> = dh1.iter().zip(&c.a1).map(|(&g, &a)| g * silu_grad(a)).collect();
    let du = back(&c.u, &d1, uw, h1w, l.w1.clone(), l.b1.clone(), grad, true);

    let inv_t = F::of(1.0 / t as f64);
    let mut dz = vec![F::zero(); t * e];
    for s in 0..b {
        let zs = &c.z[s * t * e..(s + 1) * t * e];
        let de = &du[s * uw..s * uw + e];
        for tok in 0..t {
            for j in 0..e {
                dz[tok * e + j] = de[j] * inv_t * silu_grad(zs[tok * e + j]);
            }
        }
        {
            let gpos = &mut grad[l.pos.clone()];
            for (g, &d) in gpos.iter_mut().zip(&dz) {
                *g = *g + d;
            }
        }
        {
            let gb = &mut grad[l.patch_b.clone()];
            for tok in 0..t {
                for j in 0..e {
                    gb[j] = gb[j] + dz[tok * e + j];
                }
            }
        }
        for &(tok, local, cell, v) in &batch[s].grid.entries {
            let v = F::of(v as f64);
            let dzt = &dz[tok as usize * e..(tok as usize + 1) * e];
            let row = &mut grad[l.patch_w.start + local as usize * e..l.patch_w.start + (local as usize + 1) * e];
            for j in 0..e {
                row[j] = row[j] + v * dzt[j];
            }
            if arch.coord_inputs {
                let (c, x, y) = cell_coords(arch, local, cell);
                let (vx, vy) = (v * F::of(x), v * F::of(y));
                let at = l.coord_w.start + 2 * c * e;
                let cw = &mut grad[at..at + 2 * e];
                for j in 0..e {
                    cw[j] = cw[j] + vx * dzt[j];
                    cw[e + j] = cw[e + j] + vy * dzt[j];
                }
            }
        }
    }
    loss
}

/// Mean chunk loss over the batch and its analytic gradient, evaluated in
/// `F`. Shards of [`SHARD`] samples run in parallel and are summed in index
/// order, so the result does not depend on the thread count.
pub fn loss_and_gradient<F: Float>(arch: &ArchConfig, params: &[F], batch: &[Sample]) -> Result<(F, Vec<F>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        check_input(arch, s.grid, s.proprio)?;
        if s.target.len() != arch.outputs() || s.valid.len() != arch.chunk {
            return Err(Error::DimMismatch("target chunk shape".into()));
        }
        if !s.valid.iter().any(|&v| v) {
            return Err(Error::EmptyMask);
        }
    }
    let scale = F::of(1.0 / batch.len() as f64);
    let n = arch.param_count();
    let parts: Vec<(F, Vec<F>)> = batch
        .par_chunks(SHARD)
        .map(|shard| {
            let mut g = vec![F::zero(); n];
            let l = shard_gradient(arch, params, shard, scale, &mut g);
            (l, g)
        })
        .collect();
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); n];
    for (l, g) in parts {
        loss = loss + l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok((loss, grad))
}

/// Analytic gradient of the mean batch loss, in the parameter layout.
pub fn gradient(params: &PolicyParams, batch: &[Sample]) -> Result<Vec<f32>> {
    Ok(loss_and_gradient::<f32>(&params.arch, &params.values, batch)?.1)
}

/// Mean batch loss evaluated in `F`.
pub fn batch_loss<F: Float>(arch: &ArchConfig, params: &[F], batch: &[Sample]) -> F {
    let grids: Vec<&SparseGrid> = batch.iter().map(|s| s.grid).collect();
    let props: Vec<&[f32; PROPRIO_DIM]> = batch.iter().map(|s| s.proprio).collect();
    let c = forward_batch(arch, params, &grids, &props);
    let o = arch.outputs();
    let mut total = F::zero();
    for (s, sample) in batch.iter().enumerate() {
        let n = sample.valid.iter().filter(|&&v| v).count();
        let mut l = F::zero();
        for (k, _) in sample.valid.iter().enumerate().filter(|(_, &v)| v) {
            for ch in 0..ACTION_DIM {
                let j = k * ACTION_DIM + ch;
                l = l + (c.y[s * o + j] - F::of(sample.target[j] as f64)).abs();
            }
        }
        total = total + l / F::of((n * ACTION_DIM) as f64);
    }
    total / F::of(batch.len() as f64)
}

/// Result of a central finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient against central differences in `f64` on
/// randomly chosen coordinates. The relative error uses
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check(params: &PolicyParams, batch: &[Sample], h: f64, coords: usize, seed: u64) -> Result<GradCheck> {
    let p64: Vec<f64> = params.values.iter().map(|&v| v as f64).collect();
    let (_, g) = loss_and_gradient::<f64>(&params.arch, &p64, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = p64.clone();
    for i in sample(&mut rng, p64.len(), coords.min(p64.len())) {
        probe[i] = p64[i] + h;
        let up = batch_loss::<f64>(&params.arch, &probe, batch);
        probe[i] = p64[i] - h;
        let down = batch_loss::<f64>(&params.arch, &probe, batch);
        probe[i] = p64[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(GradCheck { coordinates: coords.min(p64.len()), max_rel_error: worst })
}

/// Fixed probe batch for gradient checks: random scenes with targets kept
/// at distance ≥ 0.3 from the prediction so that no absolute-value kink is
/// crossed by a perturbation.
pub struct ProbeBatch {
    pub grids: Vec<SparseGrid>,
    pub proprios: Vec<[f32; PROPRIO_DIM]>,
    pub targets: Vec<Vec<f32>>,
    pub valid: Vec<Vec<bool>>,
}

impl ProbeBatch {
    pub fn new(params: &PolicyParams, n: usize, seed: u64) -> Result<Self> {
        use crate::sim::{init_task, rasterize, proprio, TaskId};
        let arch = params.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = ProbeBatch { grids: vec![], proprios: vec![], targets: vec![], valid: vec![] };
        for i in 0..n {
            let task = TaskId::ALL[i % TaskId::ALL.len()];
            let mut state = init_task(task, rng.random(), None)?;
            state.ee.x = rng.random_range(0.1..0.9);
            state.ee.y = rng.random_range(0.1..0.9);
            let grid = SparseGrid::from_grid(&rasterize(&state), &arch)?;
            let prop = proprio(&state).to_f32();
            let pred = forward_sparse(params, &grid, &prop)?;
            let target = pred
                .values
                .iter()
                .map(|&y| {
                    let off = rng.random_range(0.3..0.6);
                    if y > 0.0 { y - off } else { y + off }
                })
                .collect();
            let mut valid = vec![true; arch.chunk];
            if i % 2 == 1 {
                valid[arch.chunk / 2..].iter_mut().for_each(|v| *v = false);
            }
            out.grids.push(grid);
            out.proprios.push(prop);
            out.targets.push(target);
            out.valid.push(valid);
        }
        Ok(out)
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.grids.len())
            .map(|i| Sample {
                grid: &self.grids[i],
                proprio: &self.proprios[i],
                target: &self.targets[i],
                valid: &self.valid[i],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{init_task, proprio, rasterize, TaskId};

    fn small() -> ArchConfig {
        ArchConfig { embed: 8, hidden: [16, 12], chunk: 4, ..ArchConfig::default() }
    }

    #[test]
    fn default_budget() {
        let a = ArchConfig::default();
        a.validate().unwrap();
        assert!(a.param_count() <= PARAM_BUDGET);
        assert_eq!(a.tokens(), 64);
        assert_eq!(a.patch_len(), 96);
        let zero = ArchConfig { hidden: [0, 256], ..a };
        assert!(matches!(init_params(zero, 1), Err(Error::InvalidArch(_))));
        let huge = ArchConfig { hidden: [2048, 2048], ..a };
        assert!(matches!(init_params(huge, 1), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(ArchConfig::default(), 3).unwrap();
        assert_eq!(a, init_params(ArchConfig::default(), 3).unwrap());
        assert_ne!(a, init_params(ArchConfig::default(), 4).unwrap());
        assert!(a.is_finite());
    }

    #[test]
    fn forward_shape_and_bounds() {
        let p = init_params(ArchConfig::default(), 1).unwrap();
        let s = init_task(TaskId::Teacup, 2, None).unwrap();
        let c = forward(&p, &rasterize(&s), &proprio(&s).to_f32()).unwrap();
        assert_eq!(c.values.len(), 32 * 4);
        assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(c, forward(&p, &rasterize(&s), &proprio(&s).to_f32()).unwrap());
        for i in 0..c.k {
            let a = c.action(i);
            assert!(a.dx.abs() <= 0.02 && a.dy.abs() <= 0.02 && a.dtheta.abs() <= 0.15);
        }
        let z = PolicyParams::zeros(ArchConfig::default()).unwrap();
        assert!(forward(&z, &rasterize(&s), &proprio(&s).to_f32()).unwrap().values.iter().all(|&v| v == 0.0));
        let bad = ObservationGrid { values: vec![0.0; 10] };
        assert!(matches!(forward(&p, &bad, &proprio(&s).to_f32()), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn loss_rules() {
        let pred = Chunk { k: 4, values: (0..16).map(|i| i as f32 * 0.05).collect() };
        let full = vec![true; 4];
        assert_eq!(bc_loss(&pred, &pred.values, &full).unwrap(), 0.0);
        let shifted: Vec<f32> = pred.values.iter().map(|v| v - 0.25).collect();
        assert!((bc_loss(&pred, &shifted, &full).unwrap() - 0.25).abs() < 1e-6);
        let half = vec![true, true, false, false];
        let mut perturbed = shifted.clone();
        perturbed[8..].iter_mut().for_each(|v| *v += 9.0);
        assert_eq!(bc_loss(&pred, &shifted, &half).unwrap(), bc_loss(&pred, &perturbed, &half).unwrap());
        assert!(matches!(bc_loss(&pred, &shifted, &[false; 4]), Err(Error::EmptyMask)));
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let p = init_params(small(), 5).unwrap();
        let s = init_task(TaskId::Pens, 1, None).unwrap();
        let grid = SparseGrid::from_grid(&rasterize(&s), &p.arch).unwrap();
        let prop = proprio(&s).to_f32();
        let target = forward_sparse(&p, &grid, &prop).unwrap().values;
        let valid = vec![true; 4];
        let g = gradient(&p, &[Sample { grid: &grid, proprio: &prop, target: &target, valid: &valid }]).unwrap();
        assert!(g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = init_params(small(), 9).unwrap();
        let probe = ProbeBatch::new(&p, 4, 2).unwrap();
        let check = grad_check(&p, &probe.samples(), 1e-3, 200, 1).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        let arch = ArchConfig { proprio_octaves: 3, coord_inputs: !DEFAULT_COORD_INPUTS, ..small() };
        let p = init_params(arch, 9).unwrap();
        let probe = ProbeBatch::new(&p, 4, 2).unwrap();
        let check = grad_check(&p, &probe.samples(), 1e-3, 200, 1).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let p = init_params(small(), 9).unwrap();
        let probe = ProbeBatch::new(&p, 3, 4).unwrap();
        let s = probe.samples();
        let doubled: Vec<Sample> = s.iter().chain(s.iter()).copied().collect();
        let p64: Vec<f64> = p.values.iter().map(|&v| v as f64).collect();
        let (_, g1) = loss_and_gradient::<f64>(&p.arch, &p64, &s).unwrap();
        let (_, g2) = loss_and_gradient::<f64>(&p.arch, &p64, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(matches!(gradient(&p, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn masking_rules() {
        let s = init_task(TaskId::Teacup, 3, None).unwrap();
        let g = rasterize(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_augment(&g, &MaskConfig::disabled(), &mut rng), g);
        for p in [2, 4, 8] {
            let cfg = MaskConfig { apply_probability: 1.0, area_fraction: 0.5, patch_sizes: [p; 3] };
            let mask = sample_mask(&cfg, &mut rng).unwrap();
            let side = 32 / p;
            let expect = ((0.5 * (side * side) as f64).round() as usize) * p * p;
            assert_eq!(mask.masked_cells(), expect);
            if p == 4 {
                assert_eq!(mask.patches, 32);
            }
            let out = mask.apply(&g);
            for (i, (&a, &b)) in g.values.iter().zip(&out.values).enumerate() {
                if mask.cells[i % 1024] {
                    assert_eq!(b, 0.0);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            let arch = ArchConfig::default();
            let sparse = SparseGrid::from_grid(&g, &arch).unwrap().masked(&mask);
            assert_eq!(sparse, SparseGrid::from_grid(&out, &arch).unwrap());
        }
    }
}

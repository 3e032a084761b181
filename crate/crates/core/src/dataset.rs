//! Episode recording, the `.hdse` file format, corpus mixes and frame-cost
//! statistics.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "HDSE" | u32 version | u32 header length | header JSON (UTF-8)
//! frame_count × ( 6144 f32 grid | 6 f32 proprio | 4 f32 action )
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expert;
use crate::hdspace::{self, AtomicSpace, ATOMIC_CAP};
use crate::rng;
use crate::sim::{
    self, ObservationGrid, TaskId, ACTION_DIM, CONTROL_HZ, GRID_CHANNELS, GRID_LEN, GRID_SIZE, PROPRIO_DIM,
};

pub const MAGIC: [u8; 4] = *b"HDSE";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "hdse";
const FRAME_FLOATS: usize = GRID_LEN + PROPRIO_DIM + ACTION_DIM;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Naive,
    Hd,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Hd => "hd",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "naive" => Ok(Mode::Naive),
            "hd" => Ok(Mode::Hd),
            other => Err(format!("unknown mode `{other}` (expected naive or hd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub task: TaskId,
    pub mode: Mode,
    pub seed: u64,
    /// -1 for naive episodes.
    pub space_index: i32,
    pub frame_count: usize,
    pub grid_dims: [usize; 3],
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub control_hz: u32,
    pub success: bool,
    #[serde(default)]
    pub belt_speed: Option<f64>,
    /// Definition of the collection space, for provenance.
    #[serde(default)]
    pub space: Option<AtomicSpace>,
    /// `expert` or `teleop`.
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "expert".to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub grid: ObservationGrid,
    pub proprio: [f32; PROPRIO_DIM],
    pub action: [f32; ACTION_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub frames: Vec<Frame>,
}

impl EpisodeHeader {
    pub fn new(task: TaskId, mode: Mode, seed: u64, space_index: Option<usize>) -> Self {
        EpisodeHeader {
            task,
            mode,
            seed,
            space_index: space_index.map_or(-1, |i| i as i32),
            frame_count: 0,
            grid_dims: [GRID_CHANNELS, GRID_SIZE, GRID_SIZE],
            proprio_dim: PROPRIO_DIM,
            action_dim: ACTION_DIM,
            control_hz: CONTROL_HZ,
            success: false,
            belt_speed: None,
            space: None,
            source: default_source(),
        }
    }

    pub fn file_name(&self) -> String {
        match self.mode {
            Mode::Naive => format!("episode_{}_naive.{EXTENSION}", self.seed),
            Mode::Hd => format!("episode_{}_hd{}.{EXTENSION}", self.seed, self.space_index),
        }
    }

    fn check_dims(&self) -> Result<()> {
        if self.grid_dims != [GRID_CHANNELS, GRID_SIZE, GRID_SIZE]
            || self.proprio_dim != PROPRIO_DIM
            || self.action_dim != ACTION_DIM
        {
            return Err(Error::DimMismatch(format!(
                "grid {:?}, proprio {}, action {} (expected {:?}, {}, {})",
                self.grid_dims,
                self.proprio_dim,
                self.action_dim,
                [GRID_CHANNELS, GRID_SIZE, GRID_SIZE],
                PROPRIO_DIM,
                ACTION_DIM
            )));
        }
        Ok(())
    }

    /// Header-level episode invariants.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        if self.frame_count == 0 {
            return Err(Error::InvalidEpisode("no frames".into()));
        }
        if self.control_hz != CONTROL_HZ {
            return Err(Error::InvalidEpisode(format!("control rate {} Hz", self.control_hz)));
        }
        let spaces = hdspace::segment_task(self.task).len() as i32;
        match self.mode {
            Mode::Naive if self.space_index != -1 => {
                Err(Error::InvalidEpisode(format!("naive episode with space index {}", self.space_index)))
            }
            Mode::Hd if !(0..spaces).contains(&self.space_index) => Err(Error::InvalidEpisode(format!(
                "hd space index {} outside 0..{spaces} for {}",
                self.space_index, self.task
            ))),
            _ => Ok(()),
        }
    }
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.frames.len() != self.header.frame_count {
            return Err(Error::InvalidEpisode(format!(
                "header says {} frames, found {}",
                self.header.frame_count,
                self.frames.len()
            )));
        }
        if let Some(i) = self.frames.iter().position(|f| f.grid.values.len() != GRID_LEN) {
            return Err(Error::DimMismatch(format!("frame {i} grid has {} values", self.frames[i].grid.values.len())));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + self.frames.len() * FRAME_FLOATS * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for f in &self.frames {
            for v in f.grid.values.iter().chain(&f.proprio).chain(&f.action) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Episode> {
        let (header, body) = decode_header(bytes, path)?;
        header.check_dims()?;
        let frame_bytes = FRAME_FLOATS * 4;
        let mut frames = Vec::with_capacity(header.frame_count.min(body.len() / frame_bytes));
        for i in 0..header.frame_count {
            let Some(chunk) = body.get(i * frame_bytes..(i + 1) * frame_bytes) else {
                return Err(Error::Truncated { path: path.into(), what: format!("frame {i}") });
            };
            let mut floats = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
            let grid = ObservationGrid { values: floats.by_ref().take(GRID_LEN).collect() };
            let mut proprio = [0f32; PROPRIO_DIM];
            proprio.iter_mut().for_each(|p| *p = floats.next().expect("sized"));
            let mut action = [0f32; ACTION_DIM];
            action.iter_mut().for_each(|a| *a = floats.next().expect("sized"));
            frames.push(Frame { grid, proprio, action });
        }
        if body.len() != header.frame_count * frame_bytes {
            return Err(Error::InvalidEpisode(format!(
                "{}: {} trailing bytes",
                path.display(),
                body.len() - header.frame_count * frame_bytes
            )));
        }
        let ep = Episode { header, frames };
        ep.validate()?;
        Ok(ep)
    }
}

fn decode_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(EpisodeHeader, &'a [u8])> {
    let truncated = |what: &str| Error::Truncated { path: path.into(), what: what.into() };
    let magic: [u8; 4] = bytes.get(..4).ok_or_else(|| truncated("magic"))?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: magic });
    }
    let word = |at: usize, what: &str| -> Result<u32> {
        let b = bytes.get(at..at + 4).ok_or_else(|| truncated(what))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let version = word(4, "version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: VERSION });
    }
    let len = word(8, "header length")? as usize;
    let json = bytes.get(PREAMBLE..PREAMBLE + len).ok_or_else(|| truncated("header"))?;
    let header: EpisodeHeader = serde_json::from_slice(json)
        .map_err(|e| Error::BadHeader { path: path.into(), reason: e.to_string() })?;
    Ok((header, &bytes[PREAMBLE + len..]))
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_episode(episode: &Episode, path: &Path) -> Result<()> {
    write_atomic(path, &episode.encode()?)
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Episode::decode(&bytes, path)
}

/// Reads only the header, validating it against the file size.
pub fn read_header(path: &Path) -> Result<EpisodeHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = Vec::with_capacity(PREAMBLE);
    Read::by_ref(&mut f).take(PREAMBLE as u64).read_to_end(&mut pre).map_err(|e| Error::io(path, e))?;
    if pre.len() >= 4 && pre[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: pre[..4].try_into().expect("4 bytes") });
    }
    let len = if pre.len() == PREAMBLE { u32::from_le_bytes(pre[8..12].try_into().expect("4 bytes")) } else { 0 };
    let mut json = Vec::new();
    Read::by_ref(&mut f).take(len as u64).read_to_end(&mut json).map_err(|e| Error::io(path, e))?;
    pre.extend_from_slice(&json);
    let (header, _) = decode_header(&pre, path)?;
    header.validate()?;
    let size = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let expected = PREAMBLE + len as usize + header.frame_count * FRAME_FLOATS * 4;
    if size < expected {
        let whole = (size.saturating_sub(PREAMBLE + len as usize)) / (FRAME_FLOATS * 4);
        return Err(Error::Truncated { path: path.into(), what: format!("frame {whole}") });
    }
    Ok(header)
}

/// Builds an episode from an expert run.
pub fn episode_from_run(mut header: EpisodeHeader, run: &expert::ExpertRun) -> Episode {
    let frames: Vec<Frame> = run
        .frames
        .iter()
        .map(|f| Frame { grid: f.grid.clone(), proprio: f.proprio.to_f32(), action: f.action.to_array() })
        .collect();
    header.frame_count = frames.len();
    header.success = run.success;
    Episode { header, frames }
}

/// Records one scripted demonstration. Expert failures are surfaced as
/// errors and never produce an episode.
pub fn record_episode(
    task: TaskId,
    mode: Mode,
    seed: u64,
    belt_speed: Option<f64>,
    space_index: Option<usize>,
) -> Result<Episode> {
    let state = sim::init_task(task, seed, belt_speed)?;
    let mut header = EpisodeHeader::new(task, mode, seed, None);
    header.belt_speed = task.is_belt().then_some(state.belt_speed);
    let run = match mode {
        Mode::Naive => expert::expert_rollout(&state, None, task.horizon())?,
        Mode::Hd => {
            let spaces = hdspace::segment_task(task);
            let index = space_index.unwrap_or(0);
            let space = spaces.get(index).ok_or(Error::SpaceOutOfRange { task, index, count: spaces.len() })?;
            let mut r = rng::stream(seed, &[0x6864, index as u64]);
            let pose = hdspace::sample_start(space, &state, &mut r)?;
            let start = hdspace::place_start(&state, space, pose)?;
            header.space_index = index as i32;
            header.space = Some(space.clone());
            expert::expert_rollout(&start, Some(space), ATOMIC_CAP)?
        }
    };
    if !run.success {
        return Err(Error::ExpertFailure {
            reason: run.failure.clone().unwrap_or_default(),
            frames: run.frames.len(),
        });
    }
    Ok(episode_from_run(header, &run))
}

/// Episode budget in `N<k>+H<k>` notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub naive_count: usize,
    pub hd_count: usize,
}

impl fmt::Display for MixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.naive_count, self.hd_count) {
            (n, 0) => write!(f, "N{n}"),
            (0, h) => write!(f, "H{h}"),
            (n, h) => write!(f, "N{n}+H{h}"),
        }
    }
}

impl FromStr for MixSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        parse_mix(text)
    }
}

pub fn parse_mix(text: &str) -> Result<MixSpec> {
    let bad = || Error::MalformedMix(text.to_string());
    let term = |t: &str, prefix: char| -> Result<usize> {
        let digits = t.strip_prefix(prefix).ok_or_else(bad)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        digits.parse().map_err(|_| bad())
    };
    let spec = match text.split_once('+') {
        Some((n, h)) => MixSpec { naive_count: term(n, 'N')?, hd_count: term(h, 'H')? },
        None if text.starts_with('N') => MixSpec { naive_count: term(text, 'N')?, hd_count: 0 },
        None => MixSpec { naive_count: 0, hd_count: term(text, 'H')? },
    };
    if spec.naive_count + spec.hd_count == 0 {
        return Err(bad());
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskId,
    pub spec: MixSpec,
    pub seed: u64,
    /// Paths relative to the corpus directory.
    pub episodes: Vec<String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn headers(&self) -> Vec<EpisodeHeader> {
        self.episodes.iter().map(|e| e.header.clone()).collect()
    }
}

/// Headers of every `.hdse` file in `dir`, keyed by file name.
pub fn scan_corpus(dir: &Path) -> Result<BTreeMap<String, EpisodeHeader>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        out.insert(name, read_header(&path)?);
    }
    Ok(out)
}

fn pick<R: rand::Rng>(r: &mut R, pool: &[String], k: usize) -> Vec<String> {
    let mut chosen: Vec<String> = sample(r, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect();
    chosen.sort();
    chosen
}

/// Seeded selection of a mix from a single-task corpus.
pub fn select_mix(corpus: &BTreeMap<String, EpisodeHeader>, spec: MixSpec, seed: u64) -> Result<Manifest> {
    let mut tasks = corpus.values().map(|h| h.task);
    let task = tasks.next().ok_or(Error::EmptyDataset)?;
    if let Some(other) = tasks.find(|&t| t != task) {
        return Err(Error::MixedTasks(task, other));
    }
    let naive: Vec<String> =
        corpus.iter().filter(|(_, h)| h.mode == Mode::Naive).map(|(n, _)| n.clone()).collect();
    let hd_total = corpus.values().filter(|h| h.mode == Mode::Hd).count();
    if naive.len() < spec.naive_count {
        return Err(Error::InsufficientEpisodes {
            mode: "naive".into(),
            requested: spec.naive_count,
            available: naive.len(),
        });
    }
    if hd_total < spec.hd_count {
        return Err(Error::InsufficientEpisodes { mode: "hd".into(), requested: spec.hd_count, available: hd_total });
    }
    let mut episodes = pick(&mut rng::stream(seed, &[0]), &naive, spec.naive_count);
    let quotas = hdspace::hd_quotas(spec.hd_count, hdspace::segment_task(task).len());
    for (space, &quota) in quotas.iter().enumerate() {
        let pool: Vec<String> = corpus
            .iter()
            .filter(|(_, h)| h.mode == Mode::Hd && h.space_index == space as i32)
            .map(|(n, _)| n.clone())
            .collect();
        if pool.len() < quota {
            return Err(Error::InsufficientEpisodes {
                mode: format!("hd space {space}"),
                requested: quota,
                available: pool.len(),
            });
        }
        episodes.extend(pick(&mut rng::stream(seed, &[1, space as u64]), &pool, quota));
    }
    Ok(Manifest { task, spec, seed, episodes })
}

pub fn load_manifest(root: &Path, manifest: Manifest) -> Result<Dataset> {
    let episodes =
        manifest.episodes.iter().map(|name| read_episode(&root.join(name))).collect::<Result<Vec<_>>>()?;
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { root: root.to_path_buf(), manifest, episodes })
}

pub fn build_mix(dir: &Path, spec: MixSpec, seed: u64) -> Result<Dataset> {
    let manifest = select_mix(&scan_corpus(dir)?, spec, seed)?;
    load_manifest(dir, manifest)
}

/// Records `episodes` episodes on seeds `seed..seed + episodes`. Hd
/// episodes rotate through `spaces` (all spaces of the task when absent).
pub fn collect_corpus(
    task: TaskId,
    mode: Mode,
    episodes: usize,
    seed: u64,
    belt_speed: Option<f64>,
    spaces: Option<&[usize]>,
) -> Result<Vec<Episode>> {
    let all: Vec<usize> = (0..hdspace::segment_task(task).len()).collect();
    let spaces = spaces.unwrap_or(&all);
    if mode == Mode::Hd && spaces.is_empty() {
        return Err(Error::SpaceOutOfRange { task, index: 0, count: all.len() });
    }
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let space = (mode == Mode::Hd).then(|| spaces[i % spaces.len()]);
            record_episode(task, mode, seed + i as u64, belt_speed, space)
        })
        .collect()
}

/// Applies [`select_mix`] to episodes held in memory.
pub fn select_in_memory<'a>(episodes: &'a [Episode], spec: MixSpec, seed: u64) -> Result<(Manifest, Vec<&'a Episode>)> {
    let by_name: BTreeMap<String, &Episode> = episodes.iter().map(|e| (e.header.file_name(), e)).collect();
    let headers = by_name.iter().map(|(n, e)| (n.clone(), e.header.clone())).collect();
    let manifest = select_mix(&headers, spec, seed)?;
    let chosen = manifest.episodes.iter().map(|n| by_name[n]).collect();
    Ok((manifest, chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub episodes: usize,
    pub mean: f64,
    pub median: f64,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub naive: Option<ModeStats>,
    pub hd: Option<ModeStats>,
}

fn mode_stats(mut counts: Vec<usize>) -> Option<ModeStats> {
    if counts.is_empty() {
        return None;
    }
    counts.sort_unstable();
    let n = counts.len();
    let total: usize = counts.iter().sum();
    let median = if n % 2 == 1 { counts[n / 2] as f64 } else { (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0 };
    Some(ModeStats { episodes: n, mean: total as f64 / n as f64, median, total })
}

pub fn frame_stats(headers: &[EpisodeHeader]) -> Result<FrameStats> {
    if headers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = |m: Mode| headers.iter().filter(|h| h.mode == m).map(|h| h.frame_count).collect();
    Ok(FrameStats { naive: mode_stats(counts(Mode::Naive)), hd: mode_stats(counts(Mode::Hd)) })
}

//! Closed-loop chunked rollouts, aggregate metrics, failure taxonomy and
//! comparison reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameStats;
use crate::error::{Error, Result};
use crate::expert;
use crate::policy::{forward_sparse, sample_mask, MaskConfig, PolicyParams, SparseGrid};
use crate::rng;
use crate::sim::{self, Action, Grip, ObservationGrid, TaskId, WorkspaceState, GRID_CHANNELS, GRID_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureClass {
    CoGrasp,
    AngleMiss,
    EmptyGrasp,
    TrackLoss,
    Timeout,
}

impl FailureClass {
    pub const ALL: [FailureClass; 5] = [
        FailureClass::CoGrasp,
        FailureClass::AngleMiss,
        FailureClass::EmptyGrasp,
        FailureClass::TrackLoss,
        FailureClass::Timeout,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FailureClass::CoGrasp => "CO_GRASP",
            FailureClass::AngleMiss => "ANGLE_MISS",
            FailureClass::EmptyGrasp => "EMPTY_GRASP",
            FailureClass::TrackLoss => "TRACK_LOSS",
            FailureClass::Timeout => "TIMEOUT",
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sticky event flags accumulated over one rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEvents {
    pub success: bool,
    pub unintended_attach: bool,
    pub angle_miss: bool,
    pub empty_close: bool,
    pub close_fired: bool,
    /// The belt target left the belt while no close had yet fired.
    pub target_exited_before_close: bool,
}

impl TrajectoryEvents {
    pub fn record(&mut self, state: &WorkspaceState, ev: &sim::StepEvents) {
        self.unintended_attach |= ev.unintended_attach;
        self.angle_miss |= ev.angle_miss;
        self.empty_close |= ev.empty_close;
        if !self.close_fired && state.target().is_some_and(|t| t.exited) {
            self.target_exited_before_close = true;
        }
        self.close_fired |= ev.close_fired;
    }
}

pub fn classify_failure(events: &TrajectoryEvents) -> Result<FailureClass> {
    if events.success {
        return Err(Error::ClassifySuccess);
    }
    Ok(if events.unintended_attach {
        FailureClass::CoGrasp
    } else if events.angle_miss {
        FailureClass::AngleMiss
    } else if events.empty_close {
        FailureClass::EmptyGrasp
    } else if events.target_exited_before_close {
        FailureClass::TrackLoss
    } else {
        FailureClass::Timeout
    })
}

/// Anything that maps an observation to a chunk of actions.
pub trait ChunkPolicy: Sync {
    /// Expected observation layout.
    fn grid_dims(&self) -> [usize; 3] {
        [GRID_CHANNELS, GRID_SIZE, GRID_SIZE]
    }

    fn act(&self, state: &WorkspaceState, grid: &ObservationGrid) -> Result<Vec<Action>>;
}

pub struct NeuralPolicy {
    pub params: PolicyParams,
}

impl ChunkPolicy for NeuralPolicy {
    fn grid_dims(&self) -> [usize; 3] {
        self.params.arch.grid_dims
    }

    fn act(&self, state: &WorkspaceState, grid: &ObservationGrid) -> Result<Vec<Action>> {
        let sparse = SparseGrid::from_grid(grid, &self.params.arch)?;
        let chunk = forward_sparse(&self.params, &sparse, &sim::proprio(state).to_f32())?;
        Ok((0..chunk.k).map(|i| chunk.action(i)).collect())
    }
}

/// Wraps the scripted expert as a chunk policy by simulating it forward.
pub struct ExpertAdapter {
    pub chunk: usize,
}

impl Default for ExpertAdapter {
    fn default() -> Self {
        ExpertAdapter { chunk: crate::policy::DEFAULT_CHUNK }
    }
}

impl ChunkPolicy for ExpertAdapter {
    fn act(&self, state: &WorkspaceState, _grid: &ObservationGrid) -> Result<Vec<Action>> {
        let mut s = state.clone();
        let mut out = Vec::with_capacity(self.chunk);
        for _ in 0..self.chunk {
            match expert::expert_action(&s, None) {
                Ok(a) => {
                    s = sim::step(&s, &a);
                    out.push(a);
                }
                Err(Error::ScriptExhausted { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if out.is_empty() {
            out.push(Action::new(0.0, 0.0, 0.0, Grip::Hold));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub seed: u64,
    pub success: bool,
    pub completed: usize,
    pub steps_used: usize,
    pub failure: Option<FailureClass>,
    pub events: TrajectoryEvents,
    pub final_state_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub belt_speed: Option<f64>,
    /// Area fraction of a fresh occlusion mask applied to every observation.
    pub occlusion: Option<f64>,
    /// Step cap; the task horizon when absent.
    pub horizon: Option<usize>,
}

impl EvalConfig {
    pub fn with_belt_speed(belt_speed: Option<f64>) -> Self {
        EvalConfig { belt_speed, occlusion: None, horizon: None }
    }
}

fn target_lost(task: TaskId, state: &WorkspaceState) -> bool {
    task.is_belt() && state.target().is_some_and(|t| t.exited)
}

pub fn rollout(policy: &dyn ChunkPolicy, task: TaskId, seed: u64, cfg: &EvalConfig) -> Result<RolloutResult> {
    let expected = [GRID_CHANNELS, GRID_SIZE, GRID_SIZE];
    if policy.grid_dims() != expected {
        return Err(Error::DimMismatch(format!(
            "policy expects grid {:?}, task provides {:?}",
            policy.grid_dims(),
            expected
        )));
    }
    let occlusion = cfg.occlusion.map(MaskConfig::occlusion);
    if let Some(m) = &occlusion {
        m.validate()?;
    }
    let mut mask_rng = rng::stream(seed, &[0x6f63_636c]);
    let horizon = cfg.horizon.unwrap_or(task.horizon());
    let mut state = sim::init_task(task, seed, cfg.belt_speed)?;
    let mut events = TrajectoryEvents::default();
    let mut steps = 0;
    'outer: while steps < horizon {
        let mut grid = sim::rasterize(&state);
        if let Some(m) = &occlusion {
            if let Some(mask) = sample_mask(m, &mut mask_rng) {
                grid = mask.apply(&grid);
            }
        }
        let actions = policy.act(&state, &grid)?;
        if actions.is_empty() {
            return Err(Error::InvalidArch("policy returned an empty chunk".into()));
        }
        for a in &actions {
            let (next, ev) = sim::step_with_events(&state, a);
            state = next;
            events.record(&state, &ev);
            steps += 1;
            if sim::subtask_status(&state).all_done() {
                events.success = true;
                break 'outer;
            }
            if steps >= horizon || target_lost(task, &state) {
                break 'outer;
            }
        }
    }
    let status = sim::subtask_status(&state);
    let failure = if events.success { None } else { Some(classify_failure(&events)?) };
    Ok(RolloutResult {
        seed,
        success: events.success,
        completed: status.completed.min(task.max_completed()),
        steps_used: steps,
        failure,
        events,
        final_state_hash: sim::state_hash(&state),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub sr: f64,
    pub mean_completed: f64,
    pub failures: BTreeMap<String, usize>,
    pub mean_steps: f64,
}

impl Metrics {
    pub fn from_results(results: &[RolloutResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::NoRollouts);
        }
        let n = results.len();
        let mut failures: BTreeMap<String, usize> = FailureClass::ALL.iter().map(|c| (c.to_string(), 0)).collect();
        for r in results {
            if let Some(c) = r.failure {
                *failures.get_mut(c.as_str()).expect("all classes present") += 1;
            }
        }
        let successes = results.iter().filter(|r| r.success).count();
        Ok(Metrics {
            n,
            sr: successes as f64 / n as f64,
            mean_completed: results.iter().map(|r| r.completed as f64).sum::<f64>() / n as f64,
            failures,
            mean_steps: results.iter().map(|r| r.steps_used as f64).sum::<f64>() / n as f64,
        })
    }

    pub fn successes(&self) -> usize {
        (self.sr * self.n as f64).round() as usize
    }

    pub fn failure_total(&self) -> usize {
        self.failures.values().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Runs `n` rollouts on seeds `seed..seed + n`.
pub fn evaluate_detailed(
    policy: &dyn ChunkPolicy,
    task: TaskId,
    n: usize,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<(Metrics, Vec<RolloutResult>)> {
    if n == 0 {
        return Err(Error::NoRollouts);
    }
    let results: Vec<RolloutResult> =
        (0..n as u64).into_par_iter().map(|i| rollout(policy, task, seed + i, cfg)).collect::<Result<_>>()?;
    Ok((Metrics::from_results(&results)?, results))
}

pub fn evaluate(policy: &dyn ChunkPolicy, task: TaskId, n: usize, seed: u64, cfg: &EvalConfig) -> Result<Metrics> {
    evaluate_detailed(policy, task, n, seed, cfg).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub sr: Option<f64>,
    pub mean_completed: Option<f64>,
    pub mean_frames: Option<f64>,
}

/// Parses a metrics or frame-stats JSON file into report rows.
pub fn report_rows(label: &str, text: &str, path: &Path) -> Result<Vec<ReportRow>> {
    let malformed = |reason: String| Error::MalformedReport { path: path.into(), reason };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if value.get("sr").is_some() {
        let m: Metrics = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        return Ok(vec![ReportRow {
            label: label.into(),
            sr: Some(m.sr),
            mean_completed: Some(m.mean_completed),
            mean_frames: None,
        }]);
    }
    if value.get("naive").is_some() || value.get("hd").is_some() {
        let s: FrameStats = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let rows: Vec<ReportRow> = [("naive", s.naive), ("hd", s.hd)]
            .into_iter()
            .filter_map(|(mode, st)| {
                st.map(|st| ReportRow {
                    label: format!("{label}/{mode}"),
                    sr: None,
                    mean_completed: None,
                    mean_frames: Some(st.mean),
                })
            })
            .collect();
        if rows.is_empty() {
            return Err(malformed("frame stats without any mode".into()));
        }
        return Ok(rows);
    }
    Err(malformed("neither metrics nor frame stats".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub csv: String,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn delta(v: Option<f64>, base: Option<f64>) -> String {
    match (v, base) {
        (Some(v), Some(b)) => format!("{:+.2}", v - b),
        _ => "-".into(),
    }
}

/// Table with one row per label; deltas are against the first row.
pub fn compare_report(rows: &[ReportRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::MalformedReport { path: "".into(), reason: "no inputs".into() });
    }
    let with_delta = rows.len() > 1;
    let base = &rows[0];
    let mut head = vec!["label", "sr", "mean_completed", "mean_frames"];
    if with_delta {
        head.extend(["delta_sr", "delta_mean_completed", "delta_mean_frames"]);
    }
    let mut md = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
    let mut csv = format!("{}\n", head.join(","));
    for r in rows {
        let mut cells = vec![r.label.clone(), cell(r.sr), cell(r.mean_completed), cell(r.mean_frames)];
        if with_delta {
            cells.push(delta(r.sr, base.sr));
            cells.push(delta(r.mean_completed, base.mean_completed));
            cells.push(delta(r.mean_frames, base.mean_frames));
        }
        md.push_str(&format!("| {} |\n", cells.join(" | ")));
        csv.push_str(&format!("{}\n", cells.join(",")));
    }
    Ok(Report { markdown: md, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ArchConfig};

    #[test]
    fn expert_adapter_succeeds_everywhere() {
        for task in TaskId::ALL {
            let speed = task.is_belt().then_some(0.16);
            let m = evaluate(&ExpertAdapter::default(), task, 10, 0, &EvalConfig::with_belt_speed(speed)).unwrap();
            assert_eq!(m.sr, 1.0, "{task}");
            assert_eq!(m.mean_completed, task.max_completed() as f64);
        }
    }

    #[test]
    fn random_params_fail_with_class() {
        let p = NeuralPolicy { params: init_params(ArchConfig::default(), 5).unwrap() };
        let r = rollout(&p, TaskId::Teacup, 3, &EvalConfig::with_belt_speed(None)).unwrap();
        assert!(!r.success);
        assert!(r.failure.is_some());
        assert!(r.steps_used <= TaskId::Teacup.horizon());
    }

    #[test]
    fn precedence() {
        let mut e = TrajectoryEvents { empty_close: true, target_exited_before_close: true, ..Default::default() };
        assert_eq!(classify_failure(&e).unwrap(), FailureClass::EmptyGrasp);
        e.angle_miss = true;
        assert_eq!(classify_failure(&e).unwrap(), FailureClass::AngleMiss);
        e.unintended_attach = true;
        assert_eq!(classify_failure(&e).unwrap(), FailureClass::CoGrasp);
        assert_eq!(classify_failure(&TrajectoryEvents::default()).unwrap(), FailureClass::Timeout);
        e.success = true;
        assert!(matches!(classify_failure(&e), Err(Error::ClassifySuccess)));
    }

    #[test]
    fn report_deltas() {
        let row = |l: &str, sr, mc| ReportRow { label: l.into(), sr: Some(sr), mean_completed: Some(mc), mean_frames: None };
        let r = compare_report(&[row("N50", 0.40, 2.84), row("N25+H25", 0.52, 3.16)]).unwrap();
        let last = r.csv.lines().last().unwrap();
        assert!(last.contains("+0.12"), "{last}");
        assert!(last.contains("+0.32"), "{last}");
        let single = compare_report(&[row("N50", 0.4, 2.0)]).unwrap();
        assert!(!single.csv.contains("delta"));
    }
}

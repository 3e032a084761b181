//! Self-contained property suites shared by the command line and the
//! acceptance target. Each suite returns one line per check.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::{self, Episode, Mode};
use crate::error::Result;
use crate::evaluator::{self, EvalConfig, NeuralPolicy};
use crate::hdspace::{self, apply_precondition, resolve_region, sample_start, segment_task, start_collides};
use crate::policy::{grad_check, init_params, ArchConfig, ProbeBatch};
use crate::rng;
use crate::sim::{self, Pose2, TaskId};
use crate::trainer::{self, CheckpointHeader, TrainConfig, TrainSet};

pub const SAMPLER_SAMPLES: usize = 10_000;
pub const SAMPLER_BINS: usize = 4;
pub const SAMPLER_ALPHA: f64 = 0.01;
pub const OVERLAP_TRIALS: usize = 1000;
pub const OVERLAP_SEEDS: [u64; 3] = [5, 6, 7];
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_COORDS: usize = 400;
const QUAD: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Sampler,
    Overlap,
    Grad,
    Format,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Sampler, Suite::Overlap, Suite::Grad, Suite::Format, Suite::Determinism];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Sampler => "sampler",
            Suite::Overlap => "overlap",
            Suite::Grad => "grad",
            Suite::Format => "format",
            Suite::Determinism => "determinism",
        }
    }

    pub fn parse(text: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), passed, detail: detail.into() }
}

pub fn run(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Sampler => sampler()?,
        Suite::Overlap => overlap()?,
        Suite::Grad => grad()?,
        Suite::Format => format()?,
        Suite::Determinism => determinism()?,
    };
    Ok(SuiteReport { suite, checks })
}

/// Chi-square statistic, degrees of freedom and p-value of `observed`
/// against `expected` over bins with positive expectation.
pub fn chi_square(observed: &[usize], expected: &[f64]) -> (f64, usize, f64) {
    let mut stat = 0.0;
    let mut bins = 0;
    for (&o, &e) in observed.iter().zip(expected) {
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
            bins += 1;
        } else if o > 0 {
            return (f64::INFINITY, bins.max(2) - 1, 0.0);
        }
    }
    let dof = bins.saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(stat);
    (stat, dof, p)
}

/// Observed and expected 4×4 position bins for one space. Expected counts
/// are proportional to the admissible area of each bin, integrated on a
/// dense midpoint lattice.
pub fn sampler_bins(task: TaskId, space_index: usize, seed: u64, n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let state = sim::init_task(task, seed, None)?;
    let space = &segment_task(task)[space_index];
    let laid_out = apply_precondition(&state, space)?;
    let center = resolve_region(space, &state)?;
    let hw = space.start_region.half_width;
    let bin_of = |x: f64, y: f64| {
        let b = |v: f64, c: f64| (((v - (c - hw)) / (2.0 * hw) * SAMPLER_BINS as f64) as usize).min(SAMPLER_BINS - 1);
        b(y, center.y) * SAMPLER_BINS + b(x, center.x)
    };
    let mut area = vec![0.0; SAMPLER_BINS * SAMPLER_BINS];
    for i in 0..QUAD {
        for j in 0..QUAD {
            let x = center.x - hw + (j as f64 + 0.5) / QUAD as f64 * 2.0 * hw;
            let y = center.y - hw + (i as f64 + 0.5) / QUAD as f64 * 2.0 * hw;
            let pose = Pose2::new(x, y, center.theta);
            if pose.in_workspace() && !start_collides(space, &laid_out, &pose) {
                area[bin_of(x, y)] += 1.0;
            }
        }
    }
    let total: f64 = area.iter().sum();
    let expected = area.iter().map(|a| a / total * n as f64).collect();
    let mut observed = vec![0; SAMPLER_BINS * SAMPLER_BINS];
    let task_index = TaskId::ALL.iter().position(|&t| t == task).expect("known task") as u64;
    let mut r = rng::stream(seed, &[0x6368_6932, task_index, space_index as u64]);
    for _ in 0..n {
        let p = sample_start(space, &state, &mut r)?;
        observed[bin_of(p.x, p.y)] += 1;
    }
    Ok((observed, expected))
}

fn sampler() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for task in TaskId::ALL {
        for space in segment_task(task) {
            let (obs, exp) = sampler_bins(task, space.index, 1, SAMPLER_SAMPLES)?;
            let (stat, dof, p) = chi_square(&obs, &exp);
            out.push(check(
                format!("{task} space {}", space.index),
                p > SAMPLER_ALPHA,
                format!("chi2 {stat:.2} dof {dof} p {p:.4}"),
            ));
        }
    }
    Ok(out)
}

fn overlap() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for task in TaskId::ALL {
        for seed in OVERLAP_SEEDS {
            let report = hdspace::verify_overlap(task, OVERLAP_TRIALS, seed)?;
            let detail = if report.boundaries.is_empty() {
                "single space".to_string()
            } else {
                report
                    .boundaries
                    .iter()
                    .map(|b| format!("{}->{} {:.3} ({} expert failures)", b.from, b.to, b.fraction, b.expert_failures))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            out.push(check(format!("{task} seed {seed}"), report.passes(), detail));
        }
    }
    Ok(out)
}

fn grad() -> Result<Vec<Check>> {
    let params = init_params(ArchConfig::default(), 0)?;
    let probe = ProbeBatch::new(&params, 4, 0)?;
    let g = grad_check(&params, &probe.samples(), GRAD_STEP, GRAD_COORDS, 0)?;
    Ok(vec![check(
        "central differences",
        g.max_rel_error < GRAD_TOL,
        format!("max relative error {:.3e} over {} coordinates", g.max_rel_error, g.coordinates),
    )])
}

fn probe_corpus(task: TaskId) -> Result<Vec<Episode>> {
    let speed = task.is_belt().then_some(0.16);
    let mut eps = dataset::collect_corpus(task, Mode::Naive, 2, 40, speed, None)?;
    eps.extend(dataset::collect_corpus(task, Mode::Hd, segment_task(task).len(), 60, speed, None)?);
    Ok(eps)
}

fn format() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let tmp = Path::new("");
    for task in TaskId::ALL {
        let eps = probe_corpus(task)?;
        let identical = eps.iter().all(|e| {
            e.encode().and_then(|b| Episode::decode(&b, tmp).and_then(|d| d.encode()).map(|b2| b == b2)).unwrap_or(false)
        });
        out.push(check(format!("episode round-trip {task}"), identical, format!("{} episodes", eps.len())));
    }
    let params = init_params(ArchConfig::default(), 3)?;
    let header = CheckpointHeader::for_params(&params, None, None);
    let bytes = trainer::encode_checkpoint(&params, &header);
    let (back, back_header) = trainer::decode_checkpoint(&bytes, tmp)?;
    let same = back.values.iter().zip(&params.values).all(|(a, b)| a.to_bits() == b.to_bits())
        && back_header == header
        && trainer::encode_checkpoint(&back, &back_header) == bytes;
    out.push(check("checkpoint round-trip", same, format!("{} parameters", params.values.len())));
    let truncated = trainer::decode_checkpoint(&bytes[..bytes.len() - 3], tmp).is_err();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let rejected = truncated && trainer::decode_checkpoint(&bad, tmp).is_err();
    out.push(check("checkpoint corruption", rejected, "truncated blob and bad magic rejected"));
    Ok(out)
}

fn determinism() -> Result<Vec<Check>> {
    let task = TaskId::Teacup;
    let corpus = || -> Result<Vec<Vec<u8>>> { probe_corpus(task)?.iter().map(|e| e.encode()).collect() };
    let (a, b) = (corpus()?, corpus()?);
    let mut out = vec![check("collect", a == b, format!("{} episodes byte-identical", a.len()))];

    let eps = probe_corpus(task)?;
    let cfg = TrainConfig { steps: 200, batch: 16, ..TrainConfig::default() };
    let train_bytes = || -> Result<Vec<u8>> {
        let set = TrainSet::new(&eps, &cfg.arch)?;
        let run = trainer::train_set(&set, &cfg)?;
        let header = CheckpointHeader::for_params(&run.params, Some(cfg.digest()), None);
        Ok(trainer::encode_checkpoint(&run.params, &header))
    };
    let (c1, c2) = (train_bytes()?, train_bytes()?);
    out.push(check("train", c1 == c2, format!("{} checkpoint bytes identical", c1.len())));

    let (params, _) = trainer::decode_checkpoint(&c1, Path::new(""))?;
    let policy = NeuralPolicy { params };
    let eval = |occlusion| -> Result<String> {
        let cfg = EvalConfig { occlusion, ..EvalConfig::with_belt_speed(None) };
        Ok(evaluator::evaluate(&policy, task, 20, 100, &cfg)?.to_json())
    };
    let (m1, m2) = (eval(None)?, eval(None)?);
    out.push(check("eval", m1 == m2, "metrics JSON identical"));
    let (o1, o2) = (eval(Some(0.25))?, eval(Some(0.25))?);
    out.push(check("eval with occlusion", o1 == o2, "metrics JSON identical"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_of_exact_fit_is_zero() {
        let (s, dof, p) = chi_square(&[25, 25, 25, 25], &[25.0; 4]);
        assert_eq!((s, dof), (0.0, 3));
        assert!((p - 1.0).abs() < 1e-12);
        let (s, _, p) = chi_square(&[1, 0], &[0.0, 1.0]);
        assert!(s.is_infinite() && p == 0.0);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("nope"), None);
    }
}

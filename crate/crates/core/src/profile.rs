//! Run timing: named timers around assembly operators and linear solves, and
//! the breakdown report built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::fvm::Krylov;
use crate::linsolve::{SolveReport, StageTimes};

pub const ASSEMBLY: &str = "assembly";
pub const ASSEMBLY_DIV: &str = "assembly.div";
pub const ASSEMBLY_GRAD: &str = "assembly.grad";
pub const ASSEMBLY_LAP: &str = "assembly.lap";
pub const SOLVE_CG: &str = "solve.cg";
pub const SOLVE_BICGSTAB: &str = "solve.bicgstab";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimerStat {
    pub seconds: f64,
    pub calls: u64,
}

/// Accumulated timings of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profiler {
    pub timers: BTreeMap<String, TimerStat>,
    pub cg_stages: StageTimes,
    pub cg_smvp_calls: u64,
    pub bicgstab_stages: StageTimes,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn time<T>(&mut self, key: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(key, start.elapsed().as_secs_f64());
        out
    }

    pub fn add(&mut self, key: &str, seconds: f64) {
        let stat = self.timers.entry(key.to_string()).or_default();
        stat.seconds += seconds;
        stat.calls += 1;
    }

    pub fn record_solve(&mut self, method: Krylov, report: &SolveReport) {
        match method {
            Krylov::Cg => {
                self.add(SOLVE_CG, report.wall_time);
                self.cg_stages.accumulate(&report.stage_times);
                self.cg_smvp_calls += report.smvp_calls as u64;
            }
            Krylov::BiCgStab => {
                self.add(SOLVE_BICGSTAB, report.wall_time);
                self.bicgstab_stages.accumulate(&report.stage_times);
            }
        }
    }

    pub fn seconds(&self, key: &str) -> f64 {
        self.timers.get(key).map_or(0.0, |s| s.seconds)
    }

    pub fn calls(&self, key: &str) -> u64 {
        self.timers.get(key).map_or(0, |s| s.calls)
    }
}

/// What a run writes to `profile.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileData {
    pub case: String,
    pub workers: usize,
    pub cells: usize,
    /// Wall time of the whole run in seconds, including mesh and case input.
    pub total_time: f64,
    pub profiler: Profiler,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("profile has no stage timings; rerun with solvers.record_stages = true")]
    MissingStages,
    #[error("profile has zero total run time")]
    EmptyRun,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub name: String,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorRow {
    pub name: String,
    pub calls: u64,
    pub seconds_per_call: f64,
    /// Per-call time divided by the per-call SMVP time.
    pub relative_to_smvp: f64,
}

/// The three breakdown tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub case: String,
    pub workers: usize,
    pub cells: usize,
    /// Share of total run time: CG, BiCGStab, assembly, other.
    pub run: Vec<Row>,
    /// Share of CG time: smvp, daxpy, dot, reduction, precond, other.
    pub cg: Vec<Row>,
    /// Assembly operator cost normalised to one SMVP.
    pub operators: Vec<OperatorRow>,
}

fn rows(parts: &[(&str, f64)], total: f64) -> Vec<Row> {
    parts
        .iter()
        .map(|&(name, seconds)| Row { name: name.to_string(), seconds, percent: 100.0 * seconds / total })
        .collect()
}

impl ProfileReport {
    pub fn from_data(data: &ProfileData) -> Result<Self, ProfileError> {
        let p = &data.profiler;
        if !(data.total_time > 0.0) {
            return Err(ProfileError::EmptyRun);
        }
        if p.cg_smvp_calls == 0 || p.cg_stages.total() <= 0.0 {
            return Err(ProfileError::MissingStages);
        }
        let cg = p.seconds(SOLVE_CG);
        let bicg = p.seconds(SOLVE_BICGSTAB);
        let assembly = p.seconds(ASSEMBLY);
        let total = data.total_time.max(cg + bicg + assembly);
        let other = total - cg - bicg - assembly;
        let run = rows(&[("CG", cg), ("BiCGStab", bicg), ("assembly", assembly), ("other", other)], total);

        let s = &p.cg_stages;
        let cg_total = cg.max(s.total());
        let cg_other = cg_total - (s.smvp + s.daxpy + s.dot + s.reduction + s.precond);
        let cg_rows = rows(
            &[
                ("smvp", s.smvp),
                ("daxpy", s.daxpy),
                ("dot", s.dot),
                ("reduction", s.reduction),
                ("precond", s.precond),
                ("other", cg_other),
            ],
            cg_total,
        );

        let smvp_per_call = s.smvp / p.cg_smvp_calls as f64;
        let operators = [("div", ASSEMBLY_DIV), ("grad", ASSEMBLY_GRAD), ("lap", ASSEMBLY_LAP)]
            .iter()
            .map(|&(name, key)| {
                let calls = p.calls(key);
                let per_call = if calls > 0 { p.seconds(key) / calls as f64 } else { 0.0 };
                OperatorRow {
                    name: name.to_string(),
                    calls,
                    seconds_per_call: per_call,
                    relative_to_smvp: if smvp_per_call > 0.0 { per_call / smvp_per_call } else { 0.0 },
                }
            })
            .collect();
        Ok(Self { case: data.case.clone(), workers: data.workers, cells: data.cells, run, cg: cg_rows, operators })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "case {} ({} cells, {} workers)", self.case, self.cells, self.workers);
        let _ = writeln!(out, "\n(a) share of total run time");
        for r in &self.run {
            let _ = writeln!(out, "  {:<10} {:>12.6} s {:>7.2} %", r.name, r.seconds, r.percent);
        }
        let _ = writeln!(out, "\n(b) share of CG solver time");
        for r in &self.cg {
            let _ = writeln!(out, "  {:<10} {:>12.6} s {:>7.2} %", r.name, r.seconds, r.percent);
        }
        let _ = writeln!(out, "\n(c) assembly operators, per call, relative to one SMVP");
        for r in &self.operators {
            let _ = writeln!(
                out,
                "  {:<10} {:>8} calls {:>12.3e} s/call {:>9.2} x SMVP",
                r.name, r.calls, r.seconds_per_call, r.relative_to_smvp
            );
        }
        out
    }
}

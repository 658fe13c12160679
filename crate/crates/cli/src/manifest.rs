//! Run manifest written next to every output.

use impulse_core::grid::{Grid, TimeMesh};
use impulse_core::problem::Setup;
use impulse_core::solver::{ResidualStats, SolveReport, SolveSettings};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct ProblemSource {
    pub origin: String,
    pub sha256: String,
}

impl ProblemSource {
    pub fn new(origin: String, bytes: &[u8]) -> Self {
        ProblemSource {
            origin,
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub max_sweeps_used: Option<usize>,
    pub note: Option<String>,
    pub residual: Option<ResidualStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub problem_name: String,
    pub problem: ProblemSource,
    pub scheme: String,
    pub settings: SolveSettings,
    pub grid: Grid,
    pub mesh: TimeMesh,
    pub threads: usize,
    pub solve_time_s: f64,
    pub total_time_s: f64,
    pub convergence: Convergence,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        scheme: &str,
        setup: &Setup,
        problem: ProblemSource,
        threads: usize,
        report: &SolveReport,
        total_time_s: f64,
    ) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            problem_name: setup.spec.name().into(),
            problem,
            scheme: scheme.into(),
            settings: setup.settings,
            grid: setup.grid.clone(),
            mesh: setup.mesh,
            threads,
            solve_time_s: report.wall_time_s,
            total_time_s,
            convergence: Convergence {
                converged: report.converged,
                iterations: report.iterations,
                converged_at: report.converged_at,
                max_sweeps_used: report.sweeps.iter().copied().max(),
                note: report.note.clone(),
                residual: report.residual,
            },
            outputs: Vec::new(),
        }
    }

    pub fn with_outputs(mut self, outputs: &[&str]) -> Self {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_bytes() {
        let a = ProblemSource::new("a".into(), b"T = 1\n");
        let b = ProblemSource::new("b".into(), b"T = 1\n");
        let c = ProblemSource::new("a".into(), b"T = 1 \n");
        assert_eq!(a.sha256, b.sha256);
        assert_ne!(a.sha256, c.sha256);
        assert_eq!(
            ProblemSource::new(String::new(), b"").sha256,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}

//! Run reports and their on-disk form.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    /// Target-test accuracy after the stage, in percent.
    pub accuracy: Option<f64>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Accuracy after each epoch when per-epoch evaluation is enabled.
    pub epoch_accuracies: Vec<f64>,
    pub sessions: usize,
    pub queries: usize,
    /// Excluded from `report.json` so repeated runs compare equal; see `timings.json`.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatSummary {
    pub batches: usize,
    pub mean_initial_kl: f64,
    pub mean_final_kl: f64,
    pub strictly_decreased: usize,
    pub never_increased: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub ablation: Option<String>,
    pub seed: u64,
    pub num_classes: usize,
    pub source_only_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub stages: Vec<StageReport>,
    pub sessions: usize,
    pub queries: usize,
    pub dat: Option<DatSummary>,
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    /// Membership-inference results keyed by victim.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mia: Option<serde_json::Value>,
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

#[derive(Serialize)]
struct Timings<'a> {
    total_ms: u128,
    stages: Vec<(&'a str, u128)>,
}

impl RunReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Writes `report.json`, `timings.json` and one `losses_<stage>.csv` per stage.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        let timings = Timings {
            total_ms: self.wall_clock_ms,
            stages: self.stages.iter().map(|s| (s.name.as_str(), s.wall_clock_ms)).collect(),
        };
        fs::write(dir.join("timings.json"), serde_json::to_vec_pretty(&timings)?)?;
        for stage in &self.stages {
            let mut csv = fs::File::create(dir.join(format!("losses_{}.csv", stage.name)))?;
            writeln!(csv, "epoch,loss")?;
            for (epoch, loss) in stage.losses.iter().enumerate() {
                writeln!(csv, "{},{loss}", epoch + 1)?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Plain-text summary for terminals.
    pub fn summary(&self) -> String {
        let mut out = format!("strategy {}", self.strategy);
        if let Some(a) = &self.ablation {
            out.push_str(&format!(" ({a})"));
        }
        out.push_str(&format!(", seed {}, {} classes\n", self.seed, self.num_classes));
        if let Some(acc) = self.source_only_accuracy {
            out.push_str(&format!("  source only        {acc:6.2}%\n"));
        }
        for s in &self.stages {
            let acc = s.accuracy.map(|a| format!("{a:6.2}%")).unwrap_or_else(|| "     -".into());
            out.push_str(&format!("  {:<18} {acc}  ({} sessions, {} queries)\n", s.name, s.sessions, s.queries));
        }
        if let Some(d) = &self.dat {
            out.push_str(&format!(
                "  DAT feature KL     {:.5} -> {:.5} over {} batches\n",
                d.mean_initial_kl, d.mean_final_kl, d.batches
            ));
        }
        if let Some(acc) = self.final_accuracy {
            out.push_str(&format!("  final              {acc:6.2}%\n"));
        }
        out.push_str(&format!("  oracle: {} sessions, {} queried samples\n", self.sessions, self.queries));
        if let Some(mia) = &self.mia {
            let field = |k: &str| mia.get(k).and_then(serde_json::Value::as_f64);
            match (field("source_mean"), field("sfuda_init_mean")) {
                (Some(src), Some(init)) => out.push_str(&format!(
                    "  attack judgement   {src:6.2}% on source models, {init:6.2}% on the initialized model\n"
                )),
                _ => out.push_str(&format!("  membership inference: {mia}\n")),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_without_timings() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            strategy: "sfuda".into(),
            seed: 3,
            stages: vec![StageReport {
                name: "init".into(),
                accuracy: Some(50.0),
                losses: vec![1.0, 0.5],
                wall_clock_ms: 77,
                ..Default::default()
            }],
            wall_clock_ms: 99,
            ..Default::default()
        };
        report.write(dir.path()).unwrap();
        let back = RunReport::read(dir.path().join("report.json")).unwrap();
        assert_eq!(back.stages[0].losses, vec![1.0, 0.5]);
        assert_eq!(back.wall_clock_ms, 0);
        let csv = fs::read_to_string(dir.path().join("losses_init.csv")).unwrap();
        assert_eq!(csv, "epoch,loss\n1,1\n2,0.5\n");
        assert!(fs::read_to_string(dir.path().join("timings.json")).unwrap().contains("77"));
    }
}

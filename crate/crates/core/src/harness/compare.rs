//! Cross-file comparison of metrics CSVs.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::read_metrics;
use crate::harness::runner::{summarize, PolicySummary, SummaryTable};
use crate::scheduler::Policy;

/// Expected accuracy ranking, best first.
pub const ACCURACY_ORDER: [Policy; 4] = [Policy::AllIn, Policy::Online, Policy::Gs, Policy::Aaba];

#[derive(Debug, Clone)]
pub struct FileSummary {
    pub path: PathBuf,
    pub policies: Vec<PolicySummary>,
    /// Whether mean final accuracy follows [`ACCURACY_ORDER`] among the
    /// policies present.
    pub ordering_holds: bool,
}

/// A policy's final-metric difference between a file and the first file.
#[derive(Debug, Clone, PartialEq)]
pub struct Difference {
    pub path: PathBuf,
    pub policy: Policy,
    pub loss_delta: f64,
    pub accuracy_delta: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub files: Vec<FileSummary>,
    pub differences: Vec<Difference>,
}

impl ComparisonReport {
    pub fn ordering_holds(&self) -> bool {
        self.files.iter().all(|f| f.ordering_holds)
    }
}

fn ordering_holds(policies: &[PolicySummary]) -> bool {
    let ranked: Vec<f64> = ACCURACY_ORDER
        .iter()
        .filter_map(|p| policies.iter().find(|s| s.policy == *p))
        .map(|s| s.final_accuracy_mean)
        .collect();
    ranked.windows(2).all(|w| w[0] >= w[1])
}

pub fn compare<P: AsRef<Path>>(paths: &[P]) -> Result<ComparisonReport> {
    if paths.is_empty() {
        return Err(Error::NoData("no metrics files given".into()));
    }
    let files = paths
        .iter()
        .map(|p| {
            let path = p.as_ref();
            let policies = summarize(&read_metrics(path)?);
            Ok(FileSummary {
                path: path.to_path_buf(),
                ordering_holds: ordering_holds(&policies),
                policies,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let base = &files[0];
    let differences = files[1..]
        .iter()
        .flat_map(|f| {
            f.policies.iter().filter_map(move |s| {
                base.policies
                    .iter()
                    .find(|b| b.policy == s.policy)
                    .map(|b| Difference {
                        path: f.path.clone(),
                        policy: s.policy,
                        loss_delta: s.final_loss_mean - b.final_loss_mean,
                        accuracy_delta: s.final_accuracy_mean - b.final_accuracy_mean,
                    })
            })
        })
        .collect();
    Ok(ComparisonReport { files, differences })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for file in &self.files {
            writeln!(f, "{}", file.path.display())?;
            write!(f, "{}", SummaryTable(&file.policies))?;
            let order: Vec<&str> = ACCURACY_ORDER.iter().map(|p| p.as_str()).collect();
            writeln!(
                f,
                "accuracy ordering {}: {}\n",
                order.join(" >= "),
                if file.ordering_holds {
                    "holds"
                } else {
                    "VIOLATED"
                }
            )?;
        }
        if !self.differences.is_empty() {
            writeln!(f, "differences against {}", self.files[0].path.display())?;
            for d in &self.differences {
                writeln!(
                    f,
                    "{:<40} {:<8} loss {:+.6} acc {:+.6}",
                    d.path.display().to_string(),
                    d.policy.as_str(),
                    d.loss_delta,
                    d.accuracy_delta
                )?;
            }
        }
        Ok(())
    }
}

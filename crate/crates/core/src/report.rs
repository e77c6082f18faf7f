//! Aggregation of finished runs into a success-rate table (rows scenarios,
//! columns variants) and learning curves with one-standard-deviation bands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::harness::{RunSummary, METRICS_FILE};

/// Success over environment steps, taken from the evaluated rows of a run.
pub type Curve = Vec<(u64, f64)>;

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub curve: Curve,
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    env_steps: u64,
    test_success: Option<f64>,
    config_hash: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("metrics: {e}"))
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let summary = RunSummary::load(dir)
        .map_err(|e| Error::invalid(format!("{} is not a finished run: {e}", dir.display())))?;
    let mut reader = csv::Reader::from_path(dir.join(METRICS_FILE)).map_err(csv_err)?;
    let mut curve = Vec::new();
    for row in reader.deserialize::<MetricsRow>() {
        let row = row.map_err(csv_err)?;
        if row.config_hash != summary.config_hash {
            return Err(Error::invalid(format!(
                "{}: metrics and summary disagree on the config hash",
                dir.display()
            )));
        }
        if let Some(s) = row.test_success {
            curve.push((row.env_steps, s));
        }
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        summary,
        curve,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Pointwise mean and population std over curves. Each curve is read as a
/// step function, and the grid is the union of their step counts from the
/// point where every curve has a value.
pub fn aggregate_curves(curves: &[Curve]) -> Vec<(u64, f64, f64)> {
    if curves.is_empty() || curves.iter().any(|c| c.is_empty()) {
        return Vec::new();
    }
    let start = curves.iter().map(|c| c[0].0).max().expect("non-empty");
    let grid: BTreeSet<u64> = curves.iter().flatten().map(|p| p.0).filter(|&s| s >= start).collect();
    grid.into_iter()
        .map(|step| {
            let vals: Vec<f64> = curves
                .iter()
                .map(|c| c.iter().take_while(|p| p.0 <= step).last().expect("start is covered").1)
                .collect();
            let (m, s) = mean_std(&vals);
            (step, m, s)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Group {
    pub variant: Variant,
    pub scenario: String,
    pub runs: Vec<RunRecord>,
}

impl Group {
    pub fn final_success(&self) -> (f64, f64) {
        let xs: Vec<f64> = self.runs.iter().map(|r| r.summary.final_test_success).collect();
        mean_std(&xs)
    }

    pub fn curve(&self) -> Vec<(u64, f64, f64)> {
        let curves: Vec<Curve> = self.runs.iter().map(|r| r.curve.clone()).collect();
        aggregate_curves(&curves)
    }
}

/// Groups runs by (variant, scenario). Runs in one group must share the
/// config hash up to the seed.
pub fn group_runs(runs: Vec<RunRecord>) -> Result<Vec<Group>> {
    let mut groups: BTreeMap<(String, Variant), Vec<RunRecord>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.summary.scenario.clone(), r.summary.variant))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, variant), runs)| {
            let h = &runs[0].summary.group_hash;
            if let Some(bad) = runs.iter().find(|r| &r.summary.group_hash != h) {
                return Err(Error::invalid(format!(
                    "{} and {} are both {variant} on {scenario} but their configs differ beyond the seed",
                    runs[0].dir.display(),
                    bad.dir.display()
                )));
            }
            Ok(Group {
                variant,
                scenario,
                runs,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Report {
    pub groups: Vec<Group>,
    pub scenarios: Vec<String>,
    pub variants: Vec<Variant>,
}

impl Report {
    pub fn build(run_dirs: &[PathBuf]) -> Result<Self> {
        if run_dirs.is_empty() {
            return Err(Error::invalid("no run directories given"));
        }
        let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
        let groups = group_runs(runs)?;
        let scenarios: BTreeSet<String> = groups.iter().map(|g| g.scenario.clone()).collect();
        let variants: BTreeSet<Variant> = groups.iter().map(|g| g.variant).collect();
        Ok(Self {
            groups,
            scenarios: scenarios.into_iter().collect(),
            variants: variants.into_iter().collect(),
        })
    }

    pub fn group(&self, scenario: &str, variant: Variant) -> Option<&Group> {
        self.groups.iter().find(|g| g.scenario == scenario && g.variant == variant)
    }

    fn table(&self, pick: impl Fn(&Group) -> f64) -> Vec<Vec<String>> {
        let mut rows = vec![std::iter::once("scenario".to_string())
            .chain(self.variants.iter().map(|v| v.name().to_string()))
            .collect()];
        for s in &self.scenarios {
            let mut row = vec![s.clone()];
            for v in &self.variants {
                row.push(self.group(s, *v).map(|g| pick(g).to_string()).unwrap_or_default());
            }
            rows.push(row);
        }
        rows
    }

    /// Mean final meta-test success, rows scenarios and columns variants.
    pub fn success_table(&self) -> Vec<Vec<String>> {
        self.table(|g| g.final_success().0)
    }

    pub fn std_table(&self) -> Vec<Vec<String>> {
        self.table(|g| g.final_success().1)
    }

    /// Human-readable `mean ± std (n)` table.
    pub fn render(&self) -> String {
        let mut rows = vec![std::iter::once("scenario".to_string())
            .chain(self.variants.iter().map(|v| v.name().to_string()))
            .collect::<Vec<_>>()];
        for s in &self.scenarios {
            let mut row = vec![s.clone()];
            for v in &self.variants {
                row.push(match self.group(s, *v) {
                    Some(g) => {
                        let (m, sd) = g.final_success();
                        format!("{m:.3} ± {sd:.3} ({})", g.runs.len())
                    }
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
                    + "\n"
            })
            .collect()
    }

    /// Writes `success_table.csv`, `success_table_std.csv` and one
    /// `curves/<scenario>__<variant>.csv` per group.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let curves_dir = out.join("curves");
        fs::create_dir_all(&curves_dir)?;
        let mut written = Vec::new();
        for (name, rows) in [("success_table.csv", self.success_table()), ("success_table_std.csv", self.std_table())] {
            let path = out.join(name);
            write_rows(&path, &rows)?;
            written.push(path);
        }
        for g in &self.groups {
            let path = curves_dir.join(format!("{}__{}.csv", g.scenario, g.variant.name()));
            let mut rows = vec![vec!["env_steps".to_string(), "mean".into(), "std".into()]];
            rows.extend(g.curve().into_iter().map(|(s, m, sd)| vec![s.to_string(), m.to_string(), sd.to_string()]));
            write_rows(&path, &rows)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_on_three_numbers() {
        let (m, s) = mean_std(&[0.2, 0.4, 0.9]);
        assert!((m - 0.5).abs() < 1e-15);
        // deviations -0.3, -0.1, 0.4 → squares sum 0.26, over 3
        assert!((s - (0.26f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_curve_has_zero_std() {
        let agg = aggregate_curves(&[vec![(10, 0.1), (20, 0.5)]]);
        assert_eq!(agg, vec![(10, 0.1, 0.0), (20, 0.5, 0.0)]);
    }

    #[test]
    fn curves_on_union_grid() {
        let a = vec![(10, 0.0), (30, 1.0)];
        let b = vec![(10, 0.5), (20, 0.7)];
        let agg = aggregate_curves(&[a, b]);
        let steps: Vec<u64> = agg.iter().map(|p| p.0).collect();
        assert_eq!(steps, vec![10, 20, 30]);
        assert!((agg[1].1 - 0.35).abs() < 1e-15);
        assert!((agg[2].1 - 0.85).abs() < 1e-15);
    }
}

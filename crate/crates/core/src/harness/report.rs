//! Human-readable result tables and plot-data files from evaluation CSVs.
//!
//! `report` consumes the `metrics.csv` / `episodes.csv` / `traces.csv`
//! triples that `evaluate` writes, prints a results table (best value per
//! task and metric marked with `*`), and emits two plot-data files: the
//! per-step force series restricted to successfully *recovered* insertions,
//! and the per-episode completion times.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub task: String,
    pub camera: String,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub direct_rate: f64,
    pub avg_max_force: f64,
    pub std_max_force: f64,
    pub avg_time: f64,
    pub std_time: f64,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 10 {
            return Err(Error::Format {
                offset: 0,
                detail: format!("{}: line {} has {} columns, expected 10", path.display(), i + 1, p.len()),
            });
        }
        let num = |s: &str, col: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                offset: 0,
                detail: format!("{}: bad numeric column {col}", path.display()),
            })
        };
        out.push(MetricsRow {
            label: p[0].into(),
            task: p[1].into(),
            camera: p[2].into(),
            n_episodes: num(p[3], "n_episodes")? as usize,
            success_rate: num(p[4], "success_rate")?,
            direct_rate: num(p[5], "direct_rate")?,
            avg_max_force: num(p[6], "avg_max_force")?,
            std_max_force: num(p[7], "std_max_force")?,
            avg_time: num(p[8], "avg_time")?,
            std_time: num(p[9], "std_time")?,
        });
    }
    Ok(out)
}

/// Render rows grouped by (task, camera); the best method per metric within
/// a group is starred (highest success/direct, lowest force/time).
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task.clone(), r.camera.clone())).or_default().push(r);
    }
    out.push_str(&format!(
        "{:<28} {:<14} {:>10} {:>10} {:>20} {:>20}\n",
        "task (camera)", "method", "success %", "direct %", "avg max force (N)", "avg time (s)"
    ));
    for ((task, camera), group) in &groups {
        let best_success =
            group.iter().map(|r| r.success_rate).fold(f64::MIN, f64::max);
        let best_direct = group.iter().map(|r| r.direct_rate).fold(f64::MIN, f64::max);
        let best_force =
            group.iter().map(|r| r.avg_max_force).fold(f64::MAX, f64::min);
        let best_time = group.iter().map(|r| r.avg_time).fold(f64::MAX, f64::min);
        for r in group {
            let star = |hit: bool, s: String| if hit { format!("*{s}*") } else { s };
            out.push_str(&format!(
                "{:<28} {:<14} {:>10} {:>10} {:>20} {:>20}\n",
                format!("{task} ({camera})"),
                r.label,
                star(r.success_rate == best_success, format!("{:.2}", r.success_rate)),
                star(r.direct_rate == best_direct, format!("{:.2}", r.direct_rate)),
                star(
                    r.avg_max_force == best_force,
                    format!("{:.2} ± {:.2}", r.avg_max_force, r.std_max_force)
                ),
                star(r.avg_time == best_time, format!("{:.1} ± {:.1}", r.avg_time, r.std_time)),
            ));
        }
    }
    out
}

/// Build the report from a list of evaluation directories. Writes
/// `tables.txt`, `force_recovered.csv` (per contact step of successfully
/// recovered insertions) and `times.csv` (per successful episode).
pub fn report(run_dirs: &[&Path], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut all_metrics = Vec::new();
    let mut force_lines: Vec<String> = Vec::new();
    let mut time_lines: Vec<String> = Vec::new();

    for dir in run_dirs {
        let metrics = read_metrics_csv(&dir.join("metrics.csv"))?;
        all_metrics.extend(metrics);

        // Episodes: which seeds were recovered successes / successes at all.
        let episodes = std::fs::read_to_string(dir.join("episodes.csv"))?;
        let mut recovered_seeds = Vec::new();
        for (i, line) in episodes.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let p: Vec<&str> = line.split(',').collect();
            if p.len() != 9 {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("episodes.csv in {}: bad column count", dir.display()),
                });
            }
            let (label, seed, success, direct) = (p[0], p[3], p[4] == "1", p[5] == "1");
            if success {
                time_lines.push(format!("{label},{seed},{}", p[7]));
                if !direct {
                    recovered_seeds.push(seed.to_string());
                }
            }
        }

        // Per-step force rows for the recovered insertions, contact steps only.
        let traces = std::fs::read_to_string(dir.join("traces.csv"))?;
        for (i, line) in traces.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let p: Vec<&str> = line.split(',').collect();
            if p.len() != 6 {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("traces.csv in {}: bad column count", dir.display()),
                });
            }
            let (label, seed, step, force, contact) = (p[0], p[1], p[2], p[4], p[5] == "1");
            if contact && recovered_seeds.iter().any(|s| s == seed) {
                force_lines.push(format!("{label},{seed},{step},{force}"));
            }
        }
    }

    let table = format_table(&all_metrics);
    std::fs::write(out_dir.join("tables.txt"), &table)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("force_recovered.csv"))?);
    writeln!(f, "label,seed,step,force_n")?;
    for line in &force_lines {
        writeln!(f, "{line}")?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("times.csv"))?);
    writeln!(f, "label,seed,time_s")?;
    for line in &time_lines {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, success: f64, force: f64) -> MetricsRow {
        MetricsRow {
            label: label.into(),
            task: "circle2".into(),
            camera: "clean".into(),
            n_episodes: 30,
            success_rate: success,
            direct_rate: success / 2.0,
            avg_max_force: force,
            std_max_force: 0.1,
            avg_time: 10.0,
            std_time: 1.0,
        }
    }

    #[test]
    fn bold_marking_matches_recomputation() {
        let rows =
            vec![row("vision-only", 60.0, 0.9), row("tactile-film", 90.0, 0.4)];
        let table = format_table(&rows);
        assert!(table.contains("*90.00*"), "best success starred:\n{table}");
        assert!(table.contains("*0.40 ± 0.10*"), "lowest force starred:\n{table}");
        assert!(!table.contains("*60.00*"));
    }

    #[test]
    fn empty_input_yields_header_only() {
        let table = format_table(&[]);
        assert_eq!(table.lines().count(), 1);
    }

    #[test]
    fn report_counts_contact_steps_of_recovered_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        std::fs::create_dir_all(&run).unwrap();
        std::fs::write(
            run.join("metrics.csv"),
            "label,task,camera,n_episodes,success_rate,direct_rate,avg_max_force,std_max_force,avg_time,std_time\n\
             m,circle2,clean,2,100.0,50.0,0.3,0.1,5.0,1.0\n",
        )
        .unwrap();
        // Seed 1 direct, seed 2 recovered.
        std::fs::write(
            run.join("episodes.csv"),
            "label,task,camera,seed,success,direct,max_force_n,time_s,steps\n\
             m,circle2,clean,1,1,1,0.2,4.0,40\n\
             m,circle2,clean,2,1,0,0.4,6.0,60\n",
        )
        .unwrap();
        // Contact steps: seed 1 has 1 (excluded, direct), seed 2 has 2.
        std::fs::write(
            run.join("traces.csv"),
            "label,seed,step,z_mm,force_n,contact\n\
             m,1,5,0.0,0.3,1\n\
             m,2,3,0.0,0.2,1\n\
             m,2,4,0.1,0.0,0\n\
             m,2,7,0.0,0.5,1\n",
        )
        .unwrap();
        let out = dir.path().join("report");
        report(&[run.as_path()], &out).unwrap();
        let force = std::fs::read_to_string(out.join("force_recovered.csv")).unwrap();
        assert_eq!(force.lines().count(), 1 + 2, "1 header + 2 contact rows of seed 2");
        let times = std::fs::read_to_string(out.join("times.csv")).unwrap();
        assert_eq!(times.lines().count(), 1 + 2, "both successes timed");
        assert!(std::fs::read_to_string(out.join("tables.txt")).unwrap().contains("circle2"));
    }

    #[test]
    fn schema_mismatch_names_column_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        std::fs::write(&p, "label,task\nonly,two\n").unwrap();
        let err = read_metrics_csv(&p).unwrap_err();
        assert!(err.to_string().contains("columns"));
    }
}

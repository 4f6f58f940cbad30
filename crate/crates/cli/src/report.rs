//! `report`: merges result records into comparison tables and plot data.

use std::path::{Path, PathBuf};

use ctrnn_lab::cells::Arch;
use ctrnn_lab::data::Task;

use crate::error::CliResult;
use crate::train_cmd::{mean_std, replica_dir, ResultRecord};
use crate::write_file;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task: Task,
    pub arch: Arch,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub partial: bool,
    /// Stored mean/std disagree with the replica values.
    pub inconsistent: bool,
    pub source: PathBuf,
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|source| ctrnn_lab::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| {
        ctrnn_lab::Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Loads every `result.json` under `dir` and checks it against the replica
/// files next to it.
pub fn collect_rows(dir: &Path) -> CliResult<Vec<(ReportRow, ResultRecord)>> {
    let mut files = Vec::new();
    find_files(dir, "result.json", &mut files)?;
    if files.is_empty() {
        return Err(ctrnn_lab::Error::Contract(format!("no result records under {}", dir.display())).into());
    }
    let mut rows = Vec::new();
    for path in files {
        let record: ResultRecord = serde_json::from_str(&read_text(&path)?).map_err(|e| ctrnn_lab::Error::Format {
            path: path.clone(),
            offset: e.column() as u64,
            detail: e.to_string(),
        })?;
        let run = path.parent().expect("file has a parent");
        let missing = (0..record.replicas_requested).any(|r| {
            let rd = replica_dir(run, r);
            !rd.join("summary.json").is_file() || !rd.join("history.csv").is_file()
        });
        let ok: Vec<f64> = record
            .replicas
            .iter()
            .filter(|r| !r.diverged)
            .map(|r| r.test_metric)
            .collect();
        let (mean, std) = mean_std(&ok);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 || (a.is_nan() && b.is_nan());
        let inconsistent = !close(mean, record.mean) || !close(std, record.std);
        if inconsistent {
            log::warn!("{}: stored statistics do not match replica values", path.display());
        }
        rows.push((
            ReportRow {
                task: record.task,
                arch: record.arch,
                mean,
                std,
                n: ok.len(),
                partial: record.partial || missing || ok.len() < record.replicas_requested,
                inconsistent,
                source: path.clone(),
            },
            record,
        ));
    }
    rows.sort_by_key(|r| (r.0.task, r.0.arch));
    Ok(rows)
}

fn flags(r: &ReportRow) -> String {
    let mut f = Vec::new();
    if r.partial {
        f.push("partial");
    }
    if r.inconsistent {
        f.push("inconsistent");
    }
    if r.n == 1 {
        f.push("single_sample");
    }
    f.join(";")
}

pub fn markdown_table(rows: &[ReportRow]) -> String {
    let mut s = String::from("| task | arch | accuracy (mean ± std) | n | flags |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.2}% ± {:.2} | {} | {} |\n",
            r.task,
            r.arch,
            100.0 * r.mean,
            100.0 * r.std,
            r.n,
            flags(r)
        ));
    }
    s
}

pub fn csv_table(rows: &[ReportRow]) -> String {
    let mut s = String::from("task,arch,mean,std,n,flags\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task,
            r.arch,
            r.mean,
            r.std,
            r.n,
            flags(r)
        ));
    }
    s
}

/// Epoch curves of every replica, prefixed by task, arch, and replica.
fn curves_csv(rows: &[(ReportRow, ResultRecord)]) -> CliResult<String> {
    let mut s = String::from("task,arch,replica,epoch,train_loss,val_metric,wall_ms\n");
    for (row, record) in rows {
        let run = row.source.parent().expect("file has a parent");
        for entry in &record.replicas {
            let path = replica_dir(run, entry.replica).join("history.csv");
            let Ok(text) = std::fs::read_to_string(&path) else {
                continue;
            };
            for line in text.lines().skip(1) {
                s.push_str(&format!("{},{},{},{line}\n", row.task, row.arch, entry.replica));
            }
        }
    }
    Ok(s)
}

/// Every `flow.csv` under `dir`, with a leading column naming its source.
fn flow_csv(dir: &Path) -> CliResult<Option<String>> {
    let mut files = Vec::new();
    find_files(dir, "flow.csv", &mut files)?;
    if files.is_empty() {
        return Ok(None);
    }
    let mut s = String::from("source,series,lag,norm,vanishing,exploding,neutral\n");
    for f in files {
        let source = f.strip_prefix(dir).unwrap_or(&f).display().to_string();
        for line in read_text(&f)?.lines().skip(1) {
            s.push_str(&format!("{source},{line}\n"));
        }
    }
    Ok(Some(s))
}

/// Writes `table.md`, `table.csv`, `curves.csv` and, when flow reports are
/// present, `flow_traces.csv` into `out`.
pub fn cmd_report(result_dir: &Path, out: &Path) -> CliResult<Vec<ReportRow>> {
    let rows = collect_rows(result_dir)?;
    let plain: Vec<ReportRow> = rows.iter().map(|(r, _)| r.clone()).collect();
    write_file(&out.join("table.md"), markdown_table(&plain).as_bytes())?;
    write_file(&out.join("table.csv"), csv_table(&plain).as_bytes())?;
    write_file(&out.join("curves.csv"), curves_csv(&rows)?.as_bytes())?;
    if let Some(flow) = flow_csv(result_dir)? {
        write_file(&out.join("flow_traces.csv"), flow.as_bytes())?;
    }
    Ok(plain)
}

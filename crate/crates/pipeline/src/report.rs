//! Summary tables from the evaluation CSVs under an output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use metadt_core::eval::{
    aggregate, write_summary_csv, EpisodeRecord, EvalCounters, EvalMode, EvalReport, RunLabel, SummaryRow,
};
use metadt_core::{EnvName, EnvSpec};
use walkdir::WalkDir;

use crate::error::{CliError, Result};

#[derive(Debug, serde::Deserialize)]
struct Row {
    mode: String,
    env: String,
    dataset_type: String,
    ablation: String,
    seed: u64,
    task_id: usize,
    episode: usize,
    #[serde(rename = "return")]
    ret: f64,
}

/// Parses one evaluation CSV back into a report.
pub fn read_eval_csv(path: &Path) -> Result<EvalReport> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        let r: Row = r?;
        rows.push(r);
    }
    let first = rows
        .first()
        .ok_or_else(|| CliError::Invariant(format!("{} has no episodes", path.display())))?;
    let mode: EvalMode = first.mode.parse()?;
    let label = RunLabel {
        env: first.env.clone(),
        dataset_type: first.dataset_type.clone(),
        ablation: first.ablation.clone(),
        seed: first.seed,
    };
    let horizon = EnvSpec::new(first.env.parse::<EnvName>()?).horizon;
    let mut episodes = Vec::with_capacity(rows.len());
    for r in &rows {
        let same = r.mode == first.mode
            && r.env == label.env
            && r.dataset_type == label.dataset_type
            && r.ablation == label.ablation
            && r.seed == label.seed;
        if !same {
            return Err(CliError::Invariant(format!("{} mixes several runs", path.display())));
        }
        episodes.push(EpisodeRecord {
            task_id: r.task_id,
            episode: r.episode,
            ret: r.ret,
            length: horizon,
        });
    }
    Ok(EvalReport::from_episodes(
        mode,
        label,
        episodes,
        EvalCounters::default(),
    ))
}

/// Every `eval_few_shot.csv` / `eval_zero_shot.csv` below `dir`, in path order.
pub fn find_eval_csvs(dir: &Path) -> Vec<PathBuf> {
    WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| {
            e.file_type().is_file()
                && matches!(
                    e.file_name().to_str(),
                    Some("eval_few_shot.csv") | Some("eval_zero_shot.csv")
                )
        })
        .map(|e| e.into_path())
        .collect()
}

/// Aggregates every evaluation under `dir` across seeds into `{dir}/summary.csv`.
pub fn report(dir: &Path) -> Result<(PathBuf, Vec<SummaryRow>)> {
    let files = find_eval_csvs(dir);
    if files.is_empty() {
        return Err(CliError::MissingArtifact {
            what: "evaluation results".into(),
            path: dir.to_path_buf(),
            producer: "eval".into(),
        });
    }
    let reports = files.iter().map(|p| read_eval_csv(p)).collect::<Result<Vec<_>>>()?;
    let mut rows = aggregate(&reports);
    rows.sort_by(|a, b| {
        (&a.env, &a.dataset_type, &a.method_variant).cmp(&(&b.env, &b.dataset_type, &b.method_variant))
    });
    let path = dir.join("summary.csv");
    write_summary_csv(&rows, BufWriter::new(File::create(&path)?))?;
    Ok((path, rows))
}

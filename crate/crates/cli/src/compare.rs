//! `toplab compare`: one column per run, one row per quantity.

use std::collections::HashMap;
use std::path::Path;

use crate::config::Resolved;
use crate::CliError;

struct RunSummary {
    label: String,
    objective: String,
    final_step: String,
    train_ntp: Option<f64>,
    eval: HashMap<String, String>,
}

fn missing(path: &Path) -> CliError {
    CliError::Runtime(format!("missing or unreadable file: {}", path.display()))
}

/// Last data row of a CSV as a header -> value map.
fn last_row(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|_| missing(path))?;
    let headers = rdr.headers().map_err(|_| missing(path))?.clone();
    let mut last = None;
    for rec in rdr.records() {
        last = Some(rec.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
    }
    let rec = last.ok_or_else(|| CliError::Runtime(format!("{} has no rows", path.display())))?;
    Ok(headers.iter().map(str::to_string).zip(rec.iter().map(str::to_string)).collect())
}

fn load(dir: &Path) -> Result<RunSummary, CliError> {
    let manifest = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest).map_err(|_| missing(&manifest))?;
    let resolved = Resolved::from_toml(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
    let metrics = last_row(&dir.join("metrics.csv"))?;
    let eval = last_row(&dir.join("eval.csv"))?;
    let objective = match resolved.objective() {
        toplab::model::Objective::Ntp => "ntp".to_string(),
        toplab::model::Objective::Mtp { future_tokens } => format!("mtp(N={future_tokens})"),
        toplab::model::Objective::Top { window } => format!("top(W={window})"),
    };
    Ok(RunSummary {
        label: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        objective,
        final_step: metrics.get("step").cloned().unwrap_or_default(),
        train_ntp: metrics.get("loss_ntp").and_then(|v| v.parse().ok()),
        eval,
    })
}

/// Builds the comparison table as CSV text.
pub fn comparison_table(dirs: &[impl AsRef<Path>]) -> Result<String, CliError> {
    let runs = dirs.iter().map(|d| load(d.as_ref())).collect::<Result<Vec<_>, _>>()?;
    let heldout = |r: &RunSummary| r.eval.get("ntp_head_loss").and_then(|v| v.parse::<f64>().ok());
    // deltas are taken against the first NTP run, or the first run if none
    let base_run = runs.iter().find(|r| r.objective == "ntp").or(runs.first());
    let baseline = base_run.and_then(heldout);
    let train_base = base_run.and_then(|r| r.train_ntp);

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|r| r.label.clone()));
    w.write_record(&header).map_err(csv_err)?;

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let eval_field = |key: &str| -> Vec<String> { runs.iter().map(|r| r.eval.get(key).cloned().unwrap_or_default()).collect() };
    let rows: Vec<(&str, Vec<String>)> = vec![
        ("objective", runs.iter().map(|r| r.objective.clone()).collect()),
        ("final_step", runs.iter().map(|r| r.final_step.clone()).collect()),
        ("train_ntp_head_loss", runs.iter().map(|r| fmt(r.train_ntp)).collect()),
        (
            "train_ntp_delta_vs_baseline",
            runs.iter().map(|r| fmt(r.train_ntp.zip(train_base).map(|(a, b)| a - b))).collect(),
        ),
        ("heldout_ntp_head_loss", runs.iter().map(|r| fmt(heldout(r))).collect()),
        (
            "heldout_ntp_delta_vs_baseline",
            runs.iter().map(|r| fmt(heldout(r).zip(baseline).map(|(a, b)| a - b))).collect(),
        ),
        (
            "heldout_ntp_relative_delta",
            runs.iter().map(|r| fmt(heldout(r).zip(baseline).map(|(a, b)| (a - b) / b))).collect(),
        ),
        ("perplexity", eval_field("perplexity")),
        ("top1_rate", eval_field("top1_rate")),
        ("mean_rank", eval_field("mean_rank")),
        ("window_agreement", eval_field("window_agreement")),
        ("mtp_per_head", eval_field("mtp_per_head")),
    ];
    for (name, values) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(values);
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn cmd_compare(dirs: &[std::path::PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let table = comparison_table(dirs)?;
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, &table)?;
    }
    Ok(())
}

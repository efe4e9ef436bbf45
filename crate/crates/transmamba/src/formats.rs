//! Text outputs: metrics CSV, efficiency-curve CSV, JSON-lines logs and
//! schedule files.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};
use transmamba_core::planner::CurvePoint;
use transmamba_core::schedule::{preset, TransPointSchedule};
use transmamba_core::train::StepRecord;

use crate::error::CliError;

/// `step,loss,ppl`, one row per step, LF endings.
pub fn metrics_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,ppl\n");
    for r in steps {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.loss.exp()));
    }
    s
}

/// `P,cost`, one row per grid point.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("P,cost\n");
    for c in curve {
        s.push_str(&format!("{},{}\n", c.p, c.cost));
    }
    s
}

/// One evaluation record.
pub fn eval_record(schedule: &str, task: &str, metric: &str, value: f64) -> Value {
    json!({ "schedule": schedule, "task": task, "metric": metric, "value": value })
}

pub fn append_jsonl(path: &Path, records: &[Value]) -> Result<(), CliError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_string());
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// `# cycle=K T=…` followed by one position per line.
pub fn schedule_file(s: &TransPointSchedule) -> String {
    let mut out = format!("# cycle={} T={}\n", s.cycle(), s.seq_len);
    for p in &s.pattern {
        out.push_str(&format!("{p}\n"));
    }
    out
}

/// Parses a schedule file; positions written for another length are rescaled
/// proportionally to `seq_len`.
pub fn parse_schedule_file(name: &str, text: &str, seq_len: usize) -> Result<TransPointSchedule, CliError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| CliError::Config("schedule file must start with `# cycle=K T=N`".into()))?;
    let mut cycle = None;
    let mut t = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("cycle", v)) => cycle = v.parse::<usize>().ok(),
            Some(("T", v)) => t = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (cycle, t) = match (cycle, t) {
        (Some(c), Some(t)) if t > 0 => (c, t),
        _ => return Err(CliError::Config("schedule header needs cycle=K and T=N".into())),
    };
    let points = lines
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.parse::<usize>().map_err(|_| CliError::Config(format!("bad schedule position `{l}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if points.len() != cycle {
        return Err(CliError::Config(format!("header says cycle={cycle} but file lists {} positions", points.len())));
    }
    if let Some(&p) = points.iter().find(|&&p| p > t) {
        return Err(CliError::Config(format!("position {p} beyond T={t}")));
    }
    let points = points
        .into_iter()
        .map(|p| if t == seq_len { p } else { rescale(p, t, seq_len) })
        .collect();
    TransPointSchedule::new(name, points, seq_len).map_err(|e| CliError::Config(e.to_string()))
}

fn rescale(p: usize, from: usize, to: usize) -> usize {
    ((p as f64 * to as f64 / from as f64).round() as usize).min(to)
}

/// Resolves a schedule argument: a preset name, a comma-separated list with
/// one point per layer, or the path of a schedule file.
pub fn resolve_schedule(arg: &str, seq_len: usize, n_layers: usize) -> Result<TransPointSchedule, CliError> {
    if let Ok(s) = preset(arg, seq_len) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("file");
        return parse_schedule_file(name, &text, seq_len);
    }
    let points = arg
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("`{arg}` is not a schedule name, file or position list")))?;
    if points.len() != n_layers {
        return Err(CliError::Config(format!(
            "schedule lists {} positions but the model has {n_layers} layers",
            points.len()
        )));
    }
    TransPointSchedule::per_layer("custom", points, seq_len).map_err(|e| CliError::Config(e.to_string()))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_file_round_trip() {
        let s = preset("v9", 512).unwrap();
        let text = schedule_file(&s);
        assert!(text.starts_with("# cycle=8 T=512\n"));
        assert_eq!(parse_schedule_file("v9", &text, 512).unwrap().pattern, s.pattern);
        assert_eq!(parse_schedule_file("v9", &text, 1024).unwrap().pattern, preset("v9", 1024).unwrap().pattern);
    }

    #[test]
    fn schedule_file_errors() {
        assert!(parse_schedule_file("x", "1\n2\n", 8).is_err());
        assert!(parse_schedule_file("x", "# cycle=3 T=8\n1\n2\n", 8).is_err());
        assert!(parse_schedule_file("x", "# cycle=1 T=8\n9\n", 8).is_err());
    }

    #[test]
    fn list_must_match_layers() {
        assert!(resolve_schedule("1,2,3", 16, 4).is_err());
        assert_eq!(resolve_schedule("1,2,3,4", 16, 4).unwrap().pattern, vec![1, 2, 3, 4]);
        assert_eq!(resolve_schedule("all-transformer", 16, 4).unwrap().pattern, vec![16]);
    }

    #[test]
    fn metrics_rows() {
        let steps: Vec<StepRecord> = (0..3)
            .map(|i| StepRecord { step: i, loss: 1.0, lr: 0.1, grad_norm: 0.0 })
            .collect();
        let csv = metrics_csv(&steps);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(1).unwrap(), format!("0,1,{}", 1f64.exp()));
    }
}

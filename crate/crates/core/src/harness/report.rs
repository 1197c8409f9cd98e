use super::{io_error, HarnessError, SweepResult};
use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "method,bias_kind,bias_value,hya_nats,trial,acc_unbiased,acc_conflicting,iza_nats,izy_nats";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn render_csv(result: &SweepResult) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &result.rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{},{},{},{},{}",
            r.method,
            r.bias_kind.name(),
            r.bias_value,
            r.hya_nats,
            r.trial,
            opt(r.acc_unbiased),
            opt(r.acc_conflicting),
            opt(r.iza_nats),
            opt(r.izy_nats)
        )
        .expect("write to string");
    }
    out
}

/// Writes the per-trial CSV (fixed header, failed cells as empty fields) or
/// the full result as JSON.
pub fn emit_report(result: &SweepResult, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    let body = match format {
        ReportFormat::Csv => render_csv(result),
        ReportFormat::Json => serde_json::to_string_pretty(result).expect("result serializes") + "\n",
    };
    std::fs::write(path, body).map_err(io_error(path))
}

pub fn load_result(path: &Path) -> Result<SweepResult, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.display().to_string(), message: e.to_string() })
}

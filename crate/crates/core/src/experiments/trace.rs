//! Per-round trace rows and their CSV encoding.

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 12] = [
    "t",
    "task",
    "gamma",
    "gamma_ad",
    "lambda_min",
    "lambda_max",
    "n_transfer",
    "n_interfere",
    "grad_f_sq",
    "grad_g_sq",
    "grad_h_sq",
    "m_hat",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub task: usize,
    pub gamma: f64,
    pub gamma_ad: f64,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub n_transfer: usize,
    pub n_interfere: usize,
    pub grad_f_sq: Option<f64>,
    pub grad_g_sq: f64,
    pub grad_h_sq: Option<f64>,
    pub m_hat: Option<f64>,
    /// Accuracy after the round on each task's test split; `None` for tasks
    /// not yet seen (or for regression models).
    pub acc: Vec<Option<f64>>,
}

pub fn header(num_tasks: usize) -> String {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|c| c.to_string()).collect();
    cols.extend((0..num_tasks).map(|j| format!("acc_task_{j}")));
    cols.join(",")
}

/// Plain decimal for moderate magnitudes, exponent form otherwise; both
/// forms are the shortest text that parses back to the same value.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        let mut fields = vec![
            self.t.to_string(),
            self.task.to_string(),
            format_float(self.gamma),
            format_float(self.gamma_ad),
            opt(self.lambda_min),
            opt(self.lambda_max),
            self.n_transfer.to_string(),
            self.n_interfere.to_string(),
            opt(self.grad_f_sq),
            format_float(self.grad_g_sq),
            opt(self.grad_h_sq),
            opt(self.m_hat),
        ];
        fields.extend(self.acc.iter().map(|a| opt(*a)));
        fields.join(",")
    }
}

/// Parses a trace file; `line` numbers in errors are 1-based file lines.
pub fn parse_trace(text: &str) -> Result<(usize, Vec<TraceRow>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let fixed = FIXED_COLUMNS.len();
    if headers.len() < fixed || headers.iter().take(fixed).ne(FIXED_COLUMNS.iter().copied()) {
        return Err(Error::Parse { line: 1, message: "unexpected trace header".into() });
    }
    let num_tasks = headers.len() - fixed;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: i as u64 + 2, message: e.to_string() })?;
        let line = rec.position().map_or(i as u64 + 2, |p| p.line());
        let num = |k: usize| -> Result<Option<f64>> {
            let f = rec[k].trim();
            if f.is_empty() {
                return Ok(None);
            }
            f.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Parse { line, message: format!("column {}: invalid number {f:?}", &headers[k]) })
        };
        let req = |k: usize| -> Result<f64> {
            num(k)?.ok_or_else(|| Error::Parse { line, message: format!("column {} is empty", &headers[k]) })
        };
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("column {}: invalid integer", &headers[k]) })
        };
        rows.push(TraceRow {
            t: int(0)?,
            task: int(1)?,
            gamma: req(2)?,
            gamma_ad: req(3)?,
            lambda_min: num(4)?,
            lambda_max: num(5)?,
            n_transfer: int(6)?,
            n_interfere: int(7)?,
            grad_f_sq: num(8)?,
            grad_g_sq: req(9)?,
            grad_h_sq: num(10)?,
            m_hat: num(11)?,
            acc: (0..num_tasks).map(|j| num(fixed + j)).collect::<Result<_>>()?,
        });
    }
    Ok((num_tasks, rows))
}

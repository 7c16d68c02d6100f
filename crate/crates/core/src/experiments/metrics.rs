//! Continual-learning metrics over the per-task accuracy grid.

use crate::error::{Error, Result};

/// `a[i][j]`: accuracy on task `j`'s test split after training task `i`,
/// defined for `j ≤ i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { tasks, cells: vec![None; tasks * tasks] }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.tasks || j > i {
            return Err(Error::Config(format!("accuracy cell ({i}, {j}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("accuracy {value} outside [0, 1]")));
        }
        self.cells[i * self.tasks + j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.tasks && j <= i {
            self.cells[i * self.tasks + j]
        } else {
            None
        }
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or_else(|| Error::Config(format!("accuracy cell ({i}, {j}) is not populated")))
    }

    /// CSV with a `trained_task` column and one column per evaluated task;
    /// undefined cells are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trained_task");
        for j in 0..self.tasks {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for i in 0..self.tasks {
            out.push_str(&i.to_string());
            for j in 0..self.tasks {
                out.push(',');
                if let Some(v) = self.get(i, j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let tasks = reader.headers()?.len().saturating_sub(1);
        let mut m = AccuracyMatrix::new(tasks);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i as u64 + 2, |p| p.line());
            for (j, field) in rec.iter().skip(1).enumerate() {
                if field.is_empty() {
                    continue;
                }
                let v: f64 =
                    field.parse().map_err(|_| Error::Parse { line, message: format!("invalid accuracy {field:?}") })?;
                m.set(i, j, v).map_err(|e| Error::Parse { line, message: e.to_string() })?;
            }
        }
        Ok(m)
    }
}

/// Mean of the final row: `(1/S)·Σ_j a[S−1][j]`.
pub fn avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let s = m.tasks();
    if s == 0 {
        return Err(Error::Config("accuracy matrix has no tasks".into()));
    }
    let mut total = 0.0;
    for j in 0..s {
        total += m.require(s - 1, j)?;
    }
    Ok(total / s as f64)
}

/// Mean drop from each earlier task's just-trained accuracy to its final
/// accuracy: `(1/(S−1))·Σ_{i<S−1}(a[i][i] − a[S−1][i])`. Negative values mean
/// backward transfer.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let s = m.tasks();
    if s < 2 {
        return Err(Error::Config("forgetting needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for i in 0..s - 1 {
        total += m.require(i, i)? - m.require(s - 1, i)?;
    }
    Ok(total / (s - 1) as f64)
}

//! Desk-scale synthetic fixtures.
//!
//! Features `x0` and `x1` are informative. They share a magnitude
//! `0.5 + |N(0, 1)|` drawn per row, each carries an independent random sign,
//! and the label is an interaction of the two (agreement of signs for
//! classification, their product for regression). The remaining `d − 2`
//! columns are independent Gaussian noise. Every column is standardized
//! before writing.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian noise added to each informative feature.
pub const MODE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cls,
    Reg,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "reg" => Ok(Task::Reg),
            other => Err(Error::Config(format!("unknown task {other:?} (expected cls or reg)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// `n × d`, standardized per column.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub informative: [usize; 2],
}

pub fn generate(n: usize, d: usize, task: Task, seed: u64) -> Result<SyntheticData> {
    if n < 100 {
        return Err(Error::Config(format!("synthetic data needs n >= 100, got {n}")));
    }
    if d < 2 {
        return Err(Error::Config(format!("synthetic data needs d >= 2, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(d);
        let mut signs = [0.0; 2];
        let shared: f64 = StandardNormal.sample(&mut rng);
        let magnitude = 0.5 + shared.abs();
        for s in &mut signs {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            row.push(*s * magnitude + MODE_STD * noise);
        }
        for _ in 2..d {
            row.push(StandardNormal.sample(&mut rng));
        }
        labels.push(match task {
            Task::Cls => f64::from(u8::from(signs[0] == signs[1])),
            Task::Reg => {
                let noise: f64 = StandardNormal.sample(&mut rng);
                row[0] * row[1] + 0.1 * noise
            }
        });
        features.push(row);
    }
    for j in 0..d {
        let mean = features.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(f64::MIN_POSITIVE);
        for r in &mut features {
            r[j] = (r[j] - mean) / std;
        }
    }
    Ok(SyntheticData {
        features,
        labels,
        informative: [0, 1],
    })
}

impl SyntheticData {
    /// Header `x0..x{d-1},y`; values printed with shortest round-trip
    /// formatting so identical inputs give identical bytes.
    pub fn to_csv(&self, task: Task) -> String {
        let d = self.features.first().map_or(0, Vec::len);
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (row, y) in self.features.iter().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            match task {
                Task::Cls => out.push_str(&format!("{}", *y as u8)),
                Task::Reg => out.push_str(&format!("{y}")),
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, task: Task, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(task)).map_err(|e| Error::io(path, e))
    }
}

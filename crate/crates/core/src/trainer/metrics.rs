//! Per-step training metrics as CSV with `#` comment lines for provenance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const HEADER: &str =
    "step,loss_noise,loss_dp,loss_load,loss_total,match_cost,expert_evals,routing_changed,ema_hamming,prior_hamming,batch_seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_noise: f64,
    pub loss_dp: f64,
    pub loss_load: f64,
    pub loss_total: f64,
    /// Cost of the assignment used for this step.
    pub match_cost: f64,
    /// Expert evaluations per sample summed over blocks.
    pub expert_evals: f64,
    /// Whether the online routing map changed during this step.
    pub routing_changed: bool,
    /// Hamming distance between online and EMA stacked routing maps.
    pub ema_hamming: usize,
    /// Hamming distance between the online map and the permuted prior.
    pub prior_hamming: usize,
    pub batch_seed: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{},{},{},{},{},{}",
            self.step,
            self.loss_noise,
            self.loss_dp,
            self.loss_load,
            self.loss_total,
            self.match_cost,
            self.expert_evals,
            u8::from(self.routing_changed),
            self.ema_hamming,
            self.prior_hamming,
            self.batch_seed
        )
    }
}

/// Writes provenance comments, then the header, then one line per row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    /// `preamble` lines are written as `# ` comments before the header.
    pub fn new(mut out: W, preamble: &[String]) -> Result<Self> {
        for line in preamble {
            for l in line.lines() {
                writeln!(out, "# {l}")?;
            }
        }
        writeln!(out, "{HEADER}")?;
        Ok(Self { out })
    }

    /// Continue an existing file without repeating the header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse rows back from CSV text, skipping comments and the header.
pub fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && *l != HEADER && !l.is_empty())
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

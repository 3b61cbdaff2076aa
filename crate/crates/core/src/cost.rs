//! Flop formulas for the four network types and an arithmetic energy model.
//!
//! Only matrix-product work is counted; activation functions are free.
//! 1 KFlop = 1000 operations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::tensor::OpLedger;

/// Activity of one layer's input, summed over `frames`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    /// `d_l`
    pub width: usize,
    /// `d_{l+1}`
    pub fan_out: usize,
    /// `Σ_i ([a_l]_i ≠ 0)`
    pub nonzero: u64,
    /// `Σ_i |[s_l]_i|`
    pub l1: u64,
    /// Whether the input was sent as events (false: dense product).
    pub discretized: bool,
}

/// Per-layer activity recorded by the executors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub frames: u64,
    pub layers: Vec<LayerCounts>,
}

impl LayerActivity {
    pub fn with_frames(frames: u64) -> Self {
        Self {
            frames,
            layers: Vec::new(),
        }
    }

    /// Accumulates another recording over the same network.
    pub fn merge(&mut self, other: &LayerActivity) -> Result<()> {
        if self.layers.is_empty() && self.frames == 0 {
            *self = other.clone();
            return Ok(());
        }
        check_len("LayerActivity::merge", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.width != b.width || a.fan_out != b.fan_out || a.discretized != b.discretized {
                return Err(Error::InvalidArgument(
                    "merging activity from different networks".into(),
                ));
            }
            a.nonzero += b.nonzero;
            a.l1 += b.l1;
        }
        self.frames += other.frames;
        Ok(())
    }

    pub fn per_frame(&self, total: u64) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            total as f64 / self.frames as f64
        }
    }
}

fn dense_layer(c: &LayerCounts, frames: u64) -> u64 {
    2 * (c.width * c.fan_out) as u64 * frames
}

/// `2 Σ_l d_l·d_{l+1}`.
pub fn flops_dense(dims: &[usize]) -> Result<u64> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "flops_dense needs at least two layer widths, got {dims:?}"
        )));
    }
    Ok(dims.windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum())
}

/// `2 Σ_l Σ_i ([a_l]_i ≠ 0)·d_{l+1}`.
pub fn flops_sparse(activity: &LayerActivity) -> u64 {
    activity
        .layers
        .iter()
        .map(|c| 2 * c.nonzero * c.fan_out as u64)
        .sum()
}

/// `Σ_l (|s_l|_L1·d_{l+1} + d_{l+1})`.
pub fn flops_rounding(activity: &LayerActivity) -> u64 {
    activity
        .layers
        .iter()
        .map(|c| {
            if c.discretized {
                c.l1 * c.fan_out as u64 + c.fan_out as u64 * activity.frames
            } else {
                dense_layer(c, activity.frames)
            }
        })
        .sum()
}

/// `Σ_l |s_l|_L1·d_{l+1}`; the bias is pre-loaded once, not per frame.
pub fn flops_sigma_delta(activity: &LayerActivity) -> u64 {
    activity
        .layers
        .iter()
        .map(|c| {
            if c.discretized {
                c.l1 * c.fan_out as u64
            } else {
                dense_layer(c, activity.frames)
            }
        })
        .sum()
}

/// Energy per arithmetic operation, in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub float_mult: f64,
    pub float_add: f64,
    pub int_mult: f64,
    pub int_add: f64,
}

impl Default for EnergyTable {
    /// 32-bit operations on a 45nm process.
    fn default() -> Self {
        Self {
            float_mult: 3.7,
            float_add: 0.9,
            int_mult: 3.1,
            int_add: 0.1,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let all = [self.float_mult, self.float_add, self.int_mult, self.int_add];
        if all.iter().all(|e| *e > 0.0 && e.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "energy table entries must be positive: {self:?}"
            )))
        }
    }
}

/// Which arithmetic the hardware uses for every counted operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    Int32,
    Float32,
}

/// Energy in joules of the multiplications and additions in `ledger`.
pub fn energy(ledger: &OpLedger, table: &EnergyTable, mode: EnergyMode) -> f64 {
    let (mult, add) = match mode {
        EnergyMode::Int32 => (table.int_mult, table.int_add),
        EnergyMode::Float32 => (table.float_mult, table.float_add),
    };
    (ledger.mults() as f64 * mult + ledger.adds() as f64 * add) * 1e-12
}

/// Ledger equivalent of `flops` counted by a formula: half multiplications and
/// half additions for dense/sparse products of the original network.
pub fn ledger_for_original(flops: u64) -> OpLedger {
    OpLedger {
        float_mults: flops / 2,
        float_adds: flops - flops / 2,
        ..OpLedger::default()
    }
}

/// Ledger equivalent of an event-driven (rounding or sigma-delta) count: all adds.
pub fn ledger_for_events(flops: u64) -> OpLedger {
    OpLedger {
        int_adds: flops,
        ..OpLedger::default()
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub net_type: String,
    pub dataset: String,
    pub kflops_dense: Option<f64>,
    pub kflops_sparse: Option<f64>,
    pub kflops: f64,
    pub class_error_train: f64,
    pub class_error_test: f64,
    pub energy_nj: f64,
    pub energy_nj_sparse: Option<f64>,
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn activity(frames: u64, layers: &[(usize, usize, u64, u64)]) -> LayerActivity {
        LayerActivity {
            frames,
            layers: layers
                .iter()
                .map(|&(width, fan_out, nonzero, l1)| LayerCounts {
                    width,
                    fan_out,
                    nonzero,
                    l1,
                    discretized: true,
                })
                .collect(),
        }
    }

    #[test]
    fn dense_formula() {
        assert_eq!(flops_dense(&[784, 200, 200, 10]).unwrap(), 397_600);
        assert_eq!(flops_dense(&[1, 1]).unwrap(), 2);
        assert_eq!(flops_dense(&[100, 100, 100]).unwrap(), 40_000);
        assert!(flops_dense(&[]).is_err());
        assert!(flops_dense(&[5]).is_err());
    }

    #[test]
    fn sparse_formula() {
        assert_eq!(flops_sparse(&activity(1, &[(3, 4, 0, 0), (4, 2, 0, 0)])), 0);
        assert_eq!(flops_sparse(&activity(1, &[(8, 10, 1, 0)])), 20);
    }

    #[test]
    fn rounding_formula() {
        assert_eq!(flops_rounding(&activity(1, &[(3, 4, 0, 0), (4, 2, 0, 0)])), 6);
        assert_eq!(flops_rounding(&activity(1, &[(8, 10, 0, 5)])), 60);
    }

    #[test]
    fn sigma_delta_formula() {
        assert_eq!(flops_sigma_delta(&activity(1, &[(9, 4, 0, 3)])), 12);
        assert_eq!(flops_sigma_delta(&activity(1, &[(9, 4, 0, 0)])), 0);
    }

    #[test]
    fn dense_layers_in_discrete_nets() {
        let mut a = activity(2, &[(3, 4, 0, 5)]);
        a.layers.push(LayerCounts {
            width: 4,
            fan_out: 2,
            nonzero: 8,
            l1: 0,
            discretized: false,
        });
        assert_eq!(flops_sigma_delta(&a), 20 + 2 * 8 * 2);
        assert_eq!(flops_rounding(&a), 20 + 8 + 2 * 8 * 2);
    }

    #[test]
    fn energy_examples() {
        let t = EnergyTable::default();
        let dense = ledger_for_original(397_600);
        let nj = energy(&dense, &t, EnergyMode::Int32) * 1e9;
        assert!((nj - 636.16).abs() < 1e-9, "{nj}");
        let sd = ledger_for_events(24_000);
        assert!((energy(&sd, &t, EnergyMode::Int32) * 1e9 - 2.4).abs() < 1e-12);
        assert_eq!(energy(&OpLedger::default(), &t, EnergyMode::Float32), 0.0);
        let f = energy(&dense, &t, EnergyMode::Float32) * 1e9;
        assert!((f - 198_800.0 * 4.6e-3).abs() < 1e-9);
    }

    #[test]
    fn merge_accumulates() {
        let mut a = activity(1, &[(3, 4, 2, 5)]);
        a.merge(&activity(2, &[(3, 4, 1, 1)])).unwrap();
        assert_eq!(a.frames, 3);
        assert_eq!(a.layers[0].l1, 6);
        assert!(a.merge(&activity(1, &[(3, 5, 0, 0)])).is_err());
        let mut empty = LayerActivity::default();
        empty.merge(&a).unwrap();
        assert_eq!(empty, a);
    }

    #[test]
    fn bad_energy_table() {
        let t = EnergyTable {
            int_add: 0.0,
            ..EnergyTable::default()
        };
        assert!(t.validate().is_err());
        assert!(EnergyTable::default().validate().is_ok());
    }

    #[test]
    fn csv_header() {
        let row = ReportRow {
            setting: "unoptimized".into(),
            net_type: "round".into(),
            dataset: "mnist".into(),
            kflops_dense: None,
            kflops_sparse: None,
            kflops: 44.0,
            class_error_train: 2.12,
            class_error_test: 4.21,
            energy_nj: 4.4,
            energy_nj_sparse: None,
        };
        let mut buf = Vec::new();
        write_report_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "setting,net_type,dataset,kflops_dense,kflops_sparse,kflops,class_error_train,class_error_test,energy_nj,energy_nj_sparse"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("unoptimized,round,mnist,,,44.0,"));
    }
}

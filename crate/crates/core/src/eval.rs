//! Rank-1 identification rates per pose bin.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{LabeledSample, PoseRoster};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::tensor::argmax;
use crate::train::eval_batch;

/// One scored probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub pose: usize,
    pub light: usize,
    pub truth: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseBin {
    pub pose: usize,
    pub yaw_deg: f64,
    pub n: usize,
    pub correct: usize,
}

impl PoseBin {
    /// Percent correct, or `None` for an empty bin.
    pub fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64 * 100.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankTable {
    /// One bin per roster pose, in roster order.
    pub bins: Vec<PoseBin>,
    /// `(n, correct)` per `[pose][light]`.
    pub cells: Vec<Vec<(usize, usize)>>,
    pub warnings: Vec<String>,
}

impl RankTable {
    pub fn from_predictions(roster: &PoseRoster, preds: &[Prediction]) -> Result<Self> {
        let lights = preds.iter().map(|p| p.light + 1).max().unwrap_or(0);
        let mut bins: Vec<PoseBin> = roster
            .0
            .iter()
            .enumerate()
            .map(|(pose, spec)| PoseBin {
                pose,
                yaw_deg: spec.yaw_deg,
                n: 0,
                correct: 0,
            })
            .collect();
        let mut cells = vec![vec![(0, 0); lights]; bins.len()];
        for p in preds {
            let bin = bins.get_mut(p.pose).ok_or_else(|| {
                Error::Mismatch(format!(
                    "pose id {} outside the {}-bin roster",
                    p.pose,
                    roster.len()
                ))
            })?;
            let hit = usize::from(p.truth == p.predicted);
            bin.n += 1;
            bin.correct += hit;
            let cell = &mut cells[p.pose][p.light];
            cell.0 += 1;
            cell.1 += hit;
        }
        let empty: Vec<String> = bins
            .iter()
            .filter(|b| b.n == 0)
            .map(|b| format!("{} ({} deg)", b.pose, b.yaw_deg))
            .collect();
        let mut warnings = Vec::new();
        if !empty.is_empty() {
            warnings.push(format!(
                "no test samples in pose bin(s) {}; excluded from the mean",
                empty.join(", ")
            ));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(RankTable {
            bins,
            cells,
            warnings,
        })
    }

    /// Unweighted average over non-empty bins.
    pub fn mean(&self) -> Option<f64> {
        let rates: Vec<f64> = self.bins.iter().filter_map(PoseBin::rate).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    pub fn cell_rate(&self, pose: usize, light: usize) -> Option<f64> {
        let &(n, c) = self.cells.get(pose)?.get(light)?;
        (n > 0).then(|| c as f64 / n as f64 * 100.0)
    }

    pub fn samples(&self) -> usize {
        self.bins.iter().map(|b| b.n).sum()
    }
}

/// Scores every sample (center crop, argmax over logits) and bins the hits
/// by pose. The network is only read.
pub fn predict(net: &NetworkGraph, samples: &[LabeledSample]) -> Result<Vec<Prediction>> {
    if samples.is_empty() {
        return Err(Error::Empty("no test samples".into()));
    }
    let needed = samples.iter().map(|s| s.identity + 1).max().unwrap_or(0);
    net.expect_classes(needed)?;
    let chunks: Vec<&[LabeledSample]> = samples.chunks(32).collect();
    let parts = chunks
        .into_par_iter()
        .map(|chunk| {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            let logits = net.logits(&eval_batch(net, &refs)?)?;
            let k = logits.shape()[1];
            logits
                .data()
                .chunks_exact(k)
                .zip(chunk)
                .map(|(row, s)| {
                    Ok(Prediction {
                        pose: s.pose,
                        light: s.light,
                        truth: s.identity,
                        predicted: argmax(row)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn evaluate(net: &NetworkGraph, samples: &[LabeledSample], roster: &PoseRoster) -> Result<RankTable> {
    RankTable::from_predictions(roster, &predict(net, samples)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TableStyle {
    #[default]
    Csv,
    Paper,
}

impl FromStr for TableStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableStyle::Csv),
            "paper" => Ok(TableStyle::Paper),
            _ => Err(Error::Unknown {
                kind: "table style",
                name: s.to_string(),
            }),
        }
    }
}

pub const CSV_HEADER: &str = "pose_id,yaw_deg,n_samples,rank1_pct";

/// `Csv`: one row per bin (empty bins have a blank rate) and a final
/// `mean,,,{value}` row, full precision. `Paper`: a yaw header row in roster
/// order with a trailing Mean column, rates to two decimals.
pub fn format_table(t: &RankTable, style: TableStyle) -> String {
    match style {
        TableStyle::Csv => {
            let mut out = format!("{CSV_HEADER}\n");
            for b in &t.bins {
                let rate = b.rate().map(|r| r.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{},{rate}\n", b.pose, b.yaw_deg, b.n));
            }
            if let Some(m) = t.mean() {
                out.push_str(&format!("mean,,,{m}\n"));
            }
            out
        }
        TableStyle::Paper => {
            let mut head = format!("{:<8}", "Yaw");
            let mut row = format!("{:<8}", "Rank-1");
            for b in &t.bins {
                head.push_str(&format!("{:>8}", format!("{}°", b.yaw_deg)));
                let cell = b.rate().map(|r| format!("{r:.2}")).unwrap_or_else(|| "-".into());
                row.push_str(&format!("{cell:>8}"));
            }
            head.push_str(&format!("{:>8}", "Mean"));
            let mean = t.mean().map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            row.push_str(&format!("{mean:>8}"));
            format!("{}\n{}\n", head.trim_end(), row.trim_end())
        }
    }
}

impl fmt::Display for RankTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_table(self, TableStyle::Paper))
    }
}

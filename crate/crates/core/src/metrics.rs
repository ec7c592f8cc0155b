//! Region benchmark metrics against one or more ground-truth annotations.
//!
//! All three are computed from the contingency table `n_ij` of pixel
//! counts in segment `i` and ground-truth region `j`, and averaged over
//! annotators.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Sparse contingency table between two label maps of equal shape.
#[derive(Clone, Debug)]
pub struct Contingency {
    pub n: u64,
    pub joint: BTreeMap<(u32, u32), u64>,
    pub rows: BTreeMap<u32, u64>,
    pub cols: BTreeMap<u32, u64>,
}

impl Contingency {
    pub fn new(s: &LabelMap, g: &LabelMap) -> Result<Self> {
        if !s.same_shape(g) {
            return Err(Error::Shape(format!(
                "segmentation is {}x{} but ground truth is {}x{}",
                s.height(),
                s.width(),
                g.height(),
                g.width()
            )));
        }
        let mut joint = BTreeMap::new();
        let mut rows = BTreeMap::new();
        let mut cols = BTreeMap::new();
        for (&a, &b) in s.labels().iter().zip(g.labels()) {
            *joint.entry((a, b)).or_insert(0) += 1;
            *rows.entry(a).or_insert(0) += 1;
            *cols.entry(b).or_insert(0) += 1;
        }
        Ok(Self {
            n: s.len() as u64,
            joint,
            rows,
            cols,
        })
    }
}

fn check_gts(gts: &[LabelMap]) -> Result<()> {
    if gts.is_empty() {
        return Err(Error::Param("no ground-truth segmentations".into()));
    }
    Ok(())
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Covering of each ground truth by `s`:
/// `(1/N) sum_{R in G} |R| max_{R' in S} |R & R'| / |R | R'|`.
pub fn segmentation_covering(s: &LabelMap, gts: &[LabelMap]) -> Result<f64> {
    check_gts(gts)?;
    let mut total = 0.0;
    for g in gts {
        let c = Contingency::new(s, g)?;
        let mut best: BTreeMap<u32, f64> = BTreeMap::new();
        for (&(a, b), &inter) in &c.joint {
            let union = c.rows[&a] + c.cols[&b] - inter;
            let iou = inter as f64 / union as f64;
            let e = best.entry(b).or_insert(0.0);
            if iou > *e {
                *e = iou;
            }
        }
        let sum: f64 = c
            .cols
            .iter()
            .map(|(b, size)| *size as f64 * best[b])
            .sum();
        total += sum / c.n as f64;
    }
    Ok(total / gts.len() as f64)
}

/// Fraction of unordered pixel pairs on which `s` and a ground truth agree
/// about same versus different region, averaged over ground truths. A
/// single-pixel image scores 1.
pub fn probabilistic_rand(s: &LabelMap, gts: &[LabelMap]) -> Result<f64> {
    check_gts(gts)?;
    let mut total = 0.0;
    for g in gts {
        let c = Contingency::new(s, g)?;
        let all = pairs(c.n);
        if all == 0 {
            total += 1.0;
            continue;
        }
        let both: u128 = c.joint.values().map(|v| pairs(*v)).sum();
        let in_s: u128 = c.rows.values().map(|v| pairs(*v)).sum();
        let in_g: u128 = c.cols.values().map(|v| pairs(*v)).sum();
        // agreements = pairs together in both + pairs apart in both
        let agree = all + 2 * both - in_s - in_g;
        total += agree as f64 / all as f64;
    }
    Ok(total / gts.len() as f64)
}

/// `H(S) + H(G) - 2 I(S; G)` in nats, averaged over ground truths.
pub fn variation_of_information(s: &LabelMap, gts: &[LabelMap]) -> Result<f64> {
    check_gts(gts)?;
    let mut total = 0.0;
    for g in gts {
        let c = Contingency::new(s, g)?;
        let n = c.n as f64;
        // H(S|G) + H(G|S), exactly zero for identical partitions
        let mut vi = 0.0;
        for (&(a, b), &v) in &c.joint {
            let pij = v as f64 / n;
            let pi = c.rows[&a] as f64 / n;
            let pj = c.cols[&b] as f64 / n;
            vi += pij * ((pi / pij).ln() + (pj / pij).ln());
        }
        total += vi.max(0.0);
    }
    Ok(total / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub sc: f64,
    pub pri: f64,
    pub vi: f64,
}

pub fn evaluate(s: &LabelMap, gts: &[LabelMap]) -> Result<Scores> {
    Ok(Scores {
        sc: segmentation_covering(s, gts)?,
        pri: probabilistic_rand(s, gts)?,
        vi: variation_of_information(s, gts)?,
    })
}

/// Scores of one image at every threshold of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub thresholds: Vec<f64>,
    pub scores: Vec<Scores>,
    pub gt_count: usize,
}

impl EvalRecord {
    /// Evaluates `segment(t)` at each threshold.
    pub fn from_hierarchy(
        id: impl Into<String>,
        thresholds: &[f64],
        gts: &[LabelMap],
        mut segment: impl FnMut(f64) -> LabelMap,
    ) -> Result<Self> {
        let scores = thresholds
            .iter()
            .map(|&t| evaluate(&segment(t), gts))
            .collect::<Result<Vec<_>>>()?;
        let rec = Self {
            id: id.into(),
            thresholds: thresholds.to_vec(),
            scores,
            gt_count: gts.len(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() != self.scores.len() {
            return Err(Error::Param(format!("record {}: empty or ragged grid", self.id)));
        }
        if self.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Param(format!(
                "record {}: thresholds not strictly increasing",
                self.id
            )));
        }
        if self
            .scores
            .iter()
            .any(|s| !(s.sc.is_finite() && s.pri.is_finite() && s.vi.is_finite()))
        {
            return Err(Error::Param(format!("record {}: non-finite score", self.id)));
        }
        Ok(())
    }
}

/// `0, step, 2 step, ..., 1`.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Param(format!("grid step {step} not in (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| (i as f64 * step).min(1.0)).collect())
}

/// One metric at ODS and OIS; `ods_threshold` is the shared grid choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdsOis {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub sc: OdsOis,
    pub pri: OdsOis,
    pub vi: OdsOis,
    pub images: usize,
}

fn aggregate(records: &[EvalRecord], metric: impl Fn(&Scores) -> f64, higher: bool) -> OdsOis {
    let better = |a: f64, b: f64| if higher { a > b } else { a < b };
    let grid = &records[0].thresholds;
    let n = records.len() as f64;
    let mut ods = (f64::NAN, grid[0]);
    for (ti, &t) in grid.iter().enumerate() {
        let mean = records.iter().map(|r| metric(&r.scores[ti])).sum::<f64>() / n;
        if ods.0.is_nan() || better(mean, ods.0) {
            ods = (mean, t);
        }
    }
    let ois = records
        .iter()
        .map(|r| {
            r.scores
                .iter()
                .map(&metric)
                .fold(f64::NAN, |acc, v| if acc.is_nan() || better(v, acc) { v } else { acc })
        })
        .sum::<f64>()
        / n;
    OdsOis {
        ods: ods.0,
        ods_threshold: ods.1,
        ois,
    }
}

/// ODS picks one grid threshold per metric maximizing (SC, PRI) or
/// minimizing (VI) the dataset mean; OIS averages per-image optima. Ties
/// go to the lowest threshold.
pub fn ods_ois(records: &[EvalRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Param("no evaluation records".into()))?;
    for r in records {
        r.validate()?;
        if r.thresholds != first.thresholds {
            return Err(Error::Param(format!(
                "record {} uses a different threshold grid from {}",
                r.id, first.id
            )));
        }
    }
    Ok(Summary {
        sc: aggregate(records, |s| s.sc, true),
        pri: aggregate(records, |s| s.pri, true),
        vi: aggregate(records, |s| s.vi, false),
        images: records.len(),
    })
}

/// `image,threshold,sc,pri,vi` rows.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("image,threshold,sc,pri,vi\n");
    for r in records {
        for (t, s) in r.thresholds.iter().zip(&r.scores) {
            writeln!(out, "{},{:.2},{:.6},{:.6},{:.6}", r.id, t, s.sc, s.pri, s.vi).unwrap();
        }
    }
    out
}

/// Table with the SC, PRI and VI column pairs, each as ODS then OIS.
pub fn summary_table(summary: &Summary, method: &str) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "SC-ODS", "SC-OIS", "PRI-ODS", "PRI-OIS", "VI-ODS", "VI-OIS"
    )
    .unwrap();
    writeln!(
        out,
        "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        method,
        summary.sc.ods,
        summary.sc.ois,
        summary.pri.ods,
        summary.pri.ois,
        summary.vi.ods,
        summary.vi.ois
    )
    .unwrap();
    writeln!(
        out,
        "ODS thresholds: SC {:.2}, PRI {:.2}, VI {:.2}; images {}",
        summary.sc.ods_threshold, summary.pri.ods_threshold, summary.vi.ods_threshold, summary.images
    )
    .unwrap();
    out
}

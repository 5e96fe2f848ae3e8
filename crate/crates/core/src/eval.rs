//! Beat tracking metrics: F-measure under a ±70 ms window and the
//! continuity family CMLc / CMLt / AMLc / AMLt.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::exec::Exec;
use crate::postprocess::{load_beats, BeatSequence};

pub const F_MEASURE_TOLERANCE: f64 = 0.07;
pub const CONTINUITY_THRESHOLD: f64 = 0.175;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Continuity {
    pub cmlc: f64,
    pub cmlt: f64,
    pub amlc: f64,
    pub amlt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub cmlc: f64,
    pub cmlt: f64,
    pub amlc: f64,
    pub amlt: f64,
    pub matched: usize,
    pub estimated: usize,
    pub reference: usize,
}

fn check_sorted(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{name} beats contain a non-finite time")));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("{name} beats are not sorted")));
    }
    Ok(())
}

/// Number of one-to-one pairs with `|e - r| <= tolerance`.
///
/// On sorted inputs a single sweep that matches whenever the two heads are
/// in range, and otherwise discards the earlier head, is maximum.
pub fn match_count(est: &[f64], reference: &[f64], tolerance: f64) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < est.len() && j < reference.len() {
        let d = est[i] - reference[j];
        if d.abs() <= tolerance {
            n += 1;
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    n
}

pub fn f_measure(est: &[f64], reference: &[f64], tolerance: f64) -> Result<FScore> {
    check_sorted("estimated", est)?;
    check_sorted("reference", reference)?;
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    let matched = match_count(est, reference, tolerance);
    let precision = if est.is_empty() { 0.0 } else { matched as f64 / est.len() as f64 };
    let recall = if reference.is_empty() { 0.0 } else { matched as f64 / reference.len() as f64 };
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        f_measure,
        precision,
        recall,
        matched,
    })
}

/// Original, offbeat, double tempo, half tempo (odd) and half tempo (even).
pub fn reference_variations(reference: &[f64]) -> [Vec<f64>; 5] {
    let mut double = Vec::with_capacity(reference.len() * 2);
    for (i, &r) in reference.iter().enumerate() {
        double.push(r);
        if let Some(&next) = reference.get(i + 1) {
            double.push(0.5 * (r + next));
        }
    }
    let offbeat = double.iter().skip(1).step_by(2).copied().collect();
    let half_odd = reference.iter().step_by(2).copied().collect();
    let half_even = reference.iter().skip(1).step_by(2).copied().collect();
    [reference.to_vec(), offbeat, double, half_odd, half_even]
}

/// Continuity against a single reference: returns (longest run, total)
/// as fractions of `max(|est|, |ref|)`.
fn continuity_single(est: &[f64], reference: &[f64], theta: f64) -> (f64, f64) {
    if reference.len() < 2 || est.len() < 2 {
        return (0.0, 0.0);
    }
    let denom = est.len().max(reference.len()) as f64;
    let mut used = vec![false; reference.len()];
    let mut run = 0usize;
    let mut longest = 0usize;
    let mut total = 0usize;
    for (m, &e) in est.iter().enumerate() {
        let mut nearest = 0;
        for (k, &r) in reference.iter().enumerate() {
            if (e - r).abs() < (e - reference[nearest]).abs() {
                nearest = k;
            }
        }
        let mut ok = false;
        if !used[nearest] {
            let diff = (e - reference[nearest]).abs();
            let (ref_iv, est_iv) = if m == 0 || nearest == 0 {
                let r = if nearest + 1 < reference.len() {
                    reference[nearest + 1] - reference[nearest]
                } else {
                    reference[nearest] - reference[nearest - 1]
                };
                let e = if m + 1 < est.len() { est[m + 1] - est[m] } else { est[m] - est[m - 1] };
                (r, e)
            } else {
                (reference[nearest] - reference[nearest - 1], est[m] - est[m - 1])
            };
            if ref_iv > 0.0 {
                let phase = diff / ref_iv;
                let period = (1.0 - est_iv / ref_iv).abs();
                ok = phase < theta && period < theta;
            }
        }
        if ok {
            used[nearest] = true;
            run += 1;
            total += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    (longest as f64 / denom, total as f64 / denom)
}

/// CMLc/CMLt against the reference itself; AMLc/AMLt as the separate
/// maxima over all reference variations. Variations with fewer than two
/// beats, and estimates with fewer than two beats, score zero.
pub fn continuity(est: &[f64], reference: &[f64], theta: f64) -> Result<Continuity> {
    check_sorted("estimated", est)?;
    check_sorted("reference", reference)?;
    if reference.len() < 2 {
        return Err(Error::invalid("continuity needs at least two reference beats"));
    }
    let scores: Vec<(f64, f64)> = reference_variations(reference)
        .iter()
        .map(|v| continuity_single(est, v, theta))
        .collect();
    Ok(Continuity {
        cmlc: scores[0].0,
        cmlt: scores[0].1,
        amlc: scores.iter().map(|s| s.0).fold(0.0, f64::max),
        amlt: scores.iter().map(|s| s.1).fold(0.0, f64::max),
    })
}

pub fn evaluate(est: &BeatSequence, reference: &BeatSequence) -> Result<MetricReport> {
    let f = f_measure(est.times(), reference.times(), F_MEASURE_TOLERANCE)?;
    let c = continuity(est.times(), reference.times(), CONTINUITY_THRESHOLD)?;
    Ok(MetricReport {
        f_measure: f.f_measure,
        precision: f.precision,
        recall: f.recall,
        cmlc: c.cmlc,
        cmlt: c.cmlt,
        amlc: c.amlc,
        amlt: c.amlt,
        matched: f.matched,
        estimated: est.len(),
        reference: reference.len(),
    })
}

/// F-measure over the position-1 beats of both sequences.
pub fn downbeat_f_measure(est: &BeatSequence, reference: &BeatSequence) -> Result<f64> {
    Ok(f_measure(&est.downbeats(), &reference.downbeats(), F_MEASURE_TOLERANCE)?.f_measure)
}

/// Unweighted mean of the rate fields; counts are summed.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::invalid("no items"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        f_measure: mean(|r| r.f_measure),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        cmlc: mean(|r| r.cmlc),
        cmlt: mean(|r| r.cmlt),
        amlc: mean(|r| r.amlc),
        amlt: mean(|r| r.amlt),
        matched: reports.iter().map(|r| r.matched).sum(),
        estimated: reports.iter().map(|r| r.estimated).sum(),
        reference: reports.iter().map(|r| r.reference).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub estimate: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub items: Vec<ItemScore>,
    pub mean: MetricReport,
    pub excluded: usize,
}

fn score_item(item: &CorpusItem) -> Result<MetricReport> {
    let est = load_beats(&item.estimate)?;
    let reference = load_beats(&item.reference)?;
    evaluate(&est, &reference)
}

/// Score every pair; items that fail to load or score are recorded and
/// left out of the mean.
pub fn score_corpus(items: &[CorpusItem], exec: Exec) -> Result<CorpusReport> {
    if items.is_empty() {
        return Err(Error::invalid("no items"));
    }
    let scored: Vec<ItemScore> = exec.map(items, |item| match score_item(item) {
        Ok(r) => ItemScore {
            id: item.id.clone(),
            report: Some(r),
            error: None,
        },
        Err(e) => ItemScore {
            id: item.id.clone(),
            report: None,
            error: Some(e.to_string()),
        },
    });
    let ok: Vec<MetricReport> = scored.iter().filter_map(|s| s.report).collect();
    let excluded = scored.len() - ok.len();
    let mean = mean_report(&ok).map_err(|_| Error::invalid(format!("all {excluded} items failed to score")))?;
    Ok(CorpusReport {
        items: scored,
        mean,
        excluded,
    })
}

pub const CSV_HEADER: [&str; 8] = ["item", "F", "P", "R", "CMLc", "CMLt", "AMLc", "AMLt"];

/// Scored items followed by a `mean` row; excluded items are omitted.
pub fn write_corpus_csv(report: &CorpusReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    let row = |id: &str, r: &MetricReport| {
        let mut v = vec![id.to_string()];
        v.extend(
            [r.f_measure, r.precision, r.recall, r.cmlc, r.cmlt, r.amlc, r.amlt]
                .iter()
                .map(|x| format!("{x:.6}")),
        );
        v
    };
    for item in &report.items {
        if let Some(r) = &item.report {
            w.write_record(row(&item.id, r))?;
        }
    }
    w.write_record(row("mean", &report.mean))?;
    w.flush().at(path)
}

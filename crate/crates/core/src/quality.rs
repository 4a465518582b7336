//! Ensemble-variance quality score, its Dice calibration and failure
//! detection.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ensemble_segment;
use crate::pipeline::Checkpoint;
use crate::rng;
use crate::synth::{dice, Corruption};
use crate::volume::Volume;

/// Normalizer of the summed standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NqmDenominator {
    /// Sum of the mean probability.
    #[default]
    Mean,
    /// Number of voxels with mean probability above 0.5.
    HardCount,
}

/// Voxelwise mean and population standard deviation, in f64.
pub fn moments(members: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = members.first() else {
        return Err(Error::Contract("no ensemble members".into()));
    };
    let v = first.len();
    if let Some(m) = members.iter().find(|m| m.len() != v) {
        return Err(Error::Shape(format!("member of {} voxels, expected {v}", m.len())));
    }
    let n = members.len() as f64;
    let mut mean = vec![0.0f64; v];
    for m in members {
        for (a, &x) in mean.iter_mut().zip(m) {
            *a += x as f64;
        }
    }
    for a in &mut mean {
        *a /= n;
    }
    let mut sd = vec![0.0f64; v];
    for m in members {
        for ((s, &x), &mu) in sd.iter_mut().zip(m).zip(&mean) {
            let d = x as f64 - mu;
            *s += d * d;
        }
    }
    for s in &mut sd {
        *s = (*s / n).sqrt();
    }
    Ok((mean, sd))
}

/// `Σ SD / Σ μ` over all voxels; `+∞` when the denominator is zero.
pub fn nqm_from_moments(mean: &[f64], sd: &[f64], denominator: NqmDenominator) -> f64 {
    let num: f64 = sd.iter().sum();
    let den = match denominator {
        NqmDenominator::Mean => mean.iter().sum(),
        NqmDenominator::HardCount => mean.iter().filter(|&&m| m > 0.5).count() as f64,
    };
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Quality score of an ensemble of probability volumes.
pub fn nqm(members: &[Vec<f32>], denominator: NqmDenominator) -> Result<f64> {
    if members.len() < 2 {
        return Err(Error::Contract(format!(
            "the quality score needs at least 2 members, got {}",
            members.len()
        )));
    }
    let (mean, sd) = moments(members)?;
    Ok(nqm_from_moments(&mean, &sd, denominator))
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation of the points.
    pub r: f64,
    pub n: usize,
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    // the mean of equal values can round away from them, so test equality directly
    if points.iter().all(|p| p.0 == points[0].0) || !(sxx > 0.0) {
        return Err(Error::Calibration("all scores are equal; the fit is degenerate".into()));
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r,
        n: points.len(),
    })
}

/// Dice-on-score regression and the score threshold for a Dice target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcCalibration {
    pub slope: f64,
    pub intercept: f64,
    pub dice_target: f64,
    pub nqm_threshold: f64,
    pub n_points: usize,
    pub r: f64,
}

/// Fit Dice against the score over `(nqm, dice)` pairs; infinite scores are
/// left out of the fit.
pub fn calibrate(pairs: &[(f64, f64)], dice_target: f64) -> Result<QcCalibration> {
    let finite: Vec<(f64, f64)> = pairs.iter().copied().filter(|p| p.0.is_finite()).collect();
    if finite.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 finite pairs, got {}",
            finite.len()
        )));
    }
    let fit = fit_line(&finite)?;
    if !(fit.slope < 0.0) {
        return Err(Error::Calibration(format!(
            "Dice does not fall with the score (slope {:.4})",
            fit.slope
        )));
    }
    let nqm_threshold = (dice_target - fit.intercept) / fit.slope;
    if !nqm_threshold.is_finite() {
        return Err(Error::Calibration("threshold is not finite".into()));
    }
    Ok(QcCalibration {
        slope: fit.slope,
        intercept: fit.intercept,
        dice_target,
        nqm_threshold,
        n_points: fit.n,
        r: fit.r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Flag,
}

/// Flag scores strictly above the threshold; a score equal to it passes.
pub fn classify(nqm_value: f64, calibration: &QcCalibration) -> Verdict {
    if nqm_value.is_nan() || nqm_value > calibration.nqm_threshold {
        Verdict::Flag
    } else {
        Verdict::Accept
    }
}

/// Spike intensities used to enrich calibration data, from barely visible
/// to full segmentation collapse.
pub const SPIKE_ENRICHMENT: [f64; 4] = [0.1, 0.3, 0.6, 1.0];

/// Clean images plus one single-spike corruption per enrichment level.
pub fn spike_enrichment() -> Vec<Option<Corruption>> {
    std::iter::once(None)
        .chain(SPIKE_ENRICHMENT.iter().map(|&intensity| Some(Corruption::Spike { intensity, count: 1 })))
        .collect()
}

/// Score `cases` under [`spike_enrichment`] and fit the calibration.
/// Returns the fit and the scored pairs.
pub fn calibrate_on(
    ckpt: &Checkpoint,
    cases: &[Case],
    dice_target: f64,
    n: usize,
    seed: u64,
) -> Result<(QcCalibration, Vec<ScoredCase>)> {
    let scored = score_cases(ckpt, cases, &spike_enrichment(), n, seed)?;
    let pairs: Vec<(f64, f64)> = scored.iter().map(|s| (s.nqm, s.dice)).collect();
    Ok((calibrate(&pairs, dice_target)?, scored))
}

/// A labelled volume for quality evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub label: Volume,
}

/// Ensemble Dice and score of one (case, corruption) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub case_id: String,
    /// `clean` or the corruption string.
    pub corruption: String,
    pub dice: f64,
    pub nqm: f64,
}

/// Run an `n`-member ensemble on every case under every corruption (`None`
/// is the clean image) and score it against the label.
pub fn score_cases(
    ckpt: &Checkpoint,
    cases: &[Case],
    corruptions: &[Option<Corruption>],
    n: usize,
    seed: u64,
) -> Result<Vec<ScoredCase>> {
    if n < 2 {
        return Err(Error::Contract(format!("quality control needs at least 2 members, got {n}")));
    }
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..corruptions.len()).map(move |k| (c, k)))
        .collect();
    jobs.par_iter()
        .map(|&(ci, ki)| {
            let case = &cases[ci];
            let cseed = rng::derive_seed(seed, rng::stream::CORRUPTION, (ci * corruptions.len() + ki) as u64);
            let (image, name) = match &corruptions[ki] {
                Some(c) => (c.apply(&case.image, cseed)?, c.to_string()),
                None => (case.image.clone(), "clean".to_string()),
            };
            let ens = ensemble_segment(&image, ckpt, n, seed)?;
            Ok(ScoredCase {
                case_id: case.id.clone(),
                corruption: name,
                dice: dice(&ens.mask, &case.label.to_mask())?,
                nqm: ens.nqm.unwrap_or(f64::INFINITY),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub case_id: String,
    pub corruption: String,
    pub dice: f64,
    pub nqm: f64,
    pub flagged: bool,
}

/// Aggregates over all rows. A case is a failure when its Dice is below the
/// target.
///
/// * `detection_rate` = flagged failures / failures (1 when there are none)
/// * `false_negative_rate` = unflagged failures / cases
/// * `false_positive_rate` = flagged non-failures / cases
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcSummary {
    pub cases: usize,
    pub failures: usize,
    pub flagged: usize,
    pub detection_rate: f64,
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
    pub dice_target: f64,
    pub nqm_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub rows: Vec<QcRow>,
    pub summary: QcSummary,
}

pub fn report(scored: &[ScoredCase], calibration: &QcCalibration) -> QcReport {
    let rows: Vec<QcRow> = scored
        .iter()
        .map(|s| QcRow {
            case_id: s.case_id.clone(),
            corruption: s.corruption.clone(),
            dice: s.dice,
            nqm: s.nqm,
            flagged: classify(s.nqm, calibration) == Verdict::Flag,
        })
        .collect();
    let total = rows.len();
    let fail = |r: &QcRow| r.dice < calibration.dice_target;
    let failures = rows.iter().filter(|r| fail(r)).count();
    let caught = rows.iter().filter(|r| fail(r) && r.flagged).count();
    let false_pos = rows.iter().filter(|r| !fail(r) && r.flagged).count();
    let frac = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    let summary = QcSummary {
        cases: total,
        failures,
        flagged: rows.iter().filter(|r| r.flagged).count(),
        detection_rate: if failures == 0 { 1.0 } else { caught as f64 / failures as f64 },
        false_negative_rate: frac(failures - caught),
        false_positive_rate: frac(false_pos),
        dice_target: calibration.dice_target,
        nqm_threshold: calibration.nqm_threshold,
    };
    QcReport { rows, summary }
}

/// Score and classify every case; an empty corruption list evaluates the
/// clean images.
pub fn qc_evaluate(
    ckpt: &Checkpoint,
    cases: &[Case],
    corruptions: &[Corruption],
    calibration: &QcCalibration,
    n: usize,
    seed: u64,
) -> Result<QcReport> {
    let list: Vec<Option<Corruption>> = if corruptions.is_empty() {
        vec![None]
    } else {
        corruptions.iter().copied().map(Some).collect()
    };
    let scored = score_cases(ckpt, cases, &list, n, seed)?;
    Ok(report(&scored, calibration))
}

impl QcReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case_id", "corruption", "dice", "nqm", "flagged"])?;
        for r in &self.rows {
            w.write_record([
                r.case_id.clone(),
                r.corruption.clone(),
                format!("{:.6}", r.dice),
                format_score(r.nqm),
                r.flagged.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let text = serde_json::to_string_pretty(&self.summary)?;
        writeln!(f, "{text}").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn format_score(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("spearman over {} and {} values", x.len(), y.len())));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let pts: Vec<(f64, f64)> = rx.into_iter().zip(ry).collect();
    Ok(fit_line(&pts).map(|f| f.r).unwrap_or(0.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_members_score_zero() {
        let m = vec![vec![0.2f32, 0.9, 0.7]; 4];
        assert_eq!(nqm(&m, NqmDenominator::Mean).unwrap(), 0.0);
    }

    #[test]
    fn opposite_members_score_one() {
        let v = 1000;
        let m = vec![vec![0.0f32; v], vec![1.0f32; v]];
        assert_eq!(nqm(&m, NqmDenominator::Mean).unwrap(), 1.0);
    }

    #[test]
    fn empty_prediction_is_infinite() {
        let m = vec![vec![0.0f32; 8]; 3];
        assert_eq!(nqm(&m, NqmDenominator::Mean).unwrap(), f64::INFINITY);
    }

    #[test]
    fn contract_and_shape_errors() {
        assert!(matches!(nqm(&[vec![0.5; 3]], NqmDenominator::Mean), Err(Error::Contract(_))));
        assert!(matches!(
            nqm(&[vec![0.5; 3], vec![0.5; 4]], NqmDenominator::Mean),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hard_count_uses_thresholded_mean() {
        let m = vec![vec![1.0f32, 0.6, 0.0, 0.0], vec![1.0f32, 0.2, 0.0, 0.0]];
        // mean (1, 0.4, 0, 0); sd (0, 0.2, 0, 0); one voxel above 0.5
        let h = nqm(&m, NqmDenominator::HardCount).unwrap();
        assert!((h - 0.2).abs() < 1e-7);
        let s = nqm(&m, NqmDenominator::Mean).unwrap();
        assert!((s - 0.2 / 1.4).abs() < 1e-7);
    }

    #[test]
    fn exact_line_calibration() {
        let pairs: Vec<(f64, f64)> = [0.0, 0.05, 0.1, 0.2, 0.3].iter().map(|&x| (x, -2.0 * x + 1.0)).collect();
        let c = calibrate(&pairs, 0.8).unwrap();
        assert!((c.slope + 2.0).abs() < 1e-12);
        assert!((c.intercept - 1.0).abs() < 1e-12);
        assert!((c.nqm_threshold - 0.1).abs() < 1e-12);
        assert_eq!(classify(0.12, &c), Verdict::Flag);
        assert_eq!(classify(c.nqm_threshold, &c), Verdict::Accept);
        assert_eq!(classify(f64::INFINITY, &c), Verdict::Flag);
    }

    #[test]
    fn calibration_rejects_degenerate_and_rising_fits() {
        assert!(matches!(
            calibrate(&[(0.1, 0.9), (0.1, 0.8), (0.1, 0.7)], 0.8),
            Err(Error::Calibration(_))
        ));
        assert!(matches!(
            calibrate(&[(0.1, 0.5), (0.2, 0.6), (0.3, 0.7)], 0.8),
            Err(Error::Calibration(_))
        ));
        assert!(calibrate(&[(0.1, 0.5), (f64::INFINITY, 0.0)], 0.8).is_err());
    }

    #[test]
    fn rates_on_a_fixed_table() {
        let cal = QcCalibration {
            slope: -1.0,
            intercept: 1.0,
            dice_target: 0.8,
            nqm_threshold: 0.2,
            n_points: 3,
            r: -1.0,
        };
        let mk = |d: f64, q: f64| ScoredCase {
            case_id: "c".into(),
            corruption: "clean".into(),
            dice: d,
            nqm: q,
        };
        // fail+flag, fail+miss, good+flag, good+accept
        let r = report(&[mk(0.5, 0.5), mk(0.6, 0.1), mk(0.9, 0.3), mk(0.95, 0.05)], &cal);
        assert_eq!(r.summary.failures, 2);
        assert_eq!(r.summary.detection_rate, 0.5);
        assert_eq!(r.summary.false_negative_rate, 0.25);
        assert_eq!(r.summary.false_positive_rate, 0.25);
        let empty = report(&[], &cal);
        assert_eq!(empty.summary.detection_rate, 1.0);
        assert_eq!(empty.summary.false_negative_rate, 0.0);
    }

    #[test]
    fn spearman_ranks() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}

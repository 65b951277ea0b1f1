//! Split-conformal confidence calibration for per-object class confidence
//! vectors.
//!
//! Nonconformity of a labelled calibration sample is `1 − conf[true]`. For a
//! new vector `c`, the singleton threshold `c* = 1 − (second-highest entry)`
//! is the largest threshold whose prediction band `{l : c_l > 1 − c*}` still
//! holds only the argmax. The calibrated confidence that the argmax is right
//! is the empirical CDF of the nonconformity scores at `c*`, and the
//! perception uncertainty is its complement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{argmax, Detection};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("calibration sample {index}: true class {class} out of range for L = {num_classes}")]
    ClassOutOfRange {
        index: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("confidence vector needs at least 2 classes")]
    TooFewClasses,
    #[error("degenerate band: top-two confidences tie at {0}")]
    DegenerateBand(f64),
    #[error("nonconformity score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMode {
    /// `count / n`
    #[default]
    Empirical,
    /// `count / (n + 1)`, clipped to [0, 1]; the finite-sample conformal correction.
    Conformal,
}

/// Fitted calibrator: sorted nonconformity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconformityModel {
    scores: Vec<f64>,
    n: usize,
    #[serde(default)]
    mode: CdfMode,
}

impl NonconformityModel {
    pub fn from_scores(mut scores: Vec<f64>, mode: CdfMode) -> Result<Self, CalibrationError> {
        if scores.is_empty() {
            return Err(CalibrationError::EmptyCalibrationSet);
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(CalibrationError::ScoreOutOfRange(*bad));
        }
        scores.sort_by(f64::total_cmp);
        let n = scores.len();
        Ok(NonconformityModel { scores, n, mode })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mode(&self) -> CdfMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: CdfMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let raw: NonconformityModel = serde_json::from_str(text)?;
        NonconformityModel::from_scores(raw.scores, raw.mode)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// Fits a calibrator from `(confidence_vector, true_class)` pairs.
pub fn fit_calibrator(calib_set: &[(Vec<f64>, usize)]) -> Result<NonconformityModel, CalibrationError> {
    fit_calibrator_with_mode(calib_set, CdfMode::Empirical)
}

pub fn fit_calibrator_with_mode(
    calib_set: &[(Vec<f64>, usize)],
    mode: CdfMode,
) -> Result<NonconformityModel, CalibrationError> {
    if calib_set.is_empty() {
        return Err(CalibrationError::EmptyCalibrationSet);
    }
    let scores = calib_set
        .iter()
        .enumerate()
        .map(|(index, (conf, class))| {
            conf.get(*class)
                .map(|c| (1.0 - c).clamp(0.0, 1.0))
                .ok_or(CalibrationError::ClassOutOfRange {
                    index,
                    class: *class,
                    num_classes: conf.len(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    NonconformityModel::from_scores(scores, mode)
}

fn top_two(conf: &[f64]) -> Result<(f64, f64), CalibrationError> {
    if conf.len() < 2 {
        return Err(CalibrationError::TooFewClasses);
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &c in conf {
        if c > first {
            second = first;
            first = c;
        } else if c > second {
            second = c;
        }
    }
    Ok((first, second))
}

/// `c* = 1 − second-highest confidence`.
pub fn singleton_threshold(conf: &[f64]) -> Result<f64, CalibrationError> {
    let (_, second) = top_two(conf)?;
    Ok((1.0 - second).clamp(0.0, 1.0))
}

/// Fraction of calibration scores `≤ x` (right-continuous).
pub fn empirical_cdf(model: &NonconformityModel, x: f64) -> f64 {
    let count = model.scores.partition_point(|s| *s <= x) as f64;
    match model.mode {
        CdfMode::Empirical => count / model.n as f64,
        CdfMode::Conformal => (count / (model.n as f64 + 1.0)).clamp(0.0, 1.0),
    }
}

/// Calibrated confidence and perception uncertainty; `u_p = 1 − p` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub c_star: f64,
    pub p_calibrated: f64,
    pub u_p: f64,
}

pub fn calibrate(model: &NonconformityModel, conf: &[f64]) -> Result<Calibrated, CalibrationError> {
    let c_star = singleton_threshold(conf)?;
    let p_calibrated = empirical_cdf(model, c_star);
    Ok(Calibrated {
        c_star,
        p_calibrated,
        u_p: 1.0 - p_calibrated,
    })
}

/// Singleton conformal prediction band.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub class_indices: Vec<usize>,
}

/// `{l : 1 − conf_l < c*}`; with `c*` from [`singleton_threshold`] this is
/// `{argmax}`. A top-two tie leaves the strict inequality undefined.
pub fn prediction_band(conf: &[f64], c_star: f64) -> Result<PredictionBand, CalibrationError> {
    let (first, second) = top_two(conf)?;
    if first == second {
        return Err(CalibrationError::DegenerateBand(first));
    }
    let class_indices: Vec<usize> = conf
        .iter()
        .enumerate()
        .filter(|(_, c)| 1.0 - **c < c_star)
        .map(|(i, _)| i)
        .collect();
    if class_indices.len() != 1 {
        return Err(CalibrationError::DegenerateBand(c_star));
    }
    Ok(PredictionBand { class_indices })
}

/// A detection together with its calibrated confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDetection {
    pub detection: Detection,
    pub predicted_class: usize,
    pub c_star: f64,
    pub p_calibrated: f64,
    pub u_p: f64,
}

impl CalibratedDetection {
    pub fn new(model: &NonconformityModel, detection: Detection) -> Result<Self, CalibrationError> {
        let cal = calibrate(model, &detection.confidence_vector)?;
        Ok(CalibratedDetection {
            predicted_class: argmax(&detection.confidence_vector),
            c_star: cal.c_star,
            p_calibrated: cal.p_calibrated,
            u_p: cal.u_p,
            detection,
        })
    }

    /// Detector's raw top-1 confidence, carried for auditability.
    pub fn raw_confidence(&self) -> f64 {
        self.detection.confidence_vector[self.predicted_class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of test items whose true class is the singleton band's member.
    pub coverage: f64,
    pub mean_p_calibrated: f64,
    pub n: usize,
}

impl CoverageReport {
    /// Three-sigma binomial slack around the mean calibrated confidence.
    pub fn binomial_slack(&self) -> f64 {
        let p = self.mean_p_calibrated;
        3.0 * (p * (1.0 - p) / self.n as f64).sqrt()
    }
}

pub fn coverage_check(model: &NonconformityModel, test_set: &[(Vec<f64>, usize)]) -> Result<CoverageReport, CalibrationError> {
    if test_set.is_empty() {
        return Ok(CoverageReport {
            coverage: 0.0,
            mean_p_calibrated: 0.0,
            n: 0,
        });
    }
    let mut hits = 0usize;
    let mut p_sum = 0.0;
    for (conf, y) in test_set {
        let cal = calibrate(model, conf)?;
        p_sum += cal.p_calibrated;
        if argmax(conf) == *y {
            hits += 1;
        }
    }
    let n = test_set.len();
    Ok(CoverageReport {
        coverage: hits as f64 / n as f64,
        mean_p_calibrated: p_sum / n as f64,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn onehot_at(class: usize, conf: f64) -> (Vec<f64>, usize) {
        let rest = (1.0 - conf) / 2.0;
        let mut v = vec![rest; 3];
        v[class] = conf;
        (v, class)
    }

    fn model(scores: &[f64]) -> NonconformityModel {
        NonconformityModel::from_scores(scores.to_vec(), CdfMode::Empirical).unwrap()
    }

    #[test]
    fn fit_sorts_complements() {
        let set = vec![onehot_at(0, 0.9), onehot_at(1, 0.8), onehot_at(2, 0.5), onehot_at(0, 0.1)];
        let m = fit_calibrator(&set).unwrap();
        let expected = [0.1, 0.2, 0.5, 0.9];
        for (a, b) in m.scores().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rev = set.clone();
        rev.reverse();
        assert_eq!(fit_calibrator(&rev).unwrap(), m);
    }

    #[test]
    fn fit_edge_cases() {
        assert_eq!(fit_calibrator(&[(vec![1.0, 0.0], 0)]).unwrap().scores(), &[0.0]);
        assert_eq!(fit_calibrator(&[]), Err(CalibrationError::EmptyCalibrationSet));
        assert!(matches!(
            fit_calibrator(&[(vec![0.5, 0.5], 2)]),
            Err(CalibrationError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn thresholds() {
        assert!((singleton_threshold(&[0.7, 0.2, 0.1]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(singleton_threshold(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(singleton_threshold(&[0.25; 4]).unwrap(), 0.75);
        assert_eq!(singleton_threshold(&[1.0]), Err(CalibrationError::TooFewClasses));
    }

    #[test]
    fn cdf_counts_and_bounds() {
        let m = model(&[0.05, 0.2, 0.5, 0.9]);
        assert_eq!(empirical_cdf(&m, 0.55), 0.75);
        assert_eq!(empirical_cdf(&m, 0.0), 0.0);
        assert_eq!(empirical_cdf(&m, 0.9), 1.0);
        assert_eq!(empirical_cdf(&m, 0.2), 0.5);
        let c = m.clone().with_mode(CdfMode::Conformal);
        assert_eq!(empirical_cdf(&c, 1.0), 0.8);
    }

    #[test]
    fn calibrate_examples() {
        let m = model(&[0.05, 0.2, 0.5, 0.9]);
        let cal = calibrate(&m, &[0.5, 0.45, 0.05]).unwrap();
        assert!((cal.c_star - 0.55).abs() < 1e-12);
        assert_eq!(cal.p_calibrated, 0.75);
        assert_eq!(cal.u_p, 0.25);

        let sure = calibrate(&m, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!((sure.p_calibrated, sure.u_p), (1.0, 0.0));

        let tied = calibrate(&m, &[0.5, 0.499, 0.001]).unwrap();
        let decisive = calibrate(&m, &[0.9, 0.05, 0.05]).unwrap();
        assert!(tied.u_p >= decisive.u_p);
        assert!((tied.c_star - 0.501).abs() < 1e-12);
    }

    #[test]
    fn bands() {
        let c = [0.7, 0.2, 0.1];
        assert_eq!(prediction_band(&c, singleton_threshold(&c).unwrap()).unwrap().class_indices, vec![0]);
        let c = [0.4, 0.35, 0.25];
        assert_eq!(prediction_band(&c, singleton_threshold(&c).unwrap()).unwrap().class_indices, vec![0]);
        let c = [0.5, 0.5];
        assert_eq!(
            prediction_band(&c, singleton_threshold(&c).unwrap()),
            Err(CalibrationError::DegenerateBand(0.5))
        );
    }

    #[test]
    fn persistence_round_trip() {
        let m = model(&[0.3, 0.1, 0.123456789012345]);
        let json = m.to_json();
        assert!(json.contains("\"n\":3"));
        assert_eq!(NonconformityModel::from_json(&json).unwrap(), m);
    }

    #[test]
    fn perfect_detector_has_full_coverage() {
        let set: Vec<_> = (0..20).map(|i| (vec![0.0, 1.0, 0.0], 1 + 0 * i)).collect();
        let m = fit_calibrator(&set).unwrap();
        let r = coverage_check(&m, &set).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.mean_p_calibrated, 1.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn uncertainty_non_increasing_in_margin(
            scores in prop::collection::vec(0.0f64..=1.0, 1..50),
            top in 0.34f64..1.0,
            g1 in 0.0f64..1.0,
            g2 in 0.0f64..1.0,
        ) {
            // Fixed top-1; second-highest ranges over [(1 - top) / 2, min(top, 1 - top)].
            let m = model(&scores);
            let (lo_s, hi_s) = ((1.0 - top) / 2.0, top.min(1.0 - top));
            let second = |g: f64| lo_s + g * (hi_s - lo_s);
            let (small, big) = if g1 < g2 { (second(g1), second(g2)) } else { (second(g2), second(g1)) };
            let wide = calibrate(&m, &[top, small, 1.0 - top - small]).unwrap();
            let narrow = calibrate(&m, &[top, big, 1.0 - top - big]).unwrap();
            prop_assert!(wide.u_p <= narrow.u_p);
        }

        #[test]
        fn invariant_to_permuting_tail_classes(conf in simplex(5), scores in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let m = model(&scores);
            let mut idx: Vec<usize> = (0..5).collect();
            idx.sort_by(|a, b| conf[*b].total_cmp(&conf[*a]));
            let mut permuted = conf.clone();
            permuted.swap(idx[2], idx[4]);
            prop_assert_eq!(calibrate(&m, &conf).unwrap(), calibrate(&m, &permuted).unwrap());
        }

        #[test]
        fn zero_score_never_lowers_confidence(conf in simplex(4), scores in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let before = calibrate(&model(&scores), &conf).unwrap();
            let mut more = scores.clone();
            more.push(0.0);
            let after = calibrate(&model(&more), &conf).unwrap();
            prop_assert!((0.0..=1.0).contains(&after.p_calibrated));
            prop_assert!(after.p_calibrated >= before.p_calibrated);
            prop_assert_eq!(after.u_p + after.p_calibrated, 1.0);
        }
    }
}

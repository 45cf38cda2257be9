//! Two-stage prediction, GZSL metrics, the ablation harness and the β sweep.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Scalar;
use crate::dataset::{AttributeTable, GestureSequence};
use crate::detector::{classify, decide, DetectorVerdict, Nearest, ThresholdSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sae::zsl_predict;
use crate::trainer::{fit_threshold_set, threshold_assignments, TrainConfig};

/// `2·a·b / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    if acc_s + acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_s * acc_u / (acc_s + acc_u)
    }
}

/// Network outputs for a test pass, kept so that thresholds can be varied
/// without re-running the encoder.
#[derive(Clone, Debug)]
pub struct Scored {
    pub truth: Vec<usize>,
    pub nearest: Vec<Nearest>,
    pub semantic: Vec<Vec<f64>>,
    pub seconds: f64,
}

pub fn score<S: Scalar>(model: &Model<S>, seqs: &[&GestureSequence]) -> Result<Scored> {
    let start = Instant::now();
    let emb = model.embed(seqs, 64)?;
    let protos = model.prototypes();
    let nearest = (0..seqs.len())
        .map(|i| classify(emb.projection.row(i), protos))
        .collect::<Result<Vec<_>>>()?;
    let semantic = (0..seqs.len())
        .map(|i| {
            emb.semantic
                .row(i)
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect()
        })
        .collect();
    Ok(Scored {
        truth: seqs.iter().map(|s| s.class).collect(),
        nearest,
        semantic,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Index into the attribute table's classes.
    pub label: usize,
    /// Detector decision; absent when no detector was used.
    pub verdict: Option<DetectorVerdict>,
}

/// Accepted samples take their nearest seen class; rejected ones go to the
/// SAE and the nearest unseen attribute row.
pub fn route(
    scored: &Scored,
    table: &AttributeTable,
    thresholds: &ThresholdSet,
) -> Result<Vec<Prediction>> {
    let unseen = table.unseen_rows();
    let offset = table.seen_count();
    scored
        .nearest
        .iter()
        .zip(&scored.semantic)
        .map(|(&nearest, z)| {
            let verdict = decide(nearest, thresholds);
            let label = match verdict.seen_label() {
                Some(c) => c,
                None => offset + zsl_predict(z, &unseen)?,
            };
            Ok(Prediction {
                label,
                verdict: Some(verdict),
            })
        })
        .collect()
}

/// Every sample labelled by the SAE against all classes' attribute rows.
pub fn route_sae_only(scored: &Scored, table: &AttributeTable) -> Result<Vec<Prediction>> {
    let rows = table.all_rows();
    scored
        .semantic
        .iter()
        .map(|z| {
            Ok(Prediction {
                label: zsl_predict(z, &rows)?,
                verdict: None,
            })
        })
        .collect()
}

pub fn predict<S: Scalar>(
    model: &Model<S>,
    seqs: &[&GestureSequence],
    table: &AttributeTable,
) -> Result<Vec<Prediction>> {
    let thresholds = model.thresholds.as_ref().ok_or(Error::UnfittedThresholds)?;
    check_model_table(model, table)?;
    route(&score(model, seqs)?, table, thresholds)
}

fn check_model_table<S: Scalar>(model: &Model<S>, table: &AttributeTable) -> Result<()> {
    if table.seen_count() != model.bank.classes || table.width() != model.config.attributes {
        return Err(Error::dim(
            "model vs attribute table",
            &[model.bank.classes, model.config.attributes],
            &[table.seen_count(), table.width()],
        ));
    }
    if table.unseen_count() == 0 {
        return Err(Error::Dataset(
            "attribute table has no unseen classes".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslReport {
    pub acc_s: Option<f64>,
    pub acc_u: Option<f64>,
    pub h: Option<f64>,
    pub ar: Option<f64>,
    pub rr: Option<f64>,
    /// `confusion[true][predicted]` over all classes.
    pub confusion: Vec<Vec<usize>>,
    pub seen_samples: usize,
    pub unseen_samples: usize,
    pub seconds_per_sample: f64,
}

fn fraction(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl GzslReport {
    pub fn from_predictions(
        table: &AttributeTable,
        truth: &[usize],
        preds: &[Prediction],
        seconds: f64,
    ) -> Result<Self> {
        if truth.len() != preds.len() {
            return Err(Error::dim("report", &[truth.len()], &[preds.len()]));
        }
        let n = table.classes.len();
        let mut confusion = vec![vec![0usize; n]; n];
        let (mut seen, mut unseen, mut seen_ok, mut unseen_ok) = (0, 0, 0, 0);
        let (mut accepted, mut rejected, mut judged_seen, mut judged_unseen) = (0, 0, 0, 0);
        for (&y, p) in truth.iter().zip(preds) {
            if y >= n || p.label >= n {
                return Err(Error::Dataset(format!(
                    "label {} outside the {n} classes",
                    y.max(p.label)
                )));
            }
            confusion[y][p.label] += 1;
            let correct = usize::from(p.label == y);
            if table.is_seen(y) {
                seen += 1;
                seen_ok += correct;
                if let Some(v) = p.verdict {
                    judged_seen += 1;
                    accepted += usize::from(v.accepted);
                }
            } else {
                unseen += 1;
                unseen_ok += correct;
                if let Some(v) = p.verdict {
                    judged_unseen += 1;
                    rejected += usize::from(!v.accepted);
                }
            }
        }
        let acc_s = fraction(seen_ok, seen);
        let acc_u = fraction(unseen_ok, unseen);
        Ok(GzslReport {
            acc_s,
            acc_u,
            h: acc_s.zip(acc_u).map(|(s, u)| harmonic_mean(s, u)),
            ar: fraction(accepted, judged_seen),
            rr: fraction(rejected, judged_unseen),
            confusion,
            seen_samples: seen,
            unseen_samples: unseen,
            seconds_per_sample: if truth.is_empty() {
                0.0
            } else {
                seconds / truth.len() as f64
            },
        })
    }
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    seqs: &[&GestureSequence],
    table: &AttributeTable,
) -> Result<GzslReport> {
    let thresholds = model.thresholds.as_ref().ok_or(Error::UnfittedThresholds)?;
    check_model_table(model, table)?;
    let scored = score(model, seqs)?;
    let start = Instant::now();
    let preds = route(&scored, table, thresholds)?;
    let seconds = scored.seconds + start.elapsed().as_secs_f64();
    GzslReport::from_predictions(table, &scored.truth, &preds, seconds)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

/// Metrics table, one row per named report. Timing is left out so that the
/// file depends only on the inputs.
pub fn report_csv(rows: &[(&str, &GzslReport)]) -> String {
    let mut out = String::from("config,acc_s,acc_u,h,ar,rr,seen_samples,unseen_samples\n");
    for (name, r) in rows {
        writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            opt(r.acc_s),
            opt(r.acc_u),
            opt(r.h),
            opt(r.ar),
            opt(r.rr),
            r.seen_samples,
            r.unseen_samples
        )
        .unwrap();
    }
    out
}

pub fn confusion_csv(table: &AttributeTable, report: &GzslReport) -> String {
    let mut out = String::from("true");
    for c in &table.classes {
        write!(out, ",{}", c.name).unwrap();
    }
    out.push('\n');
    for (c, row) in table.classes.iter().zip(&report.confusion) {
        out.push_str(&c.name);
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One-line human-readable metrics; timing is omitted like in [`report_csv`].
pub fn summary(report: &GzslReport) -> String {
    format!(
        "Acc_s {}  Acc_u {}  H {}  AR {}  RR {}  ({} seen / {} unseen samples)",
        pct(report.acc_s),
        pct(report.acc_u),
        pct(report.h),
        pct(report.ar),
        pct(report.rr),
        report.seen_samples,
        report.unseen_samples,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub report: GzslReport,
}

/// Fixed global thresholds tried for the fixed-threshold row.
pub const FIXED_THRESHOLDS: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];

/// Rows for the SAE-only baseline, each fixed global threshold, the
/// separately trained model and the jointly trained one. Both models must
/// already carry fitted thresholds.
pub fn ablation_rows<S: Scalar>(
    joint: &Model<S>,
    two_stage: Option<&Model<S>>,
    test: &[&GestureSequence],
    table: &AttributeTable,
    fixed: &[f64],
) -> Result<Vec<AblationRow>> {
    check_model_table(joint, table)?;
    let learned = joint.thresholds.as_ref().ok_or(Error::UnfittedThresholds)?;
    let scored = score(joint, test)?;
    let mut rows = Vec::new();
    let timed = |preds: Result<Vec<Prediction>>, start: Instant| -> Result<GzslReport> {
        let seconds = scored.seconds + start.elapsed().as_secs_f64();
        GzslReport::from_predictions(table, &scored.truth, &preds?, seconds)
    };
    rows.push(AblationRow {
        name: "sae_only".into(),
        report: timed(route_sae_only(&scored, table), Instant::now())?,
    });
    for &th in fixed {
        let set = ThresholdSet::uniform(joint.bank.classes, joint.bank.per_class, th);
        rows.push(AblationRow {
            name: format!("fixed_threshold_{th}"),
            report: timed(route(&scored, table, &set), Instant::now())?,
        });
    }
    if let Some(model) = two_stage {
        rows.push(AblationRow {
            name: "two_stage".into(),
            report: evaluate(model, test, table)?,
        });
    }
    rows.push(AblationRow {
        name: "end_to_end".into(),
        report: timed(route(&scored, table, learned), Instant::now())?,
    });
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,acc_s,acc_u,h,seconds_per_sample\n");
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{},{},{},{},{}",
            row.name,
            opt(r.acc_s),
            opt(r.acc_u),
            opt(r.h),
            r.seconds_per_sample
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub ar: Option<f64>,
    pub rr: Option<f64>,
    pub h: Option<f64>,
}

/// Refits the thresholds of a trained model for each β and measures AR/RR on `test`.
pub fn sweep_beta<S: Scalar>(
    model: &Model<S>,
    train: &[&GestureSequence],
    test: &[&GestureSequence],
    table: &AttributeTable,
    config: &TrainConfig,
    betas: &[f64],
) -> Result<Vec<SweepRow>> {
    check_model_table(model, table)?;
    let nearest = threshold_assignments(model, train, table, config.threshold_samples)?;
    let scored = score(model, test)?;
    betas
        .iter()
        .map(|&beta| {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!(
                    "beta must be non-negative, got {beta}"
                )));
            }
            let fit = fit_threshold_set(
                &nearest,
                model.bank.classes,
                model.bank.per_class,
                beta,
                config.threshold_lr,
                config.threshold_epochs,
            );
            let preds = route(&scored, table, &fit.thresholds)?;
            let r = GzslReport::from_predictions(table, &scored.truth, &preds, 0.0)?;
            Ok(SweepRow {
                beta,
                ar: r.ar,
                rr: r.rr,
                h: r.h,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,ar,rr\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.beta, opt(r.ar), opt(r.rr)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassInfo;

    fn table() -> AttributeTable {
        let c = |name: &str, seen, attributes: Vec<u8>| ClassInfo {
            name: name.into(),
            seen,
            attributes,
        };
        AttributeTable::new(
            vec!["a".into(), "b".into()],
            vec![
                c("s0", true, vec![0, 0]),
                c("s1", true, vec![1, 0]),
                c("u0", false, vec![0, 1]),
                c("u1", false, vec![1, 1]),
            ],
        )
        .unwrap()
    }

    fn scored(nearest: Vec<Nearest>, semantic: Vec<Vec<f64>>, truth: Vec<usize>) -> Scored {
        Scored {
            truth,
            nearest,
            semantic,
            seconds: 0.0,
        }
    }

    fn near(class: usize, distance: f64) -> Nearest {
        Nearest {
            class,
            prototype: 0,
            distance,
        }
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(0.3, 0.3), 0.3);
        assert_eq!(harmonic_mean(1.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.8906, 0.5833) - 0.7049).abs() < 5e-4);
    }

    #[test]
    fn routing_uses_detector_then_unseen_rows() {
        let t = table();
        let s = scored(
            vec![near(1, 0.0), near(0, 0.9)],
            vec![vec![5.0, 5.0], vec![1.0, 1.0]],
            vec![1, 3],
        );
        let th = ThresholdSet::uniform(2, 1, 0.5);
        let preds = route(&s, &t, &th).unwrap();
        assert_eq!(preds[0].label, 1);
        assert_eq!(preds[1].label, 3);
        let r = GzslReport::from_predictions(&t, &s.truth, &preds, 0.0).unwrap();
        assert_eq!((r.acc_s, r.acc_u, r.h), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!((r.ar, r.rr), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn accept_everything_means_no_unseen_hits() {
        let t = table();
        let s = scored(
            vec![near(0, 0.2), near(1, 0.3), near(0, 0.1)],
            vec![vec![0.0, 1.0]; 3],
            vec![0, 2, 3],
        );
        let th = ThresholdSet::uniform(2, 1, f64::MAX);
        let r =
            GzslReport::from_predictions(&t, &s.truth, &route(&s, &t, &th).unwrap(), 0.0).unwrap();
        assert_eq!(r.rr, Some(0.0));
        assert_eq!(r.acc_u, Some(0.0));
        assert_eq!(r.h, Some(0.0));
    }

    #[test]
    fn sae_only_searches_every_class() {
        let t = table();
        let s = scored(
            vec![near(0, 0.0); 2],
            vec![vec![1.0, 0.1], vec![0.9, 0.8]],
            vec![1, 3],
        );
        let preds = route_sae_only(&s, &t).unwrap();
        assert_eq!(
            preds.iter().map(|p| p.label).collect::<Vec<_>>(),
            vec![1, 3]
        );
        let r = GzslReport::from_predictions(&t, &s.truth, &preds, 0.0).unwrap();
        assert_eq!((r.ar, r.rr), (None, None));
    }

    #[test]
    fn empty_partition_is_absent() {
        let t = table();
        let s = scored(vec![near(0, 0.0)], vec![vec![0.0, 0.0]], vec![0]);
        let r = GzslReport::from_predictions(
            &t,
            &s.truth,
            &route(&s, &t, &ThresholdSet::uniform(2, 1, 1.0)).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(r.acc_s, Some(1.0));
        assert_eq!(r.acc_u, None);
        assert_eq!(r.h, None);
        assert!(report_csv(&[("x", &r)]).contains("x,1,,,1,,1,0"));
    }

    #[test]
    fn confusion_rows_sum_to_counts() {
        let t = table();
        let s = scored(
            vec![near(0, 0.1), near(1, 0.9), near(0, 0.9), near(1, 0.2)],
            vec![
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![0.0, 0.9],
                vec![1.0, 1.0],
            ],
            vec![0, 1, 2, 3],
        );
        let preds = route(&s, &t, &ThresholdSet::uniform(2, 1, 0.5)).unwrap();
        let r = GzslReport::from_predictions(&t, &s.truth, &preds, 0.0).unwrap();
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(
                row.iter().sum::<usize>(),
                s.truth.iter().filter(|&&y| y == c).count()
            );
        }
        let csv = confusion_csv(&t, &r);
        assert_eq!(csv.lines().next().unwrap(), "true,s0,s1,u0,u1");
    }
}

//! Plain-text reports: per-app score records and `key=value` blocks.

use std::fmt::Write as _;

use super::protocol::{ShuffledReport, TemporalReport};
use super::trainer::{Evaluation, TrainOutcome};

pub const SCORES_HEADER: &str = "app_id,score,label,prediction";

/// One CSV line per app, scores to 6 decimals, in app-id order.
pub fn scores_csv(eval: &Evaluation) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for s in &eval.scores {
        writeln!(out, "{},{:.6},{},{}", s.app_id, s.score, s.label, s.prediction).expect("string write");
    }
    out
}

pub fn metrics_block(eval: &Evaluation) -> String {
    format!("{}\n", eval.metrics)
}

/// Epoch, training loss and validation F1 as CSV.
pub fn history_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,val_f1\n");
    for r in &outcome.history {
        let (acc, f1) = r
            .validation
            .map_or((String::new(), String::new()), |m| (format!("{:.6}", m.accuracy), format!("{:.6}", m.f1)));
        writeln!(out, "{},{:.6},{acc},{f1}", r.epoch, r.train_loss).expect("string write");
    }
    out
}

pub fn shuffled_block(report: &ShuffledReport) -> String {
    let mut out = String::from("protocol=shuffled\n");
    for run in &report.runs {
        let m = &run.evaluation.metrics;
        writeln!(
            out,
            "repetition.{}.f1={:.2}\nrepetition.{}.accuracy={:.2}",
            run.plan.repetition, m.f1, run.plan.repetition, m.accuracy
        )
        .expect("string write");
    }
    writeln!(out, "{}", report.mean).expect("string write");
    out
}

pub fn temporal_block(report: &TemporalReport) -> String {
    let s = &report.split;
    format!(
        "protocol=temporal\ntrain_records={}\nvalidation_records={}\ntest_records={}\nexcluded={}\n\
         train_fraction={:.2}\ntest_fraction={:.2}\nbest_epoch={}\n{}\n",
        s.plan.train.len(),
        s.plan.validation.len(),
        s.plan.test.len(),
        s.excluded,
        s.train_fraction,
        s.test_fraction,
        report.run.outcome.best_epoch,
        report.run.evaluation.metrics
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::metrics::compute_metrics;
    use crate::training::trainer::AppScore;

    #[test]
    fn score_lines_use_six_decimals() {
        let eval = Evaluation {
            scores: vec![
                AppScore {
                    app_id: "a".into(),
                    score: 0.5,
                    label: 1,
                    prediction: 1,
                },
                AppScore {
                    app_id: "b".into(),
                    score: 1.0 / 3.0,
                    label: 1,
                    prediction: 0,
                },
            ],
            metrics: compute_metrics(&[1, 0], &[1, 1]).unwrap(),
        };
        assert_eq!(scores_csv(&eval), "app_id,score,label,prediction\na,0.500000,1,1\nb,0.333333,1,0\n");
        let block = metrics_block(&eval);
        assert!(block.contains("recall=0.50\n"));
        assert!(block.contains("fn=1"));
    }
}

//! Ranking metrics and the ablation/ratio-sweep harness.
//!
//! AUC uses the rank statistic with average ranks on tied scores, which
//! matches pairwise comparison counting ties as one half. LogLoss
//! clamps probabilities to [1e-12, 1-1e-12]. ACC counts `score >=
//! threshold` as a positive prediction (boundary inclusive).

use crate::data::{Dataset, DatasetSplit};
use crate::model::VariantFlags;
use crate::search::UserSearchIndex;
use crate::training::{evaluate_tasks, train, TrainConfig, TrainError};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    /// Absent when the labels are single-class.
    pub auc: Option<f64>,
    pub acc: f64,
    pub logloss: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Compute AUC/ACC/LogLoss for probability scores against binary labels.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> MetricReport {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;

    let auc = if n_pos == 0 || n_neg == 0 {
        None
    } else {
        Some(rank_auc(scores, labels, n_pos, n_neg))
    };

    let mut correct = 0usize;
    let mut logloss = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_pos = s >= threshold;
        if predicted_pos == (l == 1) {
            correct += 1;
        }
        let p = s.clamp(1e-12, 1.0 - 1e-12);
        logloss -= if l == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    let n = scores.len().max(1);
    MetricReport {
        auc,
        acc: correct as f64 / n as f64,
        logloss: logloss / n as f64,
        threshold,
        n_pos,
        n_neg,
    }
}

/// Rank-statistic AUC with average ranks over tied scores.
fn rank_auc(scores: &[f64], labels: &[u8], n_pos: usize, n_neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// The ablation variants: the base model, its reduced forms, the
/// label-trick forms, and the plain recurrent baselines.
pub const ABLATION_VARIANTS: [&str; 6] = [
    "starec",
    "starec-time",
    "starec-recent",
    "starec+label",
    "gru",
    "gru+label",
];

/// Flags for a named variant.
pub fn variant_flags(name: &str) -> Option<VariantFlags> {
    let base = VariantFlags::default();
    Some(match name {
        "starec" => base,
        "starec-time" => VariantFlags {
            use_time_decay: false,
            ..base
        },
        "starec-recent" => VariantFlags {
            use_recent_half: false,
            ..base
        },
        "starec+label" => VariantFlags {
            use_label_trick: true,
            ..base
        },
        "gru" => VariantFlags {
            use_search: false,
            use_time_decay: false,
            ..base
        },
        "gru+label" => VariantFlags {
            use_search: false,
            use_time_decay: false,
            use_label_trick: true,
            ..base
        },
        _ => return None,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn run_variant(
    dataset: &Dataset,
    split: &DatasetSplit,
    base: &TrainConfig,
    name: &str,
    flags: VariantFlags,
    recent_fraction: Option<f64>,
) -> AblationRow {
    let mut cfg = base.clone();
    cfg.model.flags = flags;
    if let Some(rf) = recent_fraction {
        cfg.model.search.recent_fraction = rf;
    }
    match train(dataset, split, &cfg) {
        Ok(outcome) => {
            let index = UserSearchIndex::build(dataset);
            let final_tau = crate::training::anneal_temperature(
                cfg.epochs.saturating_sub(1),
                cfg.epochs,
                cfg.tau_start,
                cfg.tau_end,
            );
            match evaluate_tasks(
                &outcome.model,
                dataset,
                &index,
                &split.test,
                final_tau,
                cfg.seed ^ 0x5EED_0EA1u64,
                cfg.acc_threshold,
            ) {
                Ok(metrics) => AblationRow {
                    variant: name.to_string(),
                    metrics: Some(metrics),
                    error: None,
                    best_epoch: Some(outcome.report.best_epoch),
                },
                Err(e) => AblationRow {
                    variant: name.to_string(),
                    metrics: None,
                    error: Some(e.to_string()),
                    best_epoch: None,
                },
            }
        }
        Err(e) => AblationRow {
            variant: name.to_string(),
            metrics: None,
            error: Some(e.to_string()),
            best_epoch: None,
        },
    }
}

/// Train and evaluate every ablation variant plus the recent/retrieved
/// composition-ratio sweep, all with a shared seed and schedule.
/// Variants run concurrently; a failing variant contributes an error
/// row instead of aborting the table.
pub fn run_ablation(
    dataset: &Dataset,
    split: &DatasetSplit,
    base: &TrainConfig,
) -> Result<AblationTable, TrainError> {
    let ratio_sweep = [0.25, 0.5, 0.75];
    let mut jobs: Vec<(String, VariantFlags, Option<f64>)> = ABLATION_VARIANTS
        .iter()
        .map(|name| (name.to_string(), variant_flags(name).unwrap(), None))
        .collect();
    for rf in ratio_sweep {
        jobs.push((
            format!("starec@recent={:.2}", rf),
            VariantFlags::default(),
            Some(rf),
        ));
    }

    let rows: Vec<AblationRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(name, flags, rf)| {
                scope.spawn(move || run_variant(dataset, split, base, name, *flags, *rf))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("variant thread")).collect()
    });
    Ok(AblationTable { rows })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_else(|| "-".into())
}

/// Tab-separated table of per-variant metrics.
pub fn write_ablation_table<W: Write>(mut w: W, table: &AblationTable) -> std::io::Result<()> {
    writeln!(w, "variant\tauc\tacc\tlogloss\tbest_epoch\terror")?;
    for row in &table.rows {
        match &row.metrics {
            Some(m) => writeln!(
                w,
                "{}\t{}\t{:.6}\t{:.6}\t{}\t",
                row.variant,
                fmt_metric(m.auc),
                m.acc,
                m.logloss,
                row.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            )?,
            None => writeln!(
                w,
                "{}\t-\t-\t-\t\t{}",
                row.variant,
                row.error.as_deref().unwrap_or("failed")
            )?,
        }
    }
    Ok(())
}

/// Per-epoch loss/AUC as delimiter-separated text for plotting.
pub fn write_epoch_table<W: Write>(
    mut w: W,
    report: &crate::training::TrainReport,
) -> std::io::Result<()> {
    writeln!(w, "epoch\ttrain_loss\tval_auc\tval_acc\tval_logloss\ttau\tlr")?;
    for r in &report.epochs {
        writeln!(
            w,
            "{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.8}",
            r.epoch,
            r.train_loss,
            fmt_metric(r.val_auc),
            r.val_acc,
            r.val_logloss,
            r.tau,
            r.lr
        )?;
    }
    Ok(())
}

/// Minimal self-contained SVG line plot of train loss and validation
/// AUC against the epoch index.
pub fn write_epoch_plot(path: &Path, report: &crate::training::TrainReport) -> std::io::Result<()> {
    let losses: Vec<f64> = report.epochs.iter().map(|r| r.train_loss).collect();
    let aucs: Vec<f64> = report
        .epochs
        .iter()
        .map(|r| r.val_auc.unwrap_or(0.5))
        .collect();
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let polyline = |ys: &[f64], color: &str| -> String {
        if ys.is_empty() {
            return String::new();
        }
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / (ys.len().max(2) - 1) as f64;
                let yy = h - pad - (h - 2.0 * pad) * (y - lo) / span;
                format!("{:.1},{:.1}", x, yy)
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color,
            pts.join(" ")
        )
    };
    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\
         <text x=\"{pad}\" y=\"20\" font-size=\"13\">train loss (red), validation AUC (blue) by epoch</text>\
         {}{}</svg>",
        polyline(&losses, "#c0392b"),
        polyline(&aucs, "#2980b9"),
    );
    std::fs::write(path, svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Brute-force pairwise AUC: ties count one half. The independent
    /// oracle for the rank-statistic implementation.
    pub(crate) fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_separation() {
        let m = compute_metrics(&[0.9, 0.1], &[1, 0], 0.5);
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.acc, 1.0);
    }

    #[test]
    fn half_correct_pairs() {
        // pairs: (0.9 vs 0.8) correct, (0.1 vs 0.8) incorrect -> 0.5
        let m = compute_metrics(&[0.9, 0.8, 0.1], &[1, 0, 1], 0.5);
        assert!((m.auc.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn threshold_boundary_counts_as_positive() {
        let m = compute_metrics(&[0.5], &[1], 0.5);
        assert_eq!(m.acc, 1.0);
        assert!((m.logloss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_class_has_no_auc() {
        let m = compute_metrics(&[0.2, 0.9], &[1, 1], 0.5);
        assert_eq!(m.auc, None);
        assert!(m.logloss > 0.0);
    }

    #[test]
    fn rank_auc_matches_bruteforce_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for trial in 0..200 {
            let n = rng.random_range(2..200);
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..7) as f64) / 6.0)
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let ours = compute_metrics(&scores, &labels, 0.5).auc;
            let brute = auc_bruteforce(&scores, &labels);
            match (ours, brute) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-12, "trial {}: {} vs {}", trial, a, b)
                }
                (None, None) => {}
                other => panic!("trial {}: disagreement {:?}", trial, other),
            }
        }
    }

    #[test]
    fn constant_predictor_logloss_is_binary_entropy() {
        let n = 1000;
        let k = 273; // positives
        let rate = k as f64 / n as f64;
        let scores = vec![rate; n];
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < k)).collect();
        let m = compute_metrics(&scores, &labels, 0.5);
        let entropy = -(rate * rate.ln() + (1.0 - rate) * (1.0 - rate).ln());
        assert!((m.logloss - entropy).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_permutation(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..60),
            seed in 0u64..1000,
        ) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l).collect();
            let base = compute_metrics(&scores, &labels, 0.5);
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
            let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let perm = compute_metrics(&ps, &pl, 0.5);
            match (base.auc, perm.auc) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
            prop_assert!((base.acc - perm.acc).abs() < 1e-12);
            prop_assert!((base.logloss - perm.logloss).abs() < 1e-9);
        }
    }

    #[test]
    fn ablation_covers_variants_and_sweep() {
        use crate::data::temporal_split;
        use crate::synth::{generate_synthetic, SyntheticSpec};
        let ds = generate_synthetic(&SyntheticSpec::periodic(24, 16, 4, 3)).unwrap();
        let split = temporal_split(&ds);
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 12,
            seed: 4,
            ..Default::default()
        };
        cfg.model.embed_dim = 4;
        cfg.model.hidden_dim = 4;
        cfg.model.mlp_hidden = (8, 4);
        cfg.model.search.seq_len = 4;
        cfg.model.search.n_similar_users = 1;
        let table = run_ablation(&ds, &split.split, &cfg).unwrap();
        assert_eq!(table.rows.len(), 9); // 6 variants + 3 ratio rows
        for row in &table.rows {
            assert!(row.metrics.is_some(), "variant {} failed: {:?}", row.variant, row.error);
        }
        let mut buf = Vec::new();
        write_ablation_table(&mut buf, &table).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("starec+label"));
        assert!(text.contains("starec@recent=0.25"));
    }
}

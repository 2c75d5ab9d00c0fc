//! Head importance: the expected absolute gradient of the loss with
//! respect to each head's gate, evaluated at the gate's current value
//! (1 unless the context mask zeroes it).
//!
//! The per-example scalar is the contraction of the head's full context
//! with the loss gradient, summed over every position and channel of the
//! sample; the absolute value is taken per example and averaged. Scores are
//! raw scale, not per-layer normalized, so distribution statistics over all
//! heads stay meaningful.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{count_heads, ForwardOpts, HeadId, LossMode, MaskSet, Model, ModelConfig};
use crate::tensor::Tape;

/// Per-head importance scores plus provenance.
#[derive(Debug, Clone)]
pub struct ImportanceReport {
    pub scores: BTreeMap<HeadId, f32>,
    pub num_samples: usize,
    pub dataset_tag: String,
    pub step: u64,
}

impl ImportanceReport {
    pub fn score(&self, head: HeadId) -> f32 {
        self.scores[&head]
    }
}

/// Heads bucketed by descending importance; group 0 is the most important.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadGroups {
    pub groups: Vec<Vec<HeadId>>,
    pub group_size: usize,
}

/// Per-head sums of |per-example gate gradient| over one batch, plus the
/// example count. Gradients come from a sentence-sum forward pass so each
/// gate component carries exactly d L(x) / d gate.
fn batch_abs_grad_sums(
    model: &Model,
    batch: &Batch,
    mask_context: &MaskSet,
    label_smoothing: f32,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<BTreeMap<HeadId, f64>> {
    let mut tape = Tape::new();
    let opts = ForwardOpts {
        dropout_rng,
        loss_mode: LossMode::SentenceSum,
        label_smoothing,
        gate_overrides: None,
    };
    let out = model.forward(&mut tape, batch, mask_context, opts)?;
    tape.backward(out.loss)?;
    let mut sums = BTreeMap::new();
    for tap in &out.heads {
        let sum = match tape.grad(tap.gate) {
            Some(g) => g.iter().map(|&v| (v as f64).abs()).sum(),
            None => 0.0,
        };
        sums.insert(tap.head, sum);
    }
    Ok(sums)
}

/// Importance over one batch; the per-batch estimator the masked training
/// loop uses, with the training pass's dropout draws when given.
pub fn batch_importance(
    model: &Model,
    batch: &Batch,
    mask_context: &MaskSet,
    label_smoothing: f32,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<ImportanceReport> {
    let sums = batch_abs_grad_sums(model, batch, mask_context, label_smoothing, dropout_rng)?;
    let n = batch.size;
    Ok(ImportanceReport {
        scores: sums.into_iter().map(|(h, s)| (h, (s / n as f64) as f32)).collect(),
        num_samples: n,
        dataset_tag: String::new(),
        step: 0,
    })
}

/// Mean absolute gate gradient over all examples in `batches`, in eval
/// mode. Heads masked by `mask_context` are still reported (the gradient of
/// a zeroed branch), not skipped.
pub fn estimate_importance(
    model: &Model,
    batches: &[Batch],
    mask_context: &MaskSet,
    label_smoothing: f32,
    dataset_tag: &str,
    step: u64,
) -> Result<ImportanceReport> {
    if batches.is_empty() {
        return Err(Error::usage("estimate_importance: no batches given"));
    }
    let mut totals: BTreeMap<HeadId, f64> = BTreeMap::new();
    let mut n = 0usize;
    for batch in batches {
        let sums = batch_abs_grad_sums(model, batch, mask_context, label_smoothing, None)?;
        for (h, s) in sums {
            *totals.entry(h).or_insert(0.0) += s;
        }
        n += batch.size;
    }
    Ok(ImportanceReport {
        scores: totals.into_iter().map(|(h, s)| (h, (s / n as f64) as f32)).collect(),
        num_samples: n,
        dataset_tag: dataset_tag.to_string(),
        step,
    })
}

/// Heads in descending importance order, ties broken by ascending flat id
/// (which is the natural [`HeadId`] order).
fn sorted_heads(report: &ImportanceReport) -> Vec<HeadId> {
    let mut heads: Vec<HeadId> = report.scores.keys().copied().collect();
    heads.sort_by(|a, b| {
        report.scores[b].partial_cmp(&report.scores[a]).unwrap().then(a.cmp(b))
    });
    heads
}

/// Split heads into `num_groups` contiguous chunks of the descending sort;
/// earlier groups take the remainder when the division is uneven.
pub fn partition_groups(report: &ImportanceReport, num_groups: usize) -> Result<HeadGroups> {
    if num_groups < 1 {
        return Err(Error::usage("partition_groups: need at least one group"));
    }
    let total = report.scores.len();
    if num_groups > total {
        return Err(Error::usage(format!(
            "partition_groups: {} groups for {} heads",
            num_groups, total
        )));
    }
    let sorted = sorted_heads(report);
    let base = total / num_groups;
    let rem = total % num_groups;
    let mut groups = Vec::with_capacity(num_groups);
    let mut at = 0usize;
    for g in 0..num_groups {
        let take = base + usize::from(g < rem);
        groups.push(sorted[at..at + take].to_vec());
        at += take;
    }
    let group_size = groups.first().map(Vec::len).unwrap_or(0);
    Ok(HeadGroups { groups, group_size })
}

/// The `n` most important heads, ties broken by ascending flat id.
pub fn top_n_heads(report: &ImportanceReport, n: usize) -> Result<Vec<HeadId>> {
    if n > report.scores.len() {
        return Err(Error::usage(format!(
            "top_n_heads: n={} exceeds {} heads",
            n,
            report.scores.len()
        )));
    }
    Ok(sorted_heads(report)[..n].to_vec())
}

/// Arithmetic mean and population variance (divide by N) of the scores.
pub fn distribution_stats(report: &ImportanceReport) -> (f32, f32) {
    assert!(!report.scores.is_empty(), "distribution_stats: empty report");
    let n = report.scores.len() as f64;
    let mean: f64 = report.scores.values().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 =
        report.scores.values().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var as f32)
}

pub const IMPORTANCE_CSV_HEADER: &str = "flat_id,attn_type,layer,head,importance";

/// Serialize a report in flat-id order.
pub fn importance_csv(report: &ImportanceReport, config: &ModelConfig) -> String {
    let mut out = String::from(IMPORTANCE_CSV_HEADER);
    out.push('\n');
    for (&head, &score) in &report.scores {
        writeln!(
            out,
            "{},{},{},{},{}",
            head.flat(config),
            head.attn_type,
            head.layer,
            head.head,
            score
        )
        .unwrap();
    }
    out
}

pub fn write_importance_csv(
    report: &ImportanceReport,
    config: &ModelConfig,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, importance_csv(report, config))?;
    Ok(())
}

/// Parse a report written by [`write_importance_csv`]. Sample count and
/// provenance fields are not stored in the CSV and come back empty.
pub fn read_importance_csv(path: &Path, config: &ModelConfig) -> Result<ImportanceReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {}", path.display(), e)))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == IMPORTANCE_CSV_HEADER => {}
        other => {
            return Err(Error::data(format!(
                "{}: expected header '{}', got {:?}",
                path.display(),
                IMPORTANCE_CSV_HEADER,
                other
            )))
        }
    }
    let mut scores = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!(
                "{}:{}: expected 5 fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let flat: usize = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("{}:{}: bad flat id", path.display(), i + 2)))?;
        let head = HeadId::from_flat(flat, config)
            .map_err(|e| Error::data(format!("{}:{}: {}", path.display(), i + 2, e)))?;
        let score: f32 = fields[4]
            .parse()
            .map_err(|_| Error::data(format!("{}:{}: bad importance", path.display(), i + 2)))?;
        scores.insert(head, score);
    }
    if scores.len() != count_heads(config) {
        return Err(Error::data(format!(
            "{}: {} rows for a model with {} heads",
            path.display(),
            scores.len(),
            count_heads(config)
        )));
    }
    Ok(ImportanceReport { scores, num_samples: 0, dataset_tag: String::new(), step: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{epoch_batches, gen_reversal_task, Batch, BOS, EOS, PAD};
    use crate::model::AttnType;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            layers: 1,
            heads_per_layer: 2,
            d_model: 8,
            d_ff: 16,
            vocab_src: 12,
            vocab_tgt: 12,
            dropout: 0.0,
            max_len: 16,
            rescale_heads: false,
        };
        Model::new(cfg, seed).unwrap()
    }

    fn small_batches() -> Vec<Batch> {
        let corpus = gen_reversal_task(8, 3..=5, 60, 4).unwrap();
        epoch_batches(&corpus.train, 6, 0, false, 0)
    }

    fn synthetic_report(cfg: &ModelConfig, scores: &[f32]) -> ImportanceReport {
        let heads = cfg.all_heads();
        assert_eq!(heads.len(), scores.len());
        ImportanceReport {
            scores: heads.into_iter().zip(scores.iter().copied()).collect(),
            num_samples: 1,
            dataset_tag: "synthetic".into(),
            step: 0,
        }
    }

    #[test]
    fn empty_batch_list_is_a_usage_error() {
        let model = tiny_model(1);
        let err =
            estimate_importance(&model, &[], &MaskSet::all_ones(), 0.0, "dev", 0).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn constant_loss_gives_zero_importance() {
        let model = tiny_model(2);
        // All targets pad: the loss is identically zero.
        let batch = Batch {
            src: vec![4, 5],
            tgt_in: vec![BOS, PAD],
            tgt_out: vec![PAD, PAD],
            size: 1,
            src_len: 2,
            tgt_len: 2,
        };
        let report =
            estimate_importance(&model, &[batch], &MaskSet::all_ones(), 0.1, "dev", 0).unwrap();
        for (&h, &s) in &report.scores {
            assert_eq!(s, 0.0, "head {:?}", h);
        }
    }

    #[test]
    fn duplicating_samples_leaves_importance_unchanged() {
        let model = tiny_model(3);
        let batches = small_batches();
        let once =
            estimate_importance(&model, &batches[..2], &MaskSet::all_ones(), 0.1, "dev", 0)
                .unwrap();
        let doubled: Vec<Batch> =
            batches[..2].iter().chain(batches[..2].iter()).cloned().collect();
        let twice =
            estimate_importance(&model, &doubled, &MaskSet::all_ones(), 0.1, "dev", 0).unwrap();
        for (h, s) in &once.scores {
            assert_eq!(*s, twice.scores[h], "head {:?}", h);
        }
        assert_eq!(twice.num_samples, 2 * once.num_samples);
    }

    #[test]
    fn scores_cover_every_head_and_are_non_negative() {
        let model = tiny_model(4);
        let report = estimate_importance(
            &model,
            &small_batches(),
            &MaskSet::all_ones(),
            0.1,
            "dev",
            0,
        )
        .unwrap();
        assert_eq!(report.scores.len(), count_heads(&model.config));
        assert!(report.scores.values().all(|&v| v >= 0.0));
        assert!(report.scores.values().any(|&v| v > 0.0));
    }

    #[test]
    fn masked_heads_are_still_reported() {
        let model = tiny_model(5);
        let masked = HeadId::new(AttnType::EncSelf, 0, 0);
        let ctx = MaskSet::from_masked([masked]);
        let report =
            estimate_importance(&model, &small_batches(), &ctx, 0.1, "dev", 0).unwrap();
        assert!(report.scores.contains_key(&masked));
        // The zeroed branch still gets a well-defined (usually non-zero)
        // gradient.
        assert!(report.scores[&masked] >= 0.0);
    }

    #[test]
    fn gate_gradient_matches_finite_difference_on_the_gate() {
        let model = tiny_model(6);
        let batch = Batch {
            src: vec![4, 5],
            tgt_in: vec![BOS, 6],
            tgt_out: vec![6, EOS],
            size: 1,
            src_len: 2,
            tgt_len: 2,
        };
        let report =
            batch_importance(&model, &batch, &MaskSet::all_ones(), 0.1, None).unwrap();

        let eps = 1e-3f32;
        for head in model.config.all_heads() {
            let loss_at = |gate: f32| {
                let mut over = BTreeMap::new();
                over.insert(head, gate);
                let mut tape = Tape::new();
                let opts = ForwardOpts {
                    dropout_rng: None,
                    loss_mode: LossMode::SentenceSum,
                    label_smoothing: 0.1,
                    gate_overrides: Some(&over),
                };
                let out = model.forward(&mut tape, &batch, &MaskSet::all_ones(), opts).unwrap();
                tape.scalar(out.loss)
            };
            let fd = ((loss_at(1.0) - loss_at(1.0 - eps)) / eps).abs();
            let got = report.scores[&head];
            let denom = fd.abs().max(1e-6);
            assert!(
                (got - fd).abs() / denom < 5e-2,
                "head {:?}: gate-grad {} vs fd {}",
                head,
                got,
                fd
            );
        }
    }

    #[test]
    fn gate_gradient_equals_explicit_context_contraction() {
        let model = tiny_model(7);
        let batch = Batch {
            src: vec![4, 5, 6, 7, 8, 9],
            tgt_in: vec![BOS, 6, 7, BOS, 8, PAD],
            tgt_out: vec![6, 7, EOS, 8, EOS, PAD],
            size: 2,
            src_len: 3,
            tgt_len: 3,
        };
        let mut tape = Tape::new();
        let opts = ForwardOpts {
            dropout_rng: None,
            loss_mode: LossMode::SentenceSum,
            label_smoothing: 0.1,
            gate_overrides: None,
        };
        let out = model.forward(&mut tape, &batch, &MaskSet::all_ones(), opts).unwrap();
        tape.backward(out.loss).unwrap();
        for tap in &out.heads {
            let gate_grad = tape.grad(tap.gate).unwrap().to_vec();
            let ctx = tape.data(tap.context);
            let dgated = tape.grad(tap.gated).expect("context grad missing");
            let row = ctx.len() / batch.size;
            for b in 0..batch.size {
                let contraction: f64 = (0..row)
                    .map(|j| ctx[b * row + j] as f64 * dgated[b * row + j] as f64)
                    .sum();
                assert!(
                    (contraction as f32 - gate_grad[b]).abs() < 1e-5,
                    "head {:?} example {}: contraction {} vs gate grad {}",
                    tap.head,
                    b,
                    contraction,
                    gate_grad[b]
                );
            }
        }
    }

    #[test]
    fn swapping_head_parameters_swaps_their_importance() {
        let mut model = tiny_model(8);
        let batches = small_batches();
        let before = estimate_importance(
            &model,
            &batches[..3],
            &MaskSet::all_ones(),
            0.1,
            "dev",
            0,
        )
        .unwrap();

        // Swap head 0 and head 1 of the encoder self-attention layer:
        // column blocks of wq/wk/wv and their bias slices, row block of wo.
        let d = model.config.d_model;
        let dk = model.config.head_dim();
        for name in ["enc.0.self.wq", "enc.0.self.wk", "enc.0.self.wv"] {
            let idx = model.param_index(name).unwrap();
            let data = &mut model.params_mut()[idx].data;
            for r in 0..d {
                for c in 0..dk {
                    data.swap(r * d + c, r * d + dk + c);
                }
            }
        }
        for name in ["enc.0.self.bq", "enc.0.self.bk", "enc.0.self.bv"] {
            let idx = model.param_index(name).unwrap();
            let data = &mut model.params_mut()[idx].data;
            for c in 0..dk {
                data.swap(c, dk + c);
            }
        }
        let idx = model.param_index("enc.0.self.wo").unwrap();
        let data = &mut model.params_mut()[idx].data;
        for r in 0..dk {
            for c in 0..d {
                data.swap(r * d + c, (dk + r) * d + c);
            }
        }

        let after = estimate_importance(
            &model,
            &batches[..3],
            &MaskSet::all_ones(),
            0.1,
            "dev",
            0,
        )
        .unwrap();
        let h0 = HeadId::new(AttnType::EncSelf, 0, 0);
        let h1 = HeadId::new(AttnType::EncSelf, 0, 1);
        let rel = |a: f32, b: f32| (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
        assert!(rel(before.scores[&h0], after.scores[&h1]) < 1e-3);
        assert!(rel(before.scores[&h1], after.scores[&h0]) < 1e-3);
        // Heads in other layers are numerically unchanged.
        let other = HeadId::new(AttnType::DecSelf, 0, 0);
        assert!(rel(before.scores[&other], after.scores[&other]) < 1e-3);
    }

    #[test]
    fn partition_examples() {
        // 144 heads in 8 groups of 18.
        let mut cfg = ModelConfig::desk(8, 8);
        cfg.layers = 6;
        cfg.heads_per_layer = 8;
        cfg.d_model = 64;
        let scores: Vec<f32> = (0..144).map(|i| (i * 37 % 144) as f32).collect();
        let report = synthetic_report(&cfg, &scores);
        let groups = partition_groups(&report, 8).unwrap();
        assert_eq!(groups.groups.len(), 8);
        assert!(groups.groups.iter().all(|g| g.len() == 18));
        assert_eq!(groups.group_size, 18);
        // Ordering invariant: min of group i >= max of group i+1.
        for w in groups.groups.windows(2) {
            let min_prev =
                w[0].iter().map(|h| report.scores[h]).fold(f32::INFINITY, f32::min);
            let max_next =
                w[1].iter().map(|h| report.scores[h]).fold(f32::NEG_INFINITY, f32::max);
            assert!(min_prev >= max_next);
        }
    }

    #[test]
    fn equal_scores_partition_into_flat_index_blocks() {
        let cfg = ModelConfig::desk(8, 8);
        let report = synthetic_report(&cfg, &[1.0; 24]);
        let groups = partition_groups(&report, 8).unwrap();
        let all = cfg.all_heads();
        for (g, group) in groups.groups.iter().enumerate() {
            assert_eq!(group.as_slice(), &all[g * 3..(g + 1) * 3]);
        }
    }

    #[test]
    fn group_one_is_the_top_of_a_full_sort() {
        let cfg = ModelConfig::desk(8, 8);
        let scores: Vec<f32> = (0..24).map(|i| ((i * 71 + 13) % 29) as f32 * 0.37).collect();
        let report = synthetic_report(&cfg, &scores);
        let groups = partition_groups(&report, 8).unwrap();
        // Independent oracle: full descending sort.
        let mut sorted: Vec<(f32, HeadId)> =
            report.scores.iter().map(|(&h, &s)| (s, h)).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top3: Vec<HeadId> = sorted[..3].iter().map(|&(_, h)| h).collect();
        assert_eq!(groups.groups[0], top3);
    }

    #[test]
    fn uneven_partition_gives_earlier_groups_the_remainder() {
        let cfg = ModelConfig::desk(8, 8); // 24 heads
        let scores: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let report = synthetic_report(&cfg, &scores);
        let groups = partition_groups(&report, 5).unwrap();
        let sizes: Vec<usize> = groups.groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 5, 4]);
        assert!(partition_groups(&report, 0).is_err());
        assert!(partition_groups(&report, 25).is_err());
    }

    #[test]
    fn top_n_examples() {
        let cfg = ModelConfig {
            layers: 1,
            heads_per_layer: 1,
            d_model: 8,
            d_ff: 8,
            vocab_src: 8,
            vocab_tgt: 8,
            dropout: 0.0,
            max_len: 8,
            rescale_heads: false,
        };
        // 3 heads with scores [3, 1, 2] by flat id.
        let report = synthetic_report(&cfg, &[3.0, 1.0, 2.0]);
        let all = cfg.all_heads();
        assert_eq!(top_n_heads(&report, 1).unwrap(), vec![all[0]]);
        assert_eq!(top_n_heads(&report, 3).unwrap(), vec![all[0], all[2], all[1]]);
        assert_eq!(top_n_heads(&report, 0).unwrap(), Vec::<HeadId>::new());
        assert!(top_n_heads(&report, 4).is_err());
        // Ties break by ascending flat id.
        let tied = synthetic_report(&cfg, &[5.0, 5.0, 1.0]);
        assert_eq!(top_n_heads(&tied, 2).unwrap(), vec![all[0], all[1]]);
    }

    #[test]
    fn ranking_is_invariant_under_score_scaling() {
        let cfg = ModelConfig::desk(8, 8);
        let scores: Vec<f32> = (0..24).map(|i| ((i * 31 + 7) % 24) as f32 * 0.11).collect();
        let report = synthetic_report(&cfg, &scores);
        let scaled = synthetic_report(&cfg, &scores.iter().map(|s| s * 3.5).collect::<Vec<_>>());
        assert_eq!(
            partition_groups(&report, 8).unwrap(),
            partition_groups(&scaled, 8).unwrap()
        );
        assert_eq!(top_n_heads(&report, 5).unwrap(), top_n_heads(&scaled, 5).unwrap());
    }

    #[test]
    fn loss_scaling_scales_gate_gradients() {
        // Scale covariance at the tape level: loss * c multiplies every
        // gate gradient by c.
        let model = tiny_model(9);
        let batch = small_batches()[0].clone();
        let grads_for = |c: f32| {
            let mut tape = Tape::new();
            let opts = ForwardOpts {
                dropout_rng: None,
                loss_mode: LossMode::SentenceSum,
                label_smoothing: 0.1,
                gate_overrides: None,
            };
            let out = model.forward(&mut tape, &batch, &MaskSet::all_ones(), opts).unwrap();
            let scaled = tape.scale(out.loss, c).unwrap();
            tape.backward(scaled).unwrap();
            out.heads
                .iter()
                .map(|t| tape.grad(t.gate).unwrap().to_vec())
                .collect::<Vec<_>>()
        };
        let base = grads_for(1.0);
        let tripled = grads_for(3.0);
        for (g1, g3) in base.iter().zip(&tripled) {
            for (a, b) in g1.iter().zip(g3) {
                // Exact up to f32 rounding along the backward chain.
                let tol = 1e-4 * (a * 3.0).abs().max(b.abs()) + 1e-7;
                assert!((a * 3.0 - b).abs() <= tol, "{} vs {}", a * 3.0, b);
            }
        }
    }

    #[test]
    fn stats_examples() {
        let cfg = ModelConfig::desk(8, 8);
        let constant = synthetic_report(&cfg, &[2.5; 24]);
        let (mean, var) = distribution_stats(&constant);
        assert_eq!(mean, 2.5);
        assert_eq!(var, 0.0);

        let cfg1 = ModelConfig {
            layers: 1,
            heads_per_layer: 1,
            d_model: 8,
            d_ff: 8,
            vocab_src: 8,
            vocab_tgt: 8,
            dropout: 0.0,
            max_len: 8,
            rescale_heads: false,
        };
        let report = synthetic_report(&cfg1, &[1.0, 2.0, 3.0]);
        let (mean, var) = distribution_stats(&report);
        assert!((mean - 2.0).abs() < 1e-7);
        assert!((var - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn importance_csv_roundtrip() {
        let model = tiny_model(10);
        let report = estimate_importance(
            &model,
            &small_batches()[..2],
            &MaskSet::all_ones(),
            0.1,
            "dev",
            7,
        )
        .unwrap();
        let csv = importance_csv(&report, &model.config);
        assert!(csv.starts_with(IMPORTANCE_CSV_HEADER));
        let dir = std::env::temp_dir().join(format!("hm-imp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("importance.csv");
        write_importance_csv(&report, &model.config, &path).unwrap();
        let back = read_importance_csv(&path, &model.config).unwrap();
        assert_eq!(report.scores, back.scores);
        std::fs::remove_dir_all(&dir).ok();
    }
}

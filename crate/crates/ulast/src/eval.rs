//! Held-out evaluation on generated sequences.

use serde::Serialize;
use ulast_core::net::Model;
use ulast_core::runtime::{evaluate, track_sequence, RuntimeConfig, TrackResult};
use ulast_core::scenes::{generate_sequence, SyntheticSequence};

use crate::config::RunConfig;
use crate::error::Result;
use crate::parallel::map_ordered;

/// Held-out sequences: seeds `eval_seed + i`, disjoint from the training
/// stream, which draws its seeds from the run seed.
pub fn heldout_set(cfg: &RunConfig) -> Result<Vec<SyntheticSequence>> {
    let spec = cfg.eval_scene();
    (0..cfg.eval_sequences as u64).map(|i| Ok(generate_sequence(&spec, cfg.eval_seed + i)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceMetrics {
    pub seq_id: String,
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
    pub sequences: Vec<SequenceMetrics>,
}

/// Tracks every sequence from its first ground-truth box and scores frames
/// 1.. (frame 0 is the given initialization).
pub fn evaluate_model(
    model: &Model,
    runtime: &RuntimeConfig,
    seqs: &[SyntheticSequence],
    threads: usize,
) -> Result<(EvalSummary, Vec<Vec<TrackResult>>)> {
    let runs = map_ordered(seqs, threads, |seq| -> Result<(SequenceMetrics, Vec<TrackResult>)> {
        let results = track_sequence(model, runtime, &seq.frames, &seq.gt_boxes[0])?;
        let boxes: Vec<_> = results.iter().skip(1).map(|r| r.b).collect();
        let m = evaluate(&boxes, &seq.gt_boxes[1..])?;
        let row = SequenceMetrics {
            seq_id: seq.seq_id.clone(),
            mean_iou: m.mean_iou,
            success_auc: m.success_auc,
            precision: m.precision,
        };
        Ok((row, results))
    });
    let mut rows = Vec::with_capacity(seqs.len());
    let mut tracks = Vec::with_capacity(seqs.len());
    for r in runs {
        let (row, t) = r?;
        rows.push(row);
        tracks.push(t);
    }
    let n = rows.len().max(1) as f64;
    let summary = EvalSummary {
        mean_iou: rows.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        success_auc: rows.iter().map(|r| r.success_auc).sum::<f64>() / n,
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        sequences: rows,
    };
    Ok((summary, tracks))
}

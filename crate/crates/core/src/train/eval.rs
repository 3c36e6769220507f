use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CountFilter, Origin};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::model::{ClickPrompt, SegModel, Segmenter};
use crate::prompting::{simulate_interaction, Interaction, Protocol};

/// Large-backbone reference results (Dice, IoU in percent) shown beside
/// desk-scale rows; never compared numerically.
pub const REFERENCE_EVAL_ROWS: [(&str, Protocol, f64, f64); 3] = [
    ("SAM", Protocol::OnePoint, 81.6, 70.4),
    ("MED_SA", Protocol::OnePoint, 92.6, 84.1),
    ("GLMED_SA", Protocol::OnePoint, 95.1, 85.5),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub total_params: usize,
    /// Parameters updated when this variant is trained under the freeze
    /// policy: adapters only, zero for the bare base.
    pub trainable_params: usize,
    pub dice: f64,
    pub iou: f64,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub clicks: Vec<ClickPrompt>,
    pub round_dice: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub id: String,
    pub interaction: Interaction,
}

impl SampleOutcome {
    pub fn dice(&self) -> f64 {
        self.interaction.last().dice
    }

    pub fn iou(&self) -> f64 {
        self.interaction.last().iou
    }

    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            dice: self.dice(),
            iou: self.iou(),
            clicks: self.interaction.clicks.clone(),
            round_dice: self.interaction.rounds.iter().map(|r| r.dice).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub row: EvalRow,
    pub samples: Vec<SampleOutcome>,
}

/// Click stream for sample `index`: independent of how many samples are
/// evaluated and of evaluation order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs the protocol on every sample; returns mean Dice, mean IoU and the
/// per-sample interactions in dataset order.
pub fn evaluate_segmenter(
    model: &dyn Segmenter,
    dataset: &[SegmentationSample],
    protocol: Protocol,
    seed: u64,
) -> Result<(f64, f64, Vec<SampleOutcome>)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let policy = protocol.policy(seed);
    let mut outcomes = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        let interaction =
            simulate_interaction(model, &s.image, &s.mask, &policy, &mut sample_rng(seed, i))?;
        outcomes.push(SampleOutcome {
            id: s.id.clone(),
            interaction,
        });
    }
    let n = outcomes.len() as f64;
    let dice = outcomes.iter().map(SampleOutcome::dice).sum::<f64>() / n;
    let iou = outcomes.iter().map(SampleOutcome::iou).sum::<f64>() / n;
    Ok((dice, iou, outcomes))
}

pub fn evaluate(
    model: &SegModel,
    dataset: &[SegmentationSample],
    protocol: Protocol,
    seed: u64,
) -> Result<EvalReport> {
    let (dice, iou, samples) = evaluate_segmenter(model, dataset, protocol, seed)?;
    let reg = model.registry();
    Ok(EvalReport {
        row: EvalRow {
            variant: model.variant_name(),
            total_params: reg.count(CountFilter::All),
            trainable_params: reg.count(CountFilter::Origin(Origin::Adapter)),
            dice,
            iou,
            protocol,
        },
        samples,
    })
}

/// Aligned text table of evaluation rows followed by the reference rows.
pub fn format_table(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<9} {:>10} {:>10} {:>8} {:>8}",
        "variant", "protocol", "params", "trainable", "dice", "iou"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<9} {:>10} {:>10} {:>8.4} {:>8.4}",
            r.variant,
            r.protocol.name(),
            r.total_params,
            r.trainable_params,
            r.dice,
            r.iou
        );
    }
    let _ = writeln!(out, "reference (large backbone, percent):");
    for (name, protocol, d, j) in REFERENCE_EVAL_ROWS {
        let _ = writeln!(
            out,
            "{:<12} {:<9} {:>10} {:>10} {:>8.1} {:>8.1}",
            name,
            protocol.name(),
            "-",
            "-",
            d,
            j
        );
    }
    out
}

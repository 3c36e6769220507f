//! Click simulation: random initial clicks, then corrective clicks placed
//! in the largest region the current prediction gets wrong.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{ClickLabel, ClickPrompt, MaskPrediction, Segmenter};
use crate::train::metrics::{dice, iou};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPolicy {
    pub n_initial_pos: usize,
    pub n_initial_neg: usize,
    pub max_iterative: usize,
    pub rng_seed: u64,
}

impl Default for ClickPolicy {
    /// One random positive click plus up to two corrective clicks.
    fn default() -> Self {
        Self {
            n_initial_pos: 1,
            n_initial_neg: 0,
            max_iterative: 2,
            rng_seed: 0,
        }
    }
}

impl ClickPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_initial_pos == 0 {
            return Err(Error::Config("n_initial_pos must be >= 1".into()));
        }
        Ok(())
    }
}

/// Evaluation prompt protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// A single random positive click.
    #[serde(rename = "1-point")]
    OnePoint,
    /// One random positive click, then two corrective clicks.
    #[serde(rename = "3-points")]
    ThreePoints,
}

impl Protocol {
    pub fn policy(self, seed: u64) -> ClickPolicy {
        ClickPolicy {
            n_initial_pos: 1,
            n_initial_neg: 0,
            max_iterative: match self {
                Protocol::OnePoint => 0,
                Protocol::ThreePoints => 2,
            },
            rng_seed: seed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::OnePoint => "1-point",
            Protocol::ThreePoints => "3-points",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1point" | "1-point" | "1" => Ok(Protocol::OnePoint),
            "3points" | "3-points" | "3" => Ok(Protocol::ThreePoints),
            _ => Err(Error::Config(format!(
                "unknown protocol `{s}` (expected 1point or 3points)"
            ))),
        }
    }
}

fn pixels_where(mask: &BinaryMask, value: bool) -> Vec<(usize, usize)> {
    let w = mask.width();
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == value)
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

/// Draws the policy's initial positive clicks uniformly from foreground
/// pixels and negative clicks from background pixels.
pub fn sample_initial(
    gt: &BinaryMask,
    policy: &ClickPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<ClickPrompt>> {
    policy.validate()?;
    let fg = pixels_where(gt, true);
    if fg.is_empty() {
        return Err(Error::Invalid(
            "ground truth has no foreground pixel".into(),
        ));
    }
    let bg = pixels_where(gt, false);
    if policy.n_initial_neg > 0 && bg.is_empty() {
        return Err(Error::Invalid(
            "negative clicks requested but ground truth has no background".into(),
        ));
    }
    let mut clicks = Vec::with_capacity(policy.n_initial_pos + policy.n_initial_neg);
    for _ in 0..policy.n_initial_pos {
        let (x, y) = fg[rng.gen_range(0..fg.len())];
        clicks.push(ClickPrompt::positive(x, y));
    }
    for _ in 0..policy.n_initial_neg {
        let (x, y) = bg[rng.gen_range(0..bg.len())];
        clicks.push(ClickPrompt::negative(x, y));
    }
    Ok(clicks)
}

/// 4-connected components of the foreground, in raster order of their
/// first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && mask.data()[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        comp.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

/// Places one corrective click uniformly inside the largest connected
/// component of `pred XOR gt` (earliest in raster order on ties). Returns
/// `None` when the prediction is already exact.
pub fn sample_iterative(
    pred: &BinaryMask,
    gt: &BinaryMask,
    rng: &mut impl Rng,
) -> Result<Option<ClickPrompt>> {
    let err = pred.xor(gt)?;
    let comps = connected_components(&err);
    let Some(largest) = comps
        .iter()
        .reduce(|best, c| if c.len() > best.len() { c } else { best })
    else {
        return Ok(None);
    };
    let (x, y) = largest[rng.gen_range(0..largest.len())];
    Ok(Some(ClickPrompt {
        x,
        y,
        label: ClickLabel::from_foreground(gt.get(x, y)),
    }))
}

#[derive(Debug, Clone)]
pub struct Round {
    /// Number of clicks the prediction was conditioned on.
    pub n_clicks: usize,
    pub prediction: MaskPrediction,
    pub mask: BinaryMask,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct Interaction {
    pub clicks: Vec<ClickPrompt>,
    pub rounds: Vec<Round>,
}

impl Interaction {
    pub fn last(&self) -> &Round {
        self.rounds
            .last()
            .expect("an interaction has at least one round")
    }
}

/// Round 0 uses the initial clicks; each later round adds one corrective
/// click based on the previous prediction and re-predicts with every click
/// so far. Stops early once the prediction matches the ground truth.
pub fn simulate_interaction(
    model: &dyn Segmenter,
    image: &Tensor,
    gt: &BinaryMask,
    policy: &ClickPolicy,
    rng: &mut impl Rng,
) -> Result<Interaction> {
    let mut clicks = sample_initial(gt, policy, rng)?;
    let mut rounds = Vec::with_capacity(policy.max_iterative + 1);
    let round = |clicks: &[ClickPrompt]| -> Result<Round> {
        let prediction = model.predict(image, clicks)?;
        let mask = prediction.binary_mask();
        Ok(Round {
            n_clicks: clicks.len(),
            dice: dice(&mask, gt)?,
            iou: iou(&mask, gt)?,
            prediction,
            mask,
        })
    };
    rounds.push(round(&clicks)?);
    for _ in 0..policy.max_iterative {
        let prev = &rounds.last().expect("round 0 exists").mask;
        let Some(click) = sample_iterative(prev, gt, rng)? else {
            break;
        };
        clicks.push(click);
        rounds.push(round(&clicks)?);
    }
    Ok(Interaction { clicks, rounds })
}

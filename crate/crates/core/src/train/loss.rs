use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Additive smoothing in the soft Dice ratio.
pub const SOFT_DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub total: Var,
    pub bce: Var,
    pub soft_dice: Var,
}

/// Mean binary cross-entropy on logits plus `1 − soft Dice` of
/// `sigmoid(logits)`, equally weighted.
pub fn seg_loss(g: &mut Graph<'_>, logits: Var, gt: &BinaryMask) -> Result<SegLoss> {
    let shape = g.shape(logits).to_vec();
    if shape != [gt.height(), gt.width()] {
        return Err(Error::shape(
            "seg_loss",
            format!("logits {shape:?} vs target {:?}", gt.dims()),
        ));
    }
    let target = gt.to_f64();
    let target_sum: f64 = target.iter().sum();
    let y = g.constant(&shape, target)?;

    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let per_pixel = g.sub(sp, yz)?;
    let bce = g.mean(per_pixel);

    let p = g.sigmoid(logits);
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let inter2 = g.scale(inter, 2.0);
    let smooth = g.constant(&[1], vec![SOFT_DICE_SMOOTH])?;
    let num = g.add(inter2, smooth)?;
    let psum = g.sum(p);
    let rest = g.constant(&[1], vec![target_sum + SOFT_DICE_SMOOTH])?;
    let den = g.add(psum, rest)?;
    let soft_dice = g.div(num, den)?;

    let one = g.constant(&[1], vec![1.0])?;
    let bce1 = g.add(bce, one)?;
    let total = g.sub(bce1, soft_dice)?;
    Ok(SegLoss {
        total,
        bce,
        soft_dice,
    })
}

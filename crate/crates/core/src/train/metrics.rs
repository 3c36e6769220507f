use crate::error::Result;
use crate::mask::BinaryMask;

fn overlap(pred: &BinaryMask, gt: &BinaryMask, op: &'static str) -> Result<(usize, usize, usize)> {
    pred.check_same_dims(gt, op)?;
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += usize::from(a);
        g += usize::from(b);
        inter += usize::from(a && b);
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt, "dice")?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt, "iou")?;
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(bits: &[bool]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn named_cases() {
        let a = row(&[true, true, true, true, false, false]);
        let b = row(&[false, false, true, true, true, true]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&a, &b).unwrap(), 2.0 / 6.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = row(&[false, false, false, false, true, true]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = row(&[false; 4]);
        let f = row(&[true, false, false, false]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &f).unwrap(), 0.0);
        assert_eq!(iou(&f, &e).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = row(&[true; 4]);
        let b = row(&[true; 5]);
        assert!(dice(&a, &b).is_err());
        assert!(iou(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn iou_bounded_by_dice(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
            let p = row(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let g = row(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let (d, j) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
            prop_assert!(j <= d);
            prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&g, &p).unwrap());
            prop_assert_eq!(j, iou(&g, &p).unwrap());
        }
    }
}

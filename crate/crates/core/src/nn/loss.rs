use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn same_shape(tape: &Tape, op: &'static str, pred: Var, target: &Tensor) -> Result<()> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim(
            op,
            format!(
                "prediction {:?} vs target {:?}",
                tape.shape(pred),
                target.shape()
            ),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `pred` against 0/1 `target`.
pub fn bce(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    same_shape(tape, "bce", pred, target)?;
    let p = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let t = tape.constant(target.clone());
    let not_t = tape.constant(target.map(|v| 1.0 - v));
    let ln_p = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let ln_q = tape.ln(q);
    let pos = tape.mul(t, ln_p)?;
    let neg = tape.mul(not_t, ln_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.scale(mean, -1.0))
}

/// Mean absolute error; the subgradient at ties is zero.
pub fn mae(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    same_shape(tape, "mae", pred, target)?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Smoothed macro Dice loss over `B×K×H×W` soft predictions and a one-hot
/// target, averaging classes `1..K` (class 0 is background and skipped).
pub fn dice_macro(tape: &mut Tape, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    same_shape(tape, "dice_macro", pred, target)?;
    let s = target.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::Contract(format!(
            "dice needs B×K×H×W with K ≥ 2, got {s:?}"
        )));
    }
    if smooth <= 0.0 {
        return Err(Error::Contract(format!(
            "dice smoothing must be positive, got {smooth}"
        )));
    }
    let k = s[1];
    let t = tape.constant(target.clone());
    let overlap = tape.mul(pred, t)?;
    let inter = tape.sum_channels(overlap)?;
    let psum = tape.sum_channels(pred)?;
    let tsum = tape.sum_channels(t)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let den = tape.add(psum, tsum)?;
    let den = tape.add_scalar(den, smooth);
    let dice = tape.div(num, den)?;
    let fg = tape.narrow(dice, 0, 1, k - 1)?;
    let m = tape.mean(fg);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn eval(f: impl Fn(&mut Tape, Var) -> Result<Var>, pred: Tensor) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(pred);
        let l = f(&mut tape, p).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn bce_anchors() {
        let target = Tensor::vector(vec![1.0, 0.0, 1.0, 1.0]);
        let l = eval(|t, p| bce(t, p, &target), Tensor::full(&[4], 0.5));
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let l = eval(|t, p| bce(t, p, &target), target.clone());
        assert!(l > 0.0 && l < 2e-7, "{l}");
    }

    #[test]
    fn bce_gradcheck() {
        let target = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]);
        let err = grad_check(
            |t, p| bce(t, p, &target),
            &Tensor::vector(vec![0.2, 0.7, 0.45, 0.9]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn mae_cases() {
        let t = Tensor::vector(vec![0.0, 4.0]);
        assert_eq!(
            eval(|tp, p| mae(tp, p, &t), Tensor::vector(vec![1.0, 2.0])),
            1.5
        );
        assert_eq!(eval(|tp, p| mae(tp, p, &t), t.clone()), 0.0);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let l = mae(&mut tape, p, &t).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.5, -0.5]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(mae(&mut tape, p, &t).is_err());
    }

    fn one_hot(labels: &[usize], k: usize, h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; k * h * w];
        for (i, &c) in labels.iter().enumerate() {
            data[c * h * w + i] = 1.0;
        }
        Tensor::new(vec![1, k, h, w], data).unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let target = one_hot(&[0, 1, 1, 2, 2, 0], 3, 2, 3);
        let l = eval(
            |t, p| dice_macro(t, p, &target, DICE_SMOOTH),
            target.clone(),
        );
        assert!(l.abs() < 1e-15, "{l}");

        // Each foreground class has m = 2 pixels in both masks, never overlapping.
        let pred = one_hot(&[0, 2, 2, 1, 1, 0], 3, 2, 3);
        let l = eval(|t, p| dice_macro(t, p, &target, DICE_SMOOTH), pred);
        let expected = 1.0 - DICE_SMOOTH / (2.0 * 2.0 + DICE_SMOOTH);
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
    }

    #[test]
    fn dice_contract_and_gradcheck() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        assert!(matches!(
            dice_macro(&mut tape, p, &Tensor::ones(&[1, 1, 2, 2]), 1.0),
            Err(Error::Contract(_))
        ));

        let target = one_hot(&[0, 1, 2, 2], 3, 2, 2);
        let soft = Tensor::new(
            vec![1, 3, 2, 2],
            (0..12).map(|i| 0.1 + 0.07 * i as f64).collect(),
        )
        .unwrap();
        let err = grad_check(|t, p| dice_macro(t, p, &target, DICE_SMOOTH), &soft, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

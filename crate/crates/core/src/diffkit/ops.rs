use crate::{Error, Result, Scalar};

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(logits)[chosen]` and its gradient `one_hot(chosen) − softmax(logits)`.
pub fn softmax_logprob_grad<F: Scalar>(logits: &[F], chosen: usize) -> Result<(F, Vec<F>)> {
    if chosen >= logits.len() {
        return Err(Error::OutOfRange {
            what: "action",
            index: chosen,
            len: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let log_z = logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln() + max;
    let logprob = logits[chosen] - log_z;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = (l - log_z).exp();
            if i == chosen {
                F::one() - p
            } else {
                -p
            }
        })
        .collect();
    Ok((logprob, grad))
}

/// Squared error and its derivative with respect to `pred`.
pub fn mse<F: Scalar>(pred: F, target: F) -> (F, F) {
    let d = pred - target;
    (d * d, (d + d))
}

/// Index of the largest entry; ties go to the lowest index. NaNs never win.
pub fn argmax<F: Scalar>(xs: &[F]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ if x.is_nan() => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

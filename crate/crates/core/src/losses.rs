//! Supervised cross-entropy, teacher pseudo-labels with confidence masks,
//! the confidence-weighted consistency loss, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, LabelMask, Logits, ProbMap, Real, Tensor3, IGNORE_LABEL};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Denominator of the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LdNormalize {
    /// `2·B_d·|Ω|`: every pixel counts, unconfident ones dilute the loss.
    #[default]
    AllPixels,
    /// Number of confident pixels over both views.
    ConfidentPixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPack {
    pub label: LabelMask,
    pub conf: BinaryMask,
    pub tau: f64,
}

impl PseudoPack {
    pub fn confident_pixels(&self) -> usize {
        self.conf.data.iter().filter(|&&c| c != 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
    pub lambda: f64,
    pub confident_fraction: f64,
}

pub fn softmax<T: Real>(logits: &Logits<T>) -> ProbMap<T> {
    let (c, h, w) = logits.shape();
    let n = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for u in 0..n {
        let mut m = logits.data[u];
        for k in 1..c {
            m = m.max(logits.data[k * n + u]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (logits.data[k * n + u] - m).exp();
            out.data[k * n + u] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + u] /= s;
        }
    }
    out
}

fn check_label(label: u8, index: usize, num_classes: usize) -> Result<()> {
    if label as usize >= num_classes && label != IGNORE_LABEL {
        return Err(Error::InvalidLabel {
            label,
            index,
            num_classes,
        });
    }
    Ok(())
}

/// Mean pixel cross-entropy over the batch; ignore-label pixels are dropped
/// from both the sum and the pixel count.
pub fn supervised_loss<T: Real>(probs: &[ProbMap<T>], labels: &[LabelMask]) -> Result<T> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability maps for {} label masks",
            probs.len(),
            labels.len()
        )));
    }
    let floor = T::of(PROB_FLOOR);
    let mut sum = T::zero();
    let mut count = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        if p.height != y.height || p.width != y.width {
            return Err(Error::ShapeMismatch("probabilities vs labels".into()));
        }
        let n = p.plane_len();
        for (u, &l) in y.data.iter().enumerate() {
            check_label(l, u, p.channels)?;
            if l == IGNORE_LABEL {
                continue;
            }
            sum -= p.data[l as usize * n + u].max(floor).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(T::zero());
    }
    Ok(sum / T::of(count as f64))
}

/// Argmax pseudo-label (lowest index wins ties) and the `max p ≥ tau` indicator.
pub fn make_pseudo<T: Real>(teacher_probs: &ProbMap<T>, tau: f64) -> Result<PseudoPack> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0,1], got {tau}")));
    }
    let (c, h, w) = teacher_probs.shape();
    let n = h * w;
    let mut label = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for u in 0..n {
        let mut best = 0usize;
        let mut best_p = teacher_probs.data[u];
        let mut sum = best_p.as_f64();
        for k in 1..c {
            let p = teacher_probs.data[k * n + u];
            sum += p.as_f64();
            if p > best_p {
                best = k;
                best_p = p;
            }
        }
        if (sum - 1.0).abs() > 1e-4 || !sum.is_finite() {
            return Err(Error::Unnormalized { index: u, sum });
        }
        label.push(best as u8);
        conf.push(u8::from(best_p.as_f64() >= tau));
    }
    Ok(PseudoPack {
        label: LabelMask::from_vec(h, w, label)?,
        conf: BinaryMask::from_vec(h, w, conf)?,
        tau,
    })
}

/// Confidence-weighted cross-entropy over both strong views.
pub fn unsupervised_loss<T: Real>(
    p1: &[ProbMap<T>],
    p2: &[ProbMap<T>],
    pack1: &[PseudoPack],
    pack2: &[PseudoPack],
    normalize: LdNormalize,
) -> Result<T> {
    let b = p1.len();
    if b == 0 || p2.len() != b || pack1.len() != b || pack2.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes {} / {} / {} / {}",
            p1.len(),
            p2.len(),
            pack1.len(),
            pack2.len()
        )));
    }
    let floor = T::of(PROB_FLOOR);
    let mut sum = T::zero();
    let mut confident = 0usize;
    let mut pixels = 0usize;
    for (probs, packs) in [(p1, pack1), (p2, pack2)] {
        for (p, pack) in probs.iter().zip(packs) {
            if p.height != pack.label.height
                || p.width != pack.label.width
                || !pack.label.same_shape(&pack.conf)
            {
                return Err(Error::ShapeMismatch("prediction vs pseudo-label".into()));
            }
            let n = p.plane_len();
            pixels += n;
            for u in 0..n {
                if pack.conf.data[u] == 0 {
                    continue;
                }
                let l = pack.label.data[u] as usize;
                if l >= p.channels {
                    return Err(Error::InvalidLabel {
                        label: l as u8,
                        index: u,
                        num_classes: p.channels,
                    });
                }
                sum -= p.data[l * n + u].max(floor).ln();
                confident += 1;
            }
        }
    }
    let denom = match normalize {
        LdNormalize::AllPixels => pixels,
        LdNormalize::ConfidentPixels => confident,
    };
    if denom == 0 {
        return Ok(T::zero());
    }
    Ok(sum / T::of(denom as f64))
}

pub fn total_loss(l_c: f64, l_d: f64, lambda: f64) -> Result<LossReport> {
    for (name, v) in [("l_c", l_c), ("l_d", l_d), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                tensor: name.into(),
                index: 0,
            });
        }
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossReport {
        l_c,
        l_d,
        total: l_c + lambda * l_d,
        lambda,
        confident_fraction: 0.0,
    })
}

/// Cross-entropy of `logits` against `target` summed over pixels, with an
/// optional 0/1 weight per pixel. Returns the unscaled sum and the logit
/// gradient multiplied by `scale`. Ignore-label pixels contribute nothing.
pub fn ce_from_logits<T: Real>(
    logits: &Logits<T>,
    target: &LabelMask,
    weight: Option<&BinaryMask>,
    scale: T,
) -> Result<(T, Logits<T>)> {
    let (c, h, w) = logits.shape();
    if target.height != h || target.width != w || weight.is_some_and(|m| !m.same_shape(target)) {
        return Err(Error::ShapeMismatch("logits vs target".into()));
    }
    let n = h * w;
    let mut grad = Tensor3::zeros(c, h, w);
    let mut sum = T::zero();
    for u in 0..n {
        let l = target.data[u];
        check_label(l, u, c)?;
        if l == IGNORE_LABEL || weight.is_some_and(|m| m.data[u] == 0) {
            continue;
        }
        let mut m = logits.data[u];
        for k in 1..c {
            m = m.max(logits.data[k * n + u]);
        }
        let mut z = T::zero();
        for k in 0..c {
            z += (logits.data[k * n + u] - m).exp();
        }
        let lse = m + z.ln();
        sum += lse - logits.data[l as usize * n + u];
        for k in 0..c {
            let p = (logits.data[k * n + u] - lse).exp();
            grad.data[k * n + u] = scale * p;
        }
        grad.data[l as usize * n + u] -= scale;
    }
    Ok((sum, grad))
}

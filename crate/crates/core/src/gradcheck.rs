//! Central-difference check of the analytic gradient.
//!
//! The reference derivative only uses the forward pass. When `θ ± ε` land
//! in a different ReLU activation pattern than `θ`, the difference quotient
//! straddles a kink; those probes are re-evaluated with the ReLU gates held
//! at their values at `θ`, which differentiates the linear piece the
//! analytic gradient belongs to.
//!
//! Agreement is measured per tensor as `‖a − n‖ / max(‖a‖, ‖n‖)` over the
//! probed entries, so entries that are numerically zero do not turn the
//! O(ε²) truncation error into a large ratio.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::losses::PseudoPack;
use crate::model::{
    forward_backward, forward_loss_gated, forward_loss_gates, sample_complementary_masks, LossSpec, ParamSet,
    StrongPair, TrainBatch, FEAT_CHANNELS, PARAM_NAMES,
};
use crate::tensor::{substream, BinaryMask, LabelMask, Tensor3, IGNORE_LABEL};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probes per weight tensor; bias tensors are checked exhaustively.
    pub weight_probes: usize,
    pub seed: u64,
    /// Floor on the relative-error denominator, for tensors whose gradient is numerically zero.
    pub abs_floor: f64,
    /// Test hook: scales one analytic gradient entry so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            weight_probes: 48,
            seed: 0,
            abs_floor: 1e-8,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: &'static str,
    pub probes: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    /// Probes that needed frozen ReLU gates.
    pub gated_probes: usize,
    /// `(tensor, index, analytic, numeric, abs_err)` of the probe with the largest absolute error.
    pub worst: Option<(&'static str, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes).sum()
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied())).max(floor)
}

pub fn check_gradients(
    params: &ParamSet<f64>,
    batch: &TrainBatch<f64>,
    spec: &LossSpec,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut analytic = forward_backward(params, batch, spec)?.grads;
    if opts.corrupt {
        let t = analytic.get_mut("dec.conv2.bias").expect("known tensor");
        t.data[0] = t.data[0] * 1.01 + 1e-3;
    }
    let (_, base_gates) = forward_loss_gates(params, batch, spec)?;
    let base_sig = base_gates.fingerprint();
    let mut rng = substream(opts.seed, &[0x6772_6164]);
    let mut probe_params = params.clone();
    let mut report = GradCheckReport {
        tensors: Vec::new(),
        gated_probes: 0,
        worst: None,
    };

    for (ti, &name) in PARAM_NAMES.iter().enumerate() {
        let len = params.tensors[ti].data.len();
        let indices: Vec<usize> = if name.ends_with(".bias") || len <= opts.weight_probes {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.weight_probes).into_vec()
        };
        let (mut an, mut nu) = (Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len()));
        for &idx in &indices {
            let orig = params.tensors[ti].data[idx];
            probe_params.tensors[ti].data[idx] = orig + opts.eps;
            let (mut plus, g_p) = forward_loss_gates(&probe_params, batch, spec)?;
            probe_params.tensors[ti].data[idx] = orig - opts.eps;
            let (mut minus, g_m) = forward_loss_gates(&probe_params, batch, spec)?;
            if g_p.fingerprint() != base_sig || g_m.fingerprint() != base_sig {
                report.gated_probes += 1;
                minus = forward_loss_gated(&probe_params, batch, spec, &base_gates)?;
                probe_params.tensors[ti].data[idx] = orig + opts.eps;
                plus = forward_loss_gated(&probe_params, batch, spec, &base_gates)?;
            }
            probe_params.tensors[ti].data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.tensors[ti].data[idx];
            let abs = (a - numeric).abs();
            if report.worst.is_none_or(|w| abs > w.4) {
                report.worst = Some((name, idx, a, numeric, abs));
            }
            an.push(a);
            nu.push(numeric);
        }
        report.tensors.push(TensorCheck {
            name,
            probes: indices.len(),
            rel_err: relative_error(&an, &nu, opts.abs_floor),
        });
    }
    Ok(report)
}

/// Random parameters (biases included) and a random batch of `clean`
/// labelled images and `degraded` strong-view pairs, all `size×size`.
/// About one clean pixel in ten is ignored and half of the strong pixels are confident.
pub fn random_problem(
    seed: u64,
    size: usize,
    clean: usize,
    degraded: usize,
    num_classes: usize,
) -> (ParamSet<f64>, TrainBatch<f64>) {
    let mut rng = substream(seed, &[0x7072_6f62]);
    let mut params = ParamSet::<f64>::init(num_classes, &mut rng);
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors.iter_mut()) {
        if name.ends_with(".bias") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let n = size * size;
    let image = |rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor3::from_vec(3, size, size, (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape")
    };
    let labels = |rng: &mut rand_chacha::ChaCha8Rng, ignore: bool| {
        let data = (0..n)
            .map(|_| {
                if ignore && rng.random_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..num_classes) as u8
                }
            })
            .collect();
        LabelMask::from_vec(size, size, data).expect("shape")
    };
    let mut batch = TrainBatch::default();
    for _ in 0..clean {
        let x = image(&mut rng);
        let y = labels(&mut rng, true);
        batch.clean.push((x, y));
    }
    for _ in 0..degraded {
        let views = [image(&mut rng), image(&mut rng)];
        let (m1, m2) = sample_complementary_masks(&mut rng, 0.5, FEAT_CHANNELS);
        let target = |rng: &mut rand_chacha::ChaCha8Rng| {
            let label = labels(rng, false);
            let conf = BinaryMask::from_vec(size, size, (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect())
                .expect("shape");
            PseudoPack { label, conf, tau: 0.95 }
        };
        let targets = [target(&mut rng), target(&mut rng)];
        batch.strong.push(StrongPair {
            views,
            masks: [m1, m2],
            targets,
        });
    }
    (params, batch)
}

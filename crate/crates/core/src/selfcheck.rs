//! Fast invariant suite behind `wps selfcheck`.

use rand::Rng;

use crate::datagen::{generate_split, read_shard, write_shard};
use crate::error::Result;
use crate::gradcheck::{check_gradients, random_problem, GradCheckOptions};
use crate::losses::{supervised_loss, unsupervised_loss, LdNormalize, PseudoPack, PROB_FLOOR};
use crate::model::{
    apply_channel_dropout, ema_update, sample_complementary_masks, LossSpec, ParamSet, Role, FEAT_CHANNELS,
};
use crate::tensor::{substream, BinaryMask, LabelMask, ProbMap, Tensor3, IGNORE_LABEL};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfCheckOptions {
    /// Perturbs one analytic gradient entry; the gradient check must then fail.
    pub corrupt_gradient: bool,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check in order and returns one outcome per check.
pub fn run(opts: &SelfCheckOptions) -> Vec<CheckOutcome> {
    vec![
        outcome("gradient", gradient(opts.corrupt_gradient)),
        outcome("loss_oracles", loss_oracles()),
        outcome("ema", ema()),
        outcome("dropout_complement", dropout()),
        outcome("shard_round_trip", shard_round_trip()),
    ]
}

fn gradient(corrupt: bool) -> Result<(bool, String)> {
    let (params, batch) = random_problem(7, 8, 1, 1, 3);
    let spec = LossSpec {
        lambda: 1.0,
        ld_normalize: LdNormalize::AllPixels,
        freeze_encoder: false,
    };
    let opts = GradCheckOptions {
        weight_probes: 12,
        corrupt,
        ..Default::default()
    };
    let report = check_gradients(&params, &batch, &spec, &opts)?;
    let err = report.max_rel_err();
    let mut detail = format!("{} probes, max rel err {err:.2e} (bound 1e-4)", report.probes());
    if err >= 1e-4 {
        let worst = report.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("tensors");
        detail.push_str(&format!("; worst tensor {}", worst.name));
        if let Some((name, idx, a, n, _)) = report.worst {
            detail.push_str(&format!("; largest entry gap {name}[{idx}]: analytic {a:.6e} vs numeric {n:.6e}"));
        }
    }
    Ok((err < 1e-4, detail))
}

fn random_probs(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ProbMap<f64> {
    let n = h * w;
    let mut data: Vec<f64> = (0..c * n).map(|_| rng.random_range(1e-3..1.0)).collect();
    for u in 0..n {
        let s: f64 = (0..c).map(|k| data[k * n + u]).sum();
        for k in 0..c {
            data[k * n + u] /= s;
        }
    }
    Tensor3::from_vec(c, h, w, data).expect("shape")
}

fn ref_ce(p: &ProbMap<f64>, y: usize, x: usize, class: usize) -> f64 {
    -p.at(class, y, x).max(PROB_FLOOR).ln()
}

fn loss_oracles() -> Result<(bool, String)> {
    let mut rng = substream(11, &[0]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(2..5), rng.random_range(1..5), rng.random_range(1..5));
        let b = rng.random_range(1..3);
        let probs: Vec<_> = (0..b).map(|_| random_probs(&mut rng, c, h, w)).collect();
        let labels: Vec<LabelMask> = (0..b)
            .map(|_| {
                let d = (0..h * w)
                    .map(|_| if rng.random_bool(0.3) { IGNORE_LABEL } else { rng.random_range(0..c) as u8 })
                    .collect();
                LabelMask::from_vec(h, w, d).expect("shape")
            })
            .collect();
        let (mut sum, mut cnt) = (0.0, 0usize);
        for (p, l) in probs.iter().zip(&labels) {
            for y in 0..h {
                for x in 0..w {
                    let v = l.at(y, x);
                    if v != IGNORE_LABEL {
                        sum += ref_ce(p, y, x, v as usize);
                        cnt += 1;
                    }
                }
            }
        }
        let expect = if cnt == 0 { 0.0 } else { sum / cnt as f64 };
        worst = worst.max((supervised_loss(&probs, &labels)? - expect).abs());

        let p2: Vec<_> = (0..b).map(|_| random_probs(&mut rng, c, h, w)).collect();
        let pack = |rng: &mut rand_chacha::ChaCha8Rng| PseudoPack {
            label: LabelMask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect())
                .expect("shape"),
            conf: BinaryMask::from_vec(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(0.5))).collect())
                .expect("shape"),
            tau: 0.95,
        };
        let k1: Vec<_> = (0..b).map(|_| pack(&mut rng)).collect();
        let k2: Vec<_> = (0..b).map(|_| pack(&mut rng)).collect();
        let (mut sum, mut conf) = (0.0, 0usize);
        for (ps, ks) in [(&probs, &k1), (&p2, &k2)] {
            for (p, k) in ps.iter().zip(ks) {
                for y in 0..h {
                    for x in 0..w {
                        if k.conf.at(y, x) != 0 {
                            sum += ref_ce(p, y, x, k.label.at(y, x) as usize);
                            conf += 1;
                        }
                    }
                }
            }
        }
        let all = (2 * b * h * w) as f64;
        let conf_expect = if conf == 0 { 0.0 } else { sum / conf as f64 };
        let got_all = unsupervised_loss(&probs, &p2, &k1, &k2, LdNormalize::AllPixels)?;
        let got_conf = unsupervised_loss(&probs, &p2, &k1, &k2, LdNormalize::ConfidentPixels)?;
        worst = worst.max((got_all - sum / all).abs()).max((got_conf - conf_expect).abs());
    }
    Ok((worst <= 1e-10, format!("20 instances, max abs diff {worst:.1e} (bound 1e-10)")))
}

fn ema() -> Result<(bool, String)> {
    let mut teacher = ParamSet::<f64>::zeros(2, Role::Teacher);
    let mut student = ParamSet::<f64>::zeros(2, Role::Student);
    teacher.tensors.iter_mut().for_each(|t| t.data.fill(1.0));
    student.tensors.iter_mut().for_each(|t| t.data.fill(0.5));
    ema_update(&mut teacher, &student, 0.99)?;
    let probe = (teacher.tensors[0].data[0] - 0.995).abs();
    teacher.tensors.iter_mut().for_each(|t| t.data.fill(1.0));
    student.tensors.iter_mut().for_each(|t| t.data.fill(0.0));
    for _ in 0..100 {
        ema_update(&mut teacher, &student, 0.9)?;
    }
    let decay = (teacher.tensors[0].data[0] - 0.9f64.powi(100)).abs();
    Ok((
        probe <= 1e-12 && decay <= 1e-12,
        format!("probe err {probe:.1e}, 100-step decay err {decay:.1e}"),
    ))
}

fn dropout() -> Result<(bool, String)> {
    let mut rng = substream(13, &[0]);
    let feat = Tensor3::from_vec(FEAT_CHANNELS, 2, 2, (0..FEAT_CHANNELS * 4).map(|i| 1.0 + i as f64).collect())?;
    for _ in 0..1000 {
        let (m1, m2) = sample_complementary_masks(&mut rng, 0.5, FEAT_CHANNELS);
        let a = apply_channel_dropout(&feat, &m1)?;
        let b = apply_channel_dropout(&feat, &m2)?;
        for c in 0..FEAT_CHANNELS {
            let on_a = a.plane(c).iter().any(|&v| v != 0.0);
            let on_b = b.plane(c).iter().any(|&v| v != 0.0);
            if on_a == on_b {
                return Ok((false, format!("channel {c} is {} in both views", if on_a { "on" } else { "off" })));
            }
        }
    }
    Ok((true, "1000 pairs disjoint and exhaustive".into()))
}

fn shard_round_trip() -> Result<(bool, String)> {
    let scenes = generate_split(5, 0, 3, 16, 4)?;
    let path = std::env::temp_dir().join(format!("wps-selfcheck-{}.wps", std::process::id()));
    let result = (|| {
        write_shard(&scenes, 4, &path)?;
        let first = std::fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
        let (header, back) = read_shard(&path)?;
        write_shard(&back, 4, &path)?;
        let second = std::fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
        let same = back == scenes && first == second && header.count as usize == scenes.len();
        Ok((same, format!("{} scenes, {} bytes", scenes.len(), first.len())))
    })();
    let _ = std::fs::remove_file(&path);
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        for c in run(&SelfCheckOptions::default()) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let out = run(&SelfCheckOptions { corrupt_gradient: true });
        let g = out.iter().find(|c| c.name == "gradient").unwrap();
        assert!(!g.passed, "{g}");
        assert!(out.iter().filter(|c| c.name != "gradient").all(|c| c.passed));
    }
}

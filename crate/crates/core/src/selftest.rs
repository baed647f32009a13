//! Built-in diagnostics runnable from the CLI: a full-model gradient check,
//! closed-form survival fixtures, metric oracles, and artifact round-trips.
//!
//! Every check is independent and yields one [`CheckResult`]. `FaultInjection`
//! lets a harness corrupt the inputs on purpose and confirm the checks fail
//! rather than pass vacuously.

use crate::error::{Error, Result};
use crate::fusion::EmbeddedBag;
use crate::metrics::{c_index, morans_i, HeatmapGrid};
use crate::model::{loss_graph, FusionMode, Model, ModelSpec};
use crate::numerics::{compare_with_fd, Graph, Tensor, VarId, FD_STEP};
use crate::pipeline::bagfile::{read_bag_from, write_bag_to};
use crate::pipeline::otsu::{otsu_threshold, HIST_BINS};
use crate::survival::{hazards_from_logits, nll_loss, survival_curve, BinSpec, SurvivalTarget};
use crate::trainer::checkpoint::{load_checkpoint_from, save_checkpoint_to, Checkpoint, LoadedCheckpoint};
use crate::trainer::config::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Cursor;

/// Tolerance for the analytic-vs-finite-difference gradient comparison.
pub const GRAD_TOL: f64 = 1e-4;

/// What kind of failure a check reports; used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Numeric,
    Format,
}

#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
}

/// Deliberate defects for exercising the failure paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Flip one byte of the checkpoint magic before reading it back.
    pub corrupt_format: bool,
    /// Offset one analytic gradient element before the comparison.
    pub perturb_gradient: bool,
}

pub fn run_selftest(faults: FaultInjection) -> Vec<CheckResult> {
    vec![
        gradient_check(faults.perturb_gradient),
        survival_curve_check(),
        nll_fixture_check(),
        c_index_check(),
        moran_checkerboard_check(),
        otsu_check(),
        bag_round_trip_check(),
        checkpoint_round_trip_check(faults.corrupt_format),
    ]
}

fn run_check(
    name: &'static str,
    kind: CheckKind,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult { name, kind, passed, detail },
        Err(e) => CheckResult {
            name,
            kind,
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

/// Backprop through fuse -> pool -> classify -> loss on a tiny model, then
/// compare every leaf gradient against central finite differences.
fn gradient_check(perturb: bool) -> CheckResult {
    run_check("gradient/full-model", CheckKind::Numeric, || {
        let spec = ModelSpec::new(FusionMode::Fluoroformer, 8, 4, 4, 4);
        let model = Model::<f64>::init(&spec, 7)?;
        let bins = BinSpec::new(vec![30.0, 90.0, 180.0])?;
        let target = SurvivalTarget::new(100.0, false, &bins)?;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut inputs = vec![Tensor::uniform(vec![2, 3, 8], 0.5, &mut rng)];
        for (_, t) in model.named_params() {
            inputs.push(t.clone());
        }
        let build = |g: &mut Graph<f64>, ids: &[VarId]| -> Result<VarId> {
            let vars = model.vars_from_ids(&ids[1..])?;
            let (_, loss) = loss_graph(g, &vars, ids[0], &target)?;
            Ok(loss)
        };

        let mut g = Graph::new();
        let ids: Vec<VarId> = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        let mut analytic: Vec<Option<Vec<f64>>> = ids
            .iter()
            .map(|&id| g.grad(id).map(|s| s.to_vec()))
            .collect();
        if perturb {
            let slot = analytic
                .iter_mut()
                .find_map(|s| s.as_mut())
                .ok_or_else(|| Error::contract("no gradient slot to perturb"))?;
            slot[0] += 0.05;
        }
        let report = compare_with_fd(&inputs, &analytic, &build, FD_STEP)?;
        Ok((
            report.passes(GRAD_TOL),
            format!(
                "max rel err {:.3e} over {} elements",
                report.max_rel_err, report.elements_checked
            ),
        ))
    })
}

/// Constant hazard 1/2 over four bins halves the curve each step.
fn survival_curve_check() -> CheckResult {
    run_check("survival/constant-hazard-curve", CheckKind::Numeric, || {
        let hazards = Tensor::new(vec![4], vec![0.5f64; 4])?;
        let curve = survival_curve(&hazards)?;
        let expected = [0.5, 0.25, 0.125, 0.0625];
        let max_err = curve
            .data()
            .iter()
            .zip(expected.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        Ok((max_err <= 1e-12, format!("max abs err {max_err:.3e}")))
    })
}

/// Zero logits give hazard 1/2 everywhere; an event in the first bin then
/// costs exactly ln 2.
fn nll_fixture_check() -> CheckResult {
    run_check("survival/first-bin-event-loss", CheckKind::Numeric, || {
        let bins = BinSpec::new(vec![10.0, 20.0, 30.0])?;
        let target = SurvivalTarget::new(5.0, false, &bins)?;
        let hazards = hazards_from_logits(&Tensor::new(vec![4], vec![0.0f64; 4])?)?;
        let loss = nll_loss(&hazards, &target)?;
        let err = (loss - std::f64::consts::LN_2).abs();
        Ok((err <= 1e-9, format!("loss {loss:.9}, |err| {err:.3e}")))
    })
}

/// Random instances against an independently written pair loop.
fn c_index_check() -> CheckResult {
    run_check("metrics/c-index-pairs", CheckKind::Numeric, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..25 {
            let n = rng.gen_range(2..=20);
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let censored: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();

            let mut comparable = 0u64;
            let mut score = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i == j || censored[i] || times[i] >= times[j] {
                        continue;
                    }
                    comparable += 1;
                    if risks[i] < risks[j] {
                        score += 1.0;
                    } else if risks[i] == risks[j] {
                        score += 0.5;
                    }
                }
            }
            let got = c_index(&risks, &times, &censored);
            match (comparable, got) {
                (0, Err(Error::UndefinedMetric(_))) => continue,
                (0, _) => {
                    return Ok((false, format!("trial {trial}: expected undefined metric")))
                }
                (_, Ok(v)) => {
                    let want = score / comparable as f64;
                    if v != want {
                        return Ok((false, format!("trial {trial}: {v} != {want}")));
                    }
                }
                (_, Err(e)) => return Ok((false, format!("trial {trial}: errored: {e}"))),
            }
        }
        Ok((true, "25 random instances match the pair loop".into()))
    })
}

/// A checkerboard is perfect negative spatial autocorrelation: I = -1.
fn moran_checkerboard_check() -> CheckResult {
    run_check("metrics/moran-checkerboard", CheckKind::Numeric, || {
        let values: Vec<f64> = (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let grid = HeatmapGrid::new(4, 4, values, vec![true; 16])?;
        let i = morans_i(&grid)?;
        Ok(((i + 1.0).abs() <= 1e-12, format!("I = {i:.15}")))
    })
}

/// Random histograms against an exhaustive between-class variance sweep that
/// recomputes both class statistics from scratch at every threshold.
fn otsu_check() -> CheckResult {
    run_check("pipeline/otsu-exhaustive", CheckKind::Numeric, || {
        let objective = |hist: &[u64; HIST_BINS], t: usize| -> f64 {
            let (mut n0, mut n1, mut s0, mut s1) = (0u64, 0u64, 0.0f64, 0.0f64);
            for (i, &c) in hist.iter().enumerate() {
                if i <= t {
                    n0 += c;
                    s0 += (i as u64 * c) as f64;
                } else {
                    n1 += c;
                    s1 += (i as u64 * c) as f64;
                }
            }
            if n0 == 0 || n1 == 0 {
                return f64::NEG_INFINITY;
            }
            let total = (n0 + n1) as f64;
            let (w0, w1) = (n0 as f64 / total, n1 as f64 / total);
            let d = s0 / n0 as f64 - s1 / n1 as f64;
            w0 * w1 * d * d
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let mut hist = [0u64; HIST_BINS];
            for _ in 0..rng.gen_range(2..40) {
                hist[rng.gen_range(0..HIST_BINS)] += rng.gen_range(1..500);
            }
            if hist.iter().filter(|&&c| c > 0).count() < 2 {
                hist[10] += 7;
                hist[200] += 7;
            }
            let t = otsu_threshold(&hist)?;
            let best = (0..HIST_BINS - 1)
                .map(|cand| objective(&hist, cand))
                .fold(f64::NEG_INFINITY, f64::max);
            let got = objective(&hist, t);
            if got < best {
                return Ok((
                    false,
                    format!("trial {trial}: variance {got} below exhaustive best {best}"),
                ));
            }
        }
        Ok((true, "10 random histograms reach the exhaustive optimum".into()))
    })
}

fn bag_round_trip_check() -> CheckResult {
    run_check("pipeline/bag-round-trip", CheckKind::Format, || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k, m, d) = (3usize, 2usize, 5usize);
        let bag = EmbeddedBag {
            sample_id: "selftest".to_string(),
            channel_names: vec!["a".into(), "b".into()],
            coords: (0..k).map(|i| (i as u32, (i * 2) as u32)).collect(),
            h: Tensor::<f32>::uniform(vec![k, m, d], 1.0, &mut rng),
        };
        let mut buf = Vec::new();
        write_bag_to(&mut buf, &bag)?;
        let back = read_bag_from(&mut Cursor::new(&buf), bag.sample_id.clone())?;
        let same = back.coords == bag.coords
            && back.channel_names == bag.channel_names
            && back.h.shape() == bag.h.shape()
            && back
                .h
                .data()
                .iter()
                .zip(bag.h.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((same, format!("{} bytes round-tripped bit-exactly", buf.len())))
    })
}

fn checkpoint_round_trip_check(corrupt: bool) -> CheckResult {
    run_check("trainer/checkpoint-round-trip", CheckKind::Format, || {
        let spec = ModelSpec::new(FusionMode::Fluoroformer, 6, 3, 4, 4);
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            spec: spec.clone(),
            epoch: 3,
            val_c_index: Some(0.75),
            model: Model::<f32>::init(&spec, 5)?,
        };
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &ckpt)?;
        if corrupt {
            buf[0] ^= 0xFF;
        }
        let loaded = match load_checkpoint_from(&mut Cursor::new(&buf)) {
            Ok(l) => l,
            Err(e) => return Ok((false, format!("read back failed: {e}"))),
        };
        let LoadedCheckpoint::F32(back) = loaded else {
            return Ok((false, "precision changed across the round trip".into()));
        };
        let same = back.epoch == ckpt.epoch
            && back.val_c_index == ckpt.val_c_index
            && back.spec == ckpt.spec
            && back
                .model
                .named_params()
                .iter()
                .zip(ckpt.model.named_params())
                .all(|((an, at), (bn, bt))| {
                    *an == bn
                        && at.shape() == bt.shape()
                        && at
                            .data()
                            .iter()
                            .zip(bt.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                });
        Ok((same, format!("{} bytes round-tripped bit-exactly", buf.len())))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_every_check() {
        let results = run_selftest(FaultInjection::default());
        assert_eq!(results.len(), 8);
        for r in &results {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }

    #[test]
    fn check_names_are_unique() {
        let results = run_selftest(FaultInjection::default());
        let mut names: Vec<_> = results.iter().map(|r| r.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), results.len());
    }

    #[test]
    fn gradient_fault_is_detected() {
        let results = run_selftest(FaultInjection {
            perturb_gradient: true,
            ..Default::default()
        });
        let grad = results.iter().find(|r| r.name == "gradient/full-model").unwrap();
        assert!(!grad.passed, "perturbed gradient slipped through: {}", grad.detail);
        assert_eq!(grad.kind, CheckKind::Numeric);
        assert!(results.iter().filter(|r| !r.passed).count() == 1);
    }

    #[test]
    fn format_fault_is_detected() {
        let results = run_selftest(FaultInjection {
            corrupt_format: true,
            ..Default::default()
        });
        let ck = results
            .iter()
            .find(|r| r.name == "trainer/checkpoint-round-trip")
            .unwrap();
        assert!(!ck.passed, "corrupted magic slipped through: {}", ck.detail);
        assert_eq!(ck.kind, CheckKind::Format);
        assert!(results.iter().filter(|r| !r.passed).count() == 1);
    }
}

//! Epoch loop, per-fold training with validation checkpointing, evaluation,
//! and cross-validation orchestration.

use crate::error::{Error, Result};
use crate::fusion::{EmbeddedBag, NORM_EPS_DEFAULT};
use crate::metrics::{c_index, morans_i, HeatmapGrid};
use crate::model::{loss_graph, Model, ModelSpec};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::pipeline::manifest::ManifestRow;
use crate::survival::{hazards_from_logits, make_bins, risk_score, survival_curve, SurvivalTarget};
use crate::trainer::adamw::{AdamW, AdamWConfig};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::TrainConfig;
use crate::trainer::folds::{assert_no_leakage, make_folds, FoldSplit};
use crate::trainer::synth::SynthCohort;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct TrainSample<S: Scalar> {
    pub sample_id: String,
    pub patient_id: String,
    pub time_days: f64,
    pub censored: bool,
    pub bag: EmbeddedBag<S>,
}

/// Read every bag referenced by a manifest. Relative bag paths resolve
/// against the manifest's directory.
pub fn load_cohort<S: Scalar>(manifest_path: &Path) -> Result<Vec<TrainSample<S>>> {
    let rows = crate::pipeline::manifest::read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    rows.par_iter()
        .map(|row| {
            let path = if row.bag_path.is_absolute() {
                row.bag_path.clone()
            } else {
                base.join(&row.bag_path)
            };
            let mut bag = crate::pipeline::bagfile::read_bag(&path)?;
            bag.sample_id = row.sample_id.clone();
            Ok(TrainSample {
                sample_id: row.sample_id.clone(),
                patient_id: row.patient_id.clone(),
                time_days: row.time_days,
                censored: row.is_censored(),
                bag: bag.cast(),
            })
        })
        .collect()
}

/// In-memory assembly of a synthetic cohort, no disk round trip.
pub fn cohort_samples<S: Scalar>(cohort: &SynthCohort) -> Vec<TrainSample<S>> {
    cohort
        .rows
        .iter()
        .zip(&cohort.bags)
        .map(|(row, bag)| TrainSample {
            sample_id: row.sample_id.clone(),
            patient_id: row.patient_id.clone(),
            time_days: row.time_days,
            censored: row.is_censored(),
            bag: bag.cast(),
        })
        .collect()
}

pub fn manifest_rows_of<S: Scalar>(samples: &[TrainSample<S>]) -> Vec<ManifestRow> {
    samples
        .iter()
        .map(|s| ManifestRow {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            time_days: s.time_days,
            censored: u8::from(s.censored),
            bag_path: PathBuf::new(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_c_index: Option<f64>,
    pub checkpointed: bool,
}

#[derive(Debug)]
pub struct FoldOutcome<S: Scalar> {
    pub fold: usize,
    pub checkpoint: Checkpoint<S>,
    pub epochs: Vec<EpochRecord>,
    /// True when the validation C-index was never defined and the final
    /// epoch was checkpointed instead of a maximum.
    pub val_fallback: bool,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ (a.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b.wrapping_add(1)).wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

/// Risk per the survival head: sum of discrete survival probabilities.
pub fn risk_of_logits<S: Scalar>(logits: &Tensor<S>) -> Result<f64> {
    let hazards = hazards_from_logits(logits)?;
    let survival = survival_curve(&hazards)?;
    Ok(risk_score(&survival))
}

fn check_bags_agree<S: Scalar>(samples: &[TrainSample<S>]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("empty cohort"))?;
    let (m, d) = (first.bag.m(), first.bag.d_emb());
    for s in samples {
        if s.bag.m() != m || s.bag.d_emb() != d {
            return Err(Error::dim(format!(
                "bag {} is [K,{},{}], cohort started as [K,{m},{d}]",
                s.sample_id,
                s.bag.m(),
                s.bag.d_emb()
            )));
        }
    }
    Ok((m, d))
}

/// One gradient step on one bag. Returns the loss before the update.
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    bag: &EmbeddedBag<S>,
    target: &SurvivalTarget,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let h = g.constant(bag.h.clone())?;
    let (_, loss) = loss_graph(&mut g, &bound.vars, h, target)?;
    let loss_val = Scalar::to_f64(g.value(loss).item()?);
    g.backward(loss)?;
    let grads: Vec<Tensor<S>> = bound
        .param_ids
        .iter()
        .map(|&id| g.grad_tensor(id))
        .collect::<Result<_>>()?;
    let mut views = model.named_params_mut();
    opt.step(&mut views, &grads)?;
    Ok(loss_val)
}

pub fn train_fold<S: Scalar>(
    samples: &[TrainSample<S>],
    split: &FoldSplit,
    cfg: &TrainConfig,
) -> Result<FoldOutcome<S>> {
    let rows = manifest_rows_of(samples);
    assert_no_leakage(split, &rows)?;
    let (_, d_emb) = check_bags_agree(samples)?;
    let by_id: HashMap<&str, &TrainSample<S>> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let resolve = |ids: &[String]| -> Result<Vec<&TrainSample<S>>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::contract(format!("split names unknown sample {id:?}")))
            })
            .collect()
    };
    let train = resolve(&split.train)?;
    let val = resolve(&split.val)?;

    // hazard bins come from the training split only
    let train_times: Vec<f64> = train.iter().map(|s| s.time_days).collect();
    let train_cens: Vec<bool> = train.iter().map(|s| s.censored).collect();
    let bins = make_bins(&train_times, &train_cens, cfg.n_bin)?;
    let train_targets: Vec<SurvivalTarget> = train
        .iter()
        .map(|s| SurvivalTarget::new(s.time_days, s.censored, &bins))
        .collect::<Result<_>>()?;

    let spec = ModelSpec {
        mode: cfg.mode,
        d_emb,
        d_hid: cfg.d_hid,
        d_att: cfg.d_att,
        n_bin: cfg.n_bin,
        attn_bias: cfg.attn_bias,
        norm_eps: NORM_EPS_DEFAULT,
    };
    let mut model: Model<S> = Model::init(&spec, mix_seed(cfg.seed, split.fold as u64, 0))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        &model.named_params(),
    );

    let mut best: Option<(Model<S>, usize, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, split.fold as u64, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order {
            loss_sum += train_step(&mut model, &mut opt, &train[idx].bag, &train_targets[idx])?;
        }
        let mean_train_loss = loss_sum / train.len() as f64;

        let val_risks: Vec<f64> = val
            .par_iter()
            .map(|s| -> Result<f64> { risk_of_logits(&model.forward(&s.bag)?.logits) })
            .collect::<Result<_>>()?;
        let val_times: Vec<f64> = val.iter().map(|s| s.time_days).collect();
        let val_cens: Vec<bool> = val.iter().map(|s| s.censored).collect();
        let val_c_index = match c_index(&val_risks, &val_times, &val_cens) {
            Ok(c) => Some(c),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };

        let checkpointed = match (val_c_index, &best) {
            (Some(_), None) => true,
            (Some(c), Some((_, _, prev))) => c > *prev,
            (None, _) => false,
        };
        if checkpointed {
            best = Some((model.clone(), epoch, val_c_index.expect("checkpoint implies value")));
        }
        epochs.push(EpochRecord { fold: split.fold, epoch, mean_train_loss, val_c_index, checkpointed });
    }

    // no comparable validation pair in any epoch: keep the final state
    let val_fallback = best.is_none();
    let (best_model, best_epoch, best_val) = match best {
        Some((m, e, c)) => (m, e, Some(c)),
        None => (model, cfg.epochs, None),
    };
    Ok(FoldOutcome {
        fold: split.fold,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            spec,
            epoch: best_epoch,
            val_c_index: best_val,
            model: best_model,
        },
        epochs,
        val_fallback,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub c_index: f64,
    /// (sample_id, risk), in input order.
    pub risks: Vec<(String, f64)>,
    /// (sample_id, Moran's I of the patch-attention grid), None where the
    /// statistic is undefined (single patch, constant attention).
    pub morans: Vec<(String, Option<f64>)>,
}

pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[&TrainSample<S>]) -> Result<Evaluation> {
    let per_sample: Vec<(f64, Option<f64>)> = samples
        .par_iter()
        .map(|s| -> Result<(f64, Option<f64>)> {
            let out = model.forward(&s.bag)?;
            let risk = risk_of_logits(&out.logits)?;
            let attn: Vec<f64> = out.patch_attention.data().iter().map(|&v| Scalar::to_f64(v)).collect();
            let moran = match HeatmapGrid::from_patches(&s.bag.coords, &attn).and_then(|g| morans_i(&g)) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok((risk, moran))
        })
        .collect::<Result<_>>()?;
    let risks: Vec<(String, f64)> = samples
        .iter()
        .zip(&per_sample)
        .map(|(s, (r, _))| (s.sample_id.clone(), *r))
        .collect();
    let morans: Vec<(String, Option<f64>)> = samples
        .iter()
        .zip(&per_sample)
        .map(|(s, (_, m))| (s.sample_id.clone(), *m))
        .collect();
    let times: Vec<f64> = samples.iter().map(|s| s.time_days).collect();
    let cens: Vec<bool> = samples.iter().map(|s| s.censored).collect();
    let risk_values: Vec<f64> = per_sample.iter().map(|(r, _)| *r).collect();
    let c = c_index(&risk_values, &times, &cens)?;
    Ok(Evaluation { c_index: c, risks, morans })
}

#[derive(Debug)]
pub struct FoldRun<S: Scalar> {
    pub outcome: FoldOutcome<S>,
    pub test_ids: Vec<String>,
    pub eval: Evaluation,
}

#[derive(Debug)]
pub struct CrossValidation<S: Scalar> {
    pub config: TrainConfig,
    pub folds: Vec<FoldRun<S>>,
}

impl<S: Scalar> CrossValidation<S> {
    pub fn test_c_indices(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.eval.c_index).collect()
    }

    pub fn mean_test_c(&self) -> f64 {
        let cs = self.test_c_indices();
        cs.iter().sum::<f64>() / cs.len() as f64
    }

    /// Sample standard deviation over folds; 0 for a single fold.
    pub fn std_test_c(&self) -> f64 {
        let cs = self.test_c_indices();
        if cs.len() < 2 {
            return 0.0;
        }
        let mean = self.mean_test_c();
        (cs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (cs.len() - 1) as f64).sqrt()
    }

    /// Mean Moran's I over every test slide where it is defined.
    pub fn mean_moran(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .folds
            .iter()
            .flat_map(|f| f.eval.morans.iter().filter_map(|(_, m)| *m))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Per-fold Moran's I means, skipping undefined slides.
    pub fn fold_morans(&self) -> Vec<Option<f64>> {
        self.folds
            .iter()
            .map(|f| {
                let vals: Vec<f64> = f.eval.morans.iter().filter_map(|(_, m)| *m).collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str("fold  test C-index  MI\n");
        for (f, moran) in self.folds.iter().zip(self.fold_morans()) {
            let mi = moran.map_or("     -".to_string(), |m| format!("{m:+.4}"));
            out.push_str(&format!("{:<4}  {:>12.4}  {mi}\n", f.outcome.fold, f.eval.c_index));
        }
        let mi = self.mean_moran().map_or("     -".to_string(), |m| format!("{m:+.4}"));
        out.push_str(&format!(
            "mean  {:.4} +/- {:.4}  {mi}\n",
            self.mean_test_c(),
            self.std_test_c()
        ));
        out
    }
}

/// Full k-fold run. Folds train concurrently; each is seeded independently,
/// so the result does not depend on scheduling.
pub fn cross_validate<S: Scalar>(
    samples: &[TrainSample<S>],
    cfg: &TrainConfig,
) -> Result<CrossValidation<S>> {
    let rows = manifest_rows_of(samples);
    let splits = make_folds(&rows, cfg.folds, cfg.seed)?;
    let by_id: HashMap<&str, &TrainSample<S>> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let folds: Vec<FoldRun<S>> = splits
        .par_iter()
        .map(|split| -> Result<FoldRun<S>> {
            let outcome = train_fold(samples, split, cfg)?;
            let test: Vec<&TrainSample<S>> = split
                .test
                .iter()
                .map(|id| by_id[id.as_str()])
                .collect();
            let eval = evaluate(&outcome.checkpoint.model, &test)?;
            Ok(FoldRun { outcome, test_ids: split.test.clone(), eval })
        })
        .collect::<Result<_>>()?;
    Ok(CrossValidation { config: cfg.clone(), folds })
}

/// One JSON object per line, the whole training history of a run.
pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;
    use crate::trainer::synth::{synth_cohort, SynthConfig, SynthKind};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            mode: FusionMode::Fluoroformer,
            lr: 1e-3,
            epochs: 2,
            folds: 3,
            d_hid: 4,
            d_att: 8,
            n_bin: 3,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_cohort(seed: u64) -> Vec<TrainSample<f32>> {
        let cohort = synth_cohort(&SynthConfig {
            kind: SynthKind::Linear,
            n_samples: 24,
            m: 2,
            d_emb: 8,
            grid: 2,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        cohort_samples(&cohort)
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let samples = tiny_cohort(2);
        let rows = manifest_rows_of(&samples);
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 1, ..tiny_cfg() };
        let splits = make_folds(&rows, cfg.folds, cfg.seed).unwrap();
        let outcome = train_fold(&samples, &splits[0], &cfg).unwrap();
        let init: Model<f32> =
            Model::init(&outcome.checkpoint.spec, mix_seed(cfg.seed, 0, 0)).unwrap();
        for ((name, a), (_, b)) in outcome
            .checkpoint
            .model
            .named_params()
            .iter()
            .zip(init.named_params())
        {
            assert_eq!(a.data(), b.data(), "{name} moved with lr = 0");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let samples = tiny_cohort(3);
        let cfg = tiny_cfg();
        let a = cross_validate(&samples, &cfg).unwrap();
        let b = cross_validate(&samples, &cfg).unwrap();
        assert_eq!(a.summary_table(), b.summary_table());
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            let bits = |m: &Model<f32>| -> Vec<u32> {
                m.named_params()
                    .iter()
                    .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                    .collect()
            };
            assert_eq!(bits(&fa.outcome.checkpoint.model), bits(&fb.outcome.checkpoint.model));
            for (ea, eb) in fa.outcome.epochs.iter().zip(&fb.outcome.epochs) {
                assert_eq!(ea.mean_train_loss.to_bits(), eb.mean_train_loss.to_bits());
            }
        }
    }

    #[test]
    fn loss_decreases_over_first_five_epochs_median_of_five_seeds() {
        let mut drops = Vec::new();
        for seed in 0..5 {
            let cohort = synth_cohort(&SynthConfig {
                kind: SynthKind::Linear,
                n_samples: 30,
                m: 2,
                d_emb: 8,
                grid: 2,
                seed: 100 + seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let samples: Vec<TrainSample<f32>> = cohort_samples(&cohort);
            let cfg = TrainConfig { epochs: 5, lr: 1e-3, seed, ..tiny_cfg() };
            let rows = manifest_rows_of(&samples);
            let splits = make_folds(&rows, cfg.folds, cfg.seed).unwrap();
            let outcome = train_fold(&samples, &splits[0], &cfg).unwrap();
            drops.push(outcome.epochs[0].mean_train_loss - outcome.epochs[4].mean_train_loss);
        }
        drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = drops[2];
        assert!(median > 0.0, "median loss drop {median} over seeds, drops {drops:?}");
    }

    #[test]
    fn checkpoint_epoch_carries_best_validation_c() {
        let samples = tiny_cohort(5);
        let rows = manifest_rows_of(&samples);
        let cfg = TrainConfig { epochs: 4, ..tiny_cfg() };
        let splits = make_folds(&rows, cfg.folds, cfg.seed).unwrap();
        let outcome = train_fold(&samples, &splits[0], &cfg).unwrap();
        if let Some(best) = outcome.checkpoint.val_c_index {
            let max = outcome
                .epochs
                .iter()
                .filter_map(|e| e.val_c_index)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(best, max);
            assert!(!outcome.val_fallback);
        } else {
            assert!(outcome.val_fallback);
            assert_eq!(outcome.checkpoint.epoch, cfg.epochs);
        }
    }

    #[test]
    fn undefined_validation_c_falls_back_to_last_epoch() {
        // single all-censored validation sample: no comparable pairs ever
        let mut samples = tiny_cohort(7);
        for s in &mut samples {
            s.censored = true;
        }
        // keep enough events in training for bin construction
        for (i, s) in samples.iter_mut().enumerate() {
            if i % 2 == 0 {
                s.censored = false;
            }
        }
        let rows = manifest_rows_of(&samples);
        let cfg = tiny_cfg();
        let splits = make_folds(&rows, cfg.folds, cfg.seed).unwrap();
        // force the validation split to be uninformative: censor every val sample
        let val_ids: Vec<String> = splits[0].val.clone();
        for s in &mut samples {
            if val_ids.contains(&s.sample_id) {
                s.censored = true;
            }
        }
        let outcome = train_fold(&samples, &splits[0], &cfg).unwrap();
        assert!(outcome.val_fallback);
        assert_eq!(outcome.checkpoint.epoch, cfg.epochs);
        assert_eq!(outcome.checkpoint.val_c_index, None);
        assert!(outcome.epochs.iter().all(|e| e.val_c_index.is_none()));
    }

    #[test]
    fn evaluate_risks_match_recomputation_and_c_index_is_passthrough() {
        let samples = tiny_cohort(9);
        let spec = ModelSpec::new(FusionMode::Fluoroformer, 8, 4, 8, 3);
        let model: Model<f32> = Model::init(&spec, 42).unwrap();
        let refs: Vec<&TrainSample<f32>> = samples.iter().take(10).collect();
        let eval = evaluate(&model, &refs).unwrap();
        for (s, (id, risk)) in refs.iter().zip(&eval.risks) {
            assert_eq!(&s.sample_id, id);
            let out = model.forward(&s.bag).unwrap();
            let want = risk_of_logits(&out.logits).unwrap();
            assert_eq!(*risk, want);
        }
        let times: Vec<f64> = refs.iter().map(|s| s.time_days).collect();
        let cens: Vec<bool> = refs.iter().map(|s| s.censored).collect();
        let risks: Vec<f64> = eval.risks.iter().map(|(_, r)| *r).collect();
        assert_eq!(eval.c_index, c_index(&risks, &times, &cens).unwrap());
    }

    #[test]
    fn single_sample_test_fold_surfaces_undefined_metric() {
        let samples = tiny_cohort(11);
        let spec = ModelSpec::new(FusionMode::Fluoroformer, 8, 4, 8, 3);
        let model: Model<f32> = Model::init(&spec, 1).unwrap();
        let refs: Vec<&TrainSample<f32>> = samples.iter().take(1).collect();
        assert!(evaluate(&model, &refs).is_err());
    }

    #[test]
    fn epoch_log_is_one_json_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let records = vec![
            EpochRecord { fold: 0, epoch: 1, mean_train_loss: 1.5, val_c_index: Some(0.6), checkpointed: true },
            EpochRecord { fold: 0, epoch: 2, mean_train_loss: 1.2, val_c_index: None, checkpointed: false },
        ];
        write_epoch_log(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["epoch"], 1);
        assert_eq!(v["val_c_index"], 0.6);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert!(v["val_c_index"].is_null());
    }
}

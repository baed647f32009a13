//! Discrete-time survival machinery: quartile bins over event times, hazards
//! from logits, the survival curve, the censored negative log-likelihood, and
//! the scalar risk score.
//!
//! Conventions fixed here and relied on everywhere else:
//! - `censored = true` means the event was not observed; only the
//!   `-log S(bin)` term contributes to the loss.
//! - Bins are right-closed: `bin(t)` = number of cutoffs strictly below `t`,
//!   so a time equal to a cutoff falls in the lower bin.
//! - The risk score `r = sum_j S_j` is a survival score: larger values mean
//!   longer predicted survival.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, VarId};

/// Floor for every log argument in the loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Time-axis discretization: `cutoffs.len() + 1` bins.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinSpec {
    /// Strictly ascending interior boundaries, in days.
    pub cutoffs: Vec<f64>,
}

impl BinSpec {
    pub fn new(cutoffs: Vec<f64>) -> Result<Self> {
        if cutoffs.is_empty() {
            return Err(Error::config("bin spec needs at least one cutoff"));
        }
        if cutoffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("bin cutoffs must be finite"));
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "bin cutoffs must be strictly ascending, got {cutoffs:?}"
            )));
        }
        Ok(BinSpec { cutoffs })
    }

    pub fn n_bin(&self) -> usize {
        self.cutoffs.len() + 1
    }

    /// Number of cutoffs strictly below `time`; ties fall in the lower bin.
    pub fn bin_of(&self, time: f64) -> usize {
        self.cutoffs.iter().filter(|&&c| c < time).count()
    }
}

/// Ground truth for one sample, already discretized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalTarget {
    pub time: f64,
    pub censored: bool,
    pub bin: usize,
}

impl SurvivalTarget {
    pub fn new(time: f64, censored: bool, bins: &BinSpec) -> Result<Self> {
        if !time.is_finite() || time < 0.0 {
            return Err(Error::contract(format!("survival time must be a finite non-negative number of days, got {time}")));
        }
        Ok(SurvivalTarget {
            time,
            censored,
            bin: bins.bin_of(time),
        })
    }
}

/// Everything derived from one logit vector.
#[derive(Debug, Clone)]
pub struct SurvivalOutput<S: Scalar> {
    /// `[N_bin]`, each in (0,1)
    pub hazards: Tensor<S>,
    /// `[N_bin]`, non-increasing
    pub survival: Tensor<S>,
    pub risk: f64,
    pub loss: f64,
}

/// Percentile cutoffs over uncensored event times of the training fold.
/// Percentile positions use linear interpolation at `(n-1)*q` over the
/// sorted event times.
pub fn make_bins(times: &[f64], censored: &[bool], n_bin: usize) -> Result<BinSpec> {
    if times.len() != censored.len() {
        return Err(Error::contract("times and censor flags must have equal length"));
    }
    if n_bin < 2 {
        return Err(Error::config("need at least 2 bins"));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    events.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let mut distinct = events.clone();
    distinct.dedup();
    if distinct.len() < n_bin {
        return Err(Error::config(format!(
            "need at least {n_bin} distinct uncensored event times, got {}",
            distinct.len()
        )));
    }
    let n = events.len();
    let mut cutoffs = Vec::with_capacity(n_bin - 1);
    for q in 1..n_bin {
        let p = q as f64 / n_bin as f64;
        let pos = (n - 1) as f64 * p;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        cutoffs.push(events[lo] + frac * (events[hi] - events[lo]));
    }
    BinSpec::new(cutoffs)
}

/// Elementwise sigmoid, saturating gracefully at extreme logits.
pub fn hazards_from_logits<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let h = g.sigm(l)?;
    Ok(g.value(h).clone())
}

fn check_hazard_range<S: Scalar>(hazards: &Tensor<S>) -> Result<()> {
    for &h in hazards.data() {
        let v = h.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::numeric(format!("hazard {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// `S_j = prod_{s<=j} (1 - h_s)`, with `S(-1) = 1` implicit.
pub fn survival_curve<S: Scalar>(hazards: &Tensor<S>) -> Result<Tensor<S>> {
    check_hazard_range(hazards)?;
    let mut g = Graph::new();
    let h = g.constant(hazards.clone())?;
    let ones = g.constant(Tensor::full(hazards.shape().to_vec(), S::one()))?;
    let om = g.sub(ones, h)?;
    let s = g.cumprod(om)?;
    Ok(g.value(s).clone())
}

/// Sum of the survival curve; higher means longer predicted survival.
pub fn risk_score<S: Scalar>(survival: &Tensor<S>) -> f64 {
    let mut acc = 0.0;
    for &v in survival.data() {
        acc += v.to_f64();
    }
    acc
}

/// Censored NLL over the graph: logits `[N_bin]` to a scalar loss.
///
/// event:    `L = -log S(bin-1) - log h(bin)`   (the `S(-1)=1` term vanishes)
/// censored: `L = -log S(bin)`
pub fn nll_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits: VarId,
    target: &SurvivalTarget,
) -> Result<VarId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 1 {
        return Err(Error::dim(format!("loss expects [N_bin] logits, got {shape:?}")));
    }
    let n_bin = shape[0];
    if target.bin >= n_bin {
        return Err(Error::contract(format!(
            "target bin {} out of range for {n_bin} bins",
            target.bin
        )));
    }
    let hazards = g.sigm(logits)?;
    let ones = g.constant(Tensor::full(vec![n_bin], S::one()))?;
    let om = g.sub(ones, hazards)?;
    let surv = g.cumprod(om)?;

    if target.censored {
        let st = g.index(surv, target.bin)?;
        let log_st = g.log_clamped(st, LOG_FLOOR)?;
        g.scale(log_st, -1.0)
    } else {
        let ht = g.index(hazards, target.bin)?;
        let log_ht = g.log_clamped(ht, LOG_FLOOR)?;
        if target.bin == 0 {
            g.scale(log_ht, -1.0)
        } else {
            let sp = g.index(surv, target.bin - 1)?;
            let log_sp = g.log_clamped(sp, LOG_FLOOR)?;
            let total = g.add(log_ht, log_sp)?;
            g.scale(total, -1.0)
        }
    }
}

/// Plain-value NLL from hazards.
pub fn nll_loss<S: Scalar>(hazards: &Tensor<S>, target: &SurvivalTarget) -> Result<f64> {
    check_hazard_range(hazards)?;
    let n_bin = hazards.numel();
    if target.bin >= n_bin {
        return Err(Error::contract(format!(
            "target bin {} out of range for {n_bin} bins",
            target.bin
        )));
    }
    let surv = survival_curve(hazards)?;
    let ln = |v: f64| v.max(LOG_FLOOR).ln();
    let loss = if target.censored {
        -ln(surv.data()[target.bin].to_f64())
    } else {
        let s_prev = if target.bin == 0 {
            1.0
        } else {
            surv.data()[target.bin - 1].to_f64()
        };
        -ln(s_prev) - ln(hazards.data()[target.bin].to_f64())
    };
    Ok(loss)
}

/// Hazards, curve, risk, and loss from one logit vector.
pub fn survival_output<S: Scalar>(
    logits: &Tensor<S>,
    target: &SurvivalTarget,
) -> Result<SurvivalOutput<S>> {
    let hazards = hazards_from_logits(logits)?;
    let survival = survival_curve(&hazards)?;
    let risk = risk_score(&survival);
    let loss = nll_loss(&hazards, target)?;
    Ok(SurvivalOutput {
        hazards,
        survival,
        risk,
        loss,
    })
}

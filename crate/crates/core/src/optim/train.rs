//! Segmented output-error training with a held-out record as the model
//! selector, plus a multi-start wrapper.
//!
//! The damped solver runs in fixed-length segments with the damping reset at
//! each seam; after every segment the current fit is scored on a held-out
//! record and the best-scoring checkpoint is kept. Training continues past a
//! worsening held-out score (the train-side descent is still useful), the
//! checkpoint just stops moving. A run ends when the inner solver converges,
//! when the held-out score has not improved for `patience` segments, when
//! the segment budget runs out, or, once the score is at or below the gate,
//! after `post_gate_patience` further segments without improvement. The
//! multi-start wrapper tries deterministic starts in order and stops at the
//! first gated run, keeping the best checkpoint seen overall.

use super::{lm_optimize, LmConfig, Termination};
use crate::coeffs::CoefficientMap;
use crate::delta::ModelOrders;
use crate::error::{Error, Result};
use crate::predictor::{predict, Dataset};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationConfig {
    /// Solver iterations per segment; the damping restarts at `lambda_init`
    /// every segment.
    pub segment_iters: usize,
    pub max_segments: usize,
    /// Segments without a held-out improvement before giving up.
    pub patience: usize,
    /// Same, once the best held-out cost is at or below the gate.
    pub post_gate_patience: usize,
    /// Absolute sum-squared held-out cost at or below which the run counts
    /// as gated.
    pub gate: Option<f64>,
    /// Per-segment solver settings; `max_iters` is overridden by
    /// `segment_iters`.
    pub inner: LmConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            segment_iters: 150,
            max_segments: 16,
            patience: 8,
            post_gate_patience: 4,
            gate: None,
            inner: LmConfig {
                param_tol: 1e-13,
                ..LmConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStop {
    /// The inner solver reported a vanishing step.
    Converged,
    /// Gate reached and the held-out score then idled.
    GatePassed,
    /// Held-out score idled without reaching the gate.
    Patience,
    /// Segment budget exhausted.
    Budget,
}

/// One segment boundary: cumulative accepted iterations so far, the running
/// fit's costs (absolute sum-squared) on both records.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegmentRecord {
    pub iterations: usize,
    pub train_cost: f64,
    pub val_cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<M> {
    /// Checkpoint with the best held-out cost (the final state if no segment
    /// scored finite).
    pub model: M,
    /// Held-out sum-squared cost at the checkpoint; NaN if never finite.
    pub val_cost: f64,
    /// Training sum-squared cost of the checkpoint model.
    pub train_cost: f64,
    /// Cumulative accepted iterations when the checkpoint was taken.
    pub selected_at: usize,
    pub segments: Vec<SegmentRecord>,
    pub stop: TrainingStop,
    /// True when `val_cost` is at or below the gate; always false without
    /// one.
    pub certified: bool,
}

/// Trains `start` on `train`, selecting the returned model by its cost on
/// `val`. Scoring failures on the held-out record (unstable inverse filter,
/// overflow) count as "not better", never as errors.
pub fn validated_training<M: CoefficientMap>(
    start: &M,
    train: &Dataset,
    val: &Dataset,
    orders: ModelOrders,
    cfg: &ValidationConfig,
) -> Result<TrainingOutcome<M>> {
    if cfg.segment_iters == 0 || cfg.max_segments == 0 {
        return Err(Error::InvalidInput(
            "segmented training needs at least one segment of at least one iteration".into(),
        ));
    }
    let seg_cfg = LmConfig {
        max_iters: cfg.segment_iters,
        ..cfg.inner.clone()
    };

    let mut current = start.clone();
    let mut best: Option<(f64, usize, M)> = None;
    let mut since_best = 0usize;
    let mut segments = Vec::new();
    let mut total_iters = 0usize;
    let mut stop = TrainingStop::Budget;

    for _ in 0..cfg.max_segments {
        let (fit, report) = lm_optimize(&current, train, orders, &seg_cfg)?;
        // A segment that accepts no step would replay identically forever
        // (the solver is deterministic); the first segment is still recorded
        // so the start itself gets scored.
        if report.iterations == 0 && !segments.is_empty() {
            stop = TrainingStop::Converged;
            break;
        }
        total_iters += report.iterations;
        let train_cost = report.final_cost().unwrap_or(f64::NAN);
        let val_cost = predict(&fit, val, orders)
            .map(|p| p.cost)
            .unwrap_or(f64::NAN);
        segments.push(SegmentRecord {
            iterations: total_iters,
            train_cost,
            val_cost,
        });

        let better = match &best {
            None => val_cost.is_finite(),
            Some((bv, _, _)) => val_cost < *bv,
        };
        if better {
            best = Some((val_cost, total_iters, fit.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        current = fit;

        let gated = match (&best, cfg.gate) {
            (Some((bv, _, _)), Some(gate)) => *bv <= gate,
            _ => false,
        };
        if report.termination == Termination::ParamTol || report.iterations == 0 {
            stop = TrainingStop::Converged;
            break;
        }
        if gated && since_best >= cfg.post_gate_patience {
            stop = TrainingStop::GatePassed;
            break;
        }
        if since_best >= cfg.patience {
            stop = TrainingStop::Patience;
            break;
        }
    }

    let (val_cost, selected_at, model) = match best {
        Some((v, at, m)) => (v, at, m),
        None => (f64::NAN, total_iters, current),
    };
    let train_cost = predict(&model, train, orders)
        .map(|p| p.cost)
        .unwrap_or(f64::NAN);
    let certified = cfg.gate.is_some_and(|gate| val_cost <= gate);
    Ok(TrainingOutcome {
        model,
        val_cost,
        train_cost,
        selected_at,
        segments,
        stop,
        certified,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RestartConfig {
    /// Start indices tried in order: 0, 1, …, starts − 1.
    pub starts: u64,
    pub validation: ValidationConfig,
}

/// What one start achieved, without the model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StartRecord {
    pub start: u64,
    pub val_cost: f64,
    pub train_cost: f64,
    pub selected_at: usize,
    pub stop: TrainingStop,
    pub certified: bool,
}

#[derive(Debug, Clone)]
pub struct RestartOutcome<M> {
    pub best: TrainingOutcome<M>,
    pub best_start: u64,
    /// Every start actually run, in order; stops early at the first gated
    /// run.
    pub runs: Vec<StartRecord>,
}

/// Runs `validated_training` from `make_start(0)`, `make_start(1)`, … until
/// a run passes the gate or the start budget is spent, returning the best
/// checkpoint by held-out cost across all runs.
pub fn restarted_training<M, F>(
    make_start: F,
    train: &Dataset,
    val: &Dataset,
    orders: ModelOrders,
    cfg: &RestartConfig,
) -> Result<RestartOutcome<M>>
where
    M: CoefficientMap,
    F: Fn(u64) -> Result<M>,
{
    if cfg.starts == 0 {
        return Err(Error::InvalidInput("multi-start needs at least one start".into()));
    }
    let mut runs = Vec::new();
    let mut best: Option<(u64, TrainingOutcome<M>)> = None;
    for start in 0..cfg.starts {
        let initial = make_start(start)?;
        let outcome = validated_training(&initial, train, val, orders, &cfg.validation)?;
        runs.push(StartRecord {
            start,
            val_cost: outcome.val_cost,
            train_cost: outcome.train_cost,
            selected_at: outcome.selected_at,
            stop: outcome.stop,
            certified: outcome.certified,
        });
        let better = match &best {
            None => outcome.val_cost.is_finite(),
            Some((_, b)) => outcome.val_cost < b.val_cost,
        };
        let gated = outcome.certified;
        if better {
            best = Some((start, outcome));
        }
        if gated {
            break;
        }
    }
    let (best_start, best) = best.ok_or_else(|| {
        Error::NonFinite("no start produced a finite held-out cost".into())
    })?;
    Ok(RestartOutcome {
        best,
        best_start,
        runs,
    })
}

//! Mean-teacher semi-supervised training core: EMA teacher, dynamic
//! entropy-percentile pseudo-label filtering over K stages, the filtered
//! consistency loss with in-plane rotation alignment, supervised NLL, and the
//! two-phase protocol.
//!
//! Determinism: every random choice is drawn from a ChaCha stream derived
//! statelessly from (seed, purpose tag, global iteration, slot). Batch
//! fan-out runs through `parallel::map_*` (index-ordered) and reductions are
//! sequential folds, so training is bit-reproducible regardless of thread
//! count, and skipping a consumer (e.g. lambda = 0 skips the unsupervised
//! term) cannot shift any other stream.

use crate::augment::{self, AugConfig, Image};
use crate::config::ExperimentConfig;
use crate::data::{DataBundle, DataSet, Sample};
use crate::eval::{self, EvalError};
use crate::fisher::{self, FisherError, FisherStats};
use crate::net::{self, NetError, NetGrads, NetParams, OptimState};
use crate::so3::{geodesic_angle_deg, inplane_rotation, Rotation};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SslError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Aug(#[from] augment::AugError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("entropy list is empty")]
    EmptyEntropies,
    #[error("keep fraction must be in (0, 1], got {0}")]
    BadKeepFraction(f64),
    #[error("dynamic filtering needs a threshold; run update_threshold first")]
    MissingThreshold,
    #[error("labeled split is empty")]
    NoLabeledData,
    #[error("training diverged (non-finite loss) at iteration {iter}")]
    Diverged { iter: u64, last_good: Box<TrainState> },
}

/// Pseudo-label filtering strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Entropy percentile threshold, recomputed over K stages.
    DynamicEntropy,
    /// Entropy threshold fixed up front.
    FixedEntropy,
    /// Keep when teacher-mode and student-mode agree within an angle.
    GeodesicDistance,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    pub kind: FilterKind,
    /// delta: fraction of unlabeled data retained by the percentile rule.
    pub keep_fraction: f64,
    /// tau for FixedEntropy (nats).
    pub fixed_tau: f64,
    /// Threshold for GeodesicDistance, degrees.
    pub geo_thresh_deg: f64,
    /// K: number of threshold-update stages in phase 2.
    pub stages: usize,
    /// lambda: weight of the unsupervised loss.
    pub lambda: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            kind: FilterKind::DynamicEntropy,
            keep_fraction: 0.75,
            fixed_tau: -2.0,
            geo_thresh_deg: 30.0,
            stages: 4,
            lambda: 1.0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(format!("keep_fraction must be in (0, 1], got {}", self.keep_fraction));
        }
        if self.stages == 0 {
            return Err("stages must be >= 1".into());
        }
        if self.lambda < 0.0 {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.geo_thresh_deg <= 0.0 {
            return Err(format!("geo_thresh_deg must be positive, got {}", self.geo_thresh_deg));
        }
        Ok(())
    }
}

/// Paired student/teacher with optimizer and filter state. The teacher is
/// only ever written by [`ema_update`].
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: NetParams,
    pub teacher: NetParams,
    pub optim: OptimState,
    pub ema_decay: f64,
    /// Stage index in [1, K] during phase 2 (0 before).
    pub stage_k: usize,
    /// Current entropy threshold, defined once stage_k >= 1.
    pub tau_k: Option<f64>,
    /// Global iteration counter, continuous across phases.
    pub iter: u64,
}

impl TrainState {
    /// State reconstructed from a phase-1 checkpoint: teacher is an exact
    /// clone of the student, the optimizer starts fresh (the checkpoint
    /// format carries parameters only), and the iteration counter resumes at
    /// the configured phase-1 length so derived streams line up.
    pub fn from_phase1_params(params: NetParams, cfg: &ExperimentConfig) -> Self {
        TrainState {
            teacher: params.clone(),
            student: params,
            optim: OptimState::new(cfg.train.lr_phase2),
            ema_decay: cfg.train.ema_decay,
            stage_k: 0,
            tau_k: None,
            iter: cfg.train.phase1_iters,
        }
    }
}

/// teacher <- decay * teacher + (1 - decay) * student, entrywise.
pub fn ema_update(state: &mut TrainState) {
    let d = state.ema_decay;
    let s = state.student.as_slice();
    for (t, &sv) in state.teacher.as_mut_slice().iter_mut().zip(s) {
        *t = d * *t + (1.0 - d) * sv;
    }
}

/// Teacher entropies over the unlabeled set, on plain (un-augmented) images,
/// in sample order.
pub fn entropy_sweep(teacher: &NetParams, unlabeled: &DataSet) -> Result<Vec<f64>, SslError> {
    let out = crate::parallel::map_slice(&unlabeled.samples, |_, s| -> Result<f64, SslError> {
        let a = net::forward(teacher, &s.image)?;
        Ok(FisherStats::compute(&a)?.entropy)
    });
    out.into_iter().collect()
}

/// Linear-interpolation percentile (rank = 1 + delta (N - 1)) of an unsorted
/// list; delta = 1 returns the maximum.
pub fn update_threshold(entropies: &[f64], delta: f64) -> Result<f64, SslError> {
    if entropies.is_empty() {
        return Err(SslError::EmptyEntropies);
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(SslError::BadKeepFraction(delta));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = delta * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Pose-guided filter: keep when the two predictions agree within `thresh`.
pub fn geodesic_filter(r1: &Rotation, r2: &Rotation, thresh_deg: f64) -> bool {
    geodesic_angle_deg(r1, r2) <= thresh_deg
}

/// Pre-multiplies the parameter matrix by the in-plane rotation, which
/// rotates the distribution mode by M_theta and preserves its singular
/// values (hence its entropy).
pub fn align_teacher_params(a: &fisher::FisherParams, theta_deg: f64) -> fisher::FisherParams {
    fisher::FisherParams::new(inplane_rotation(theta_deg).matrix() * a.matrix())
}

/// Loss + gradients of one batch.
#[derive(Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: NetGrads,
    pub kept: usize,
    pub total: usize,
}

impl BatchLoss {
    fn zero(total: usize) -> Self {
        BatchLoss { loss: 0.0, grads: NetGrads::zeros(), kept: 0, total }
    }
}

// Stream purpose tags.
const TAG_INIT: u64 = 0x11;
const TAG_SUP_BATCH: u64 = 0x21;
const TAG_SUP_AUG: u64 = 0x22;
const TAG_UNSUP_BATCH: u64 = 0x31;
const TAG_UNSUP_AUG: u64 = 0x32;

// Batches are processed in this many fixed chunks: one gradient buffer per
// chunk and a fixed-order merge, so results don't depend on thread count.
const BATCH_CHUNKS: usize = 8;

fn chunk_bounds(n: usize, chunks: usize) -> Vec<(usize, usize)> {
    let chunks = chunks.min(n.max(1));
    (0..chunks)
        .map(|c| (c * n / chunks, (c + 1) * n / chunks))
        .collect()
}

/// Stateless stream derivation: splitmix64 over (seed, tag, iter, slot).
pub fn derived_rng(seed: u64, tag: u64, iter: u64, slot: u64) -> ChaCha12Rng {
    let mut x = seed
        ^ tag.wrapping_mul(0x9e3779b97f4a7c15)
        ^ iter.wrapping_mul(0xbf58476d1ce4e5b9)
        ^ slot.wrapping_mul(0x94d049bb133111eb);
    for _ in 0..2 {
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
    }
    ChaCha12Rng::seed_from_u64(x)
}

fn draw_batch_indices(seed: u64, tag: u64, iter: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = derived_rng(seed, tag, iter, 0);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Supervised NLL over a labeled batch with the weak pipeline (or strong if
/// configured) and matching label transforms.
pub fn sup_loss_batch(
    student: &NetParams,
    samples: &[&Sample],
    aug_cfg: &AugConfig,
    strong: bool,
    seed: u64,
    iter: u64,
) -> Result<BatchLoss, SslError> {
    let total = samples.len();
    if total == 0 {
        return Ok(BatchLoss::zero(0));
    }
    let donors: Vec<Image> = if strong {
        samples.iter().map(|s| s.image.clone()).collect()
    } else {
        Vec::new()
    };
    let bounds = chunk_bounds(total, BATCH_CHUNKS);
    let per = crate::parallel::map_slice(&bounds, |_, &(lo, hi)| -> Result<(f64, NetGrads), SslError> {
        let mut grads = NetGrads::zeros();
        let mut loss = 0.0;
        for i in lo..hi {
            let s = samples[i];
            let mut rng = derived_rng(seed, TAG_SUP_AUG, iter, i as u64);
            let label = s.label.expect("supervised batch needs labels");
            let (img, rec) = if strong {
                augment::strong_augment(&s.image, &donors, aug_cfg, &mut rng)?
            } else {
                augment::weak_augment(&s.image, aug_cfg, &mut rng)
            };
            // Label transforms for the pose-altering ops.
            let mut lbl = label;
            if rec.flipped {
                lbl = augment::flip_rotation(&lbl);
            }
            if rec.theta_deg != 0.0 {
                lbl = inplane_rotation(rec.theta_deg) * lbl;
            }
            let a = net::forward(student, &img)?;
            let stats = FisherStats::compute(&a)?;
            let (l, dl_da) = fisher::nll_loss_with_stats(&a, &stats, &lbl);
            net::backward_into(student, &img, &dl_da, &mut grads);
            loss += l;
        }
        Ok((loss, grads))
    });
    let mut loss = 0.0;
    let mut grads = NetGrads::zeros();
    for r in per {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / total as f64;
    grads.scale(inv);
    Ok(BatchLoss { loss: loss * inv, grads, kept: total, total })
}

/// Filtered unsupervised consistency loss over an unlabeled batch.
///
/// Per sample: teacher forward on the weak view, confidence gate, teacher
/// alignment by the strong view's recorded theta, cross entropy against the
/// student forward on the strong view. Mean over kept samples; zero loss and
/// gradients when everything is filtered out. The teacher never receives a
/// gradient.
pub fn unsup_loss_batch(
    state: &TrainState,
    samples: &[&Sample],
    policy: &FilterPolicy,
    aug_cfg: &AugConfig,
    seed: u64,
    iter: u64,
) -> Result<BatchLoss, SslError> {
    let total = samples.len();
    if total == 0 {
        return Ok(BatchLoss::zero(0));
    }
    if policy.kind == FilterKind::DynamicEntropy && state.tau_k.is_none() {
        return Err(SslError::MissingThreshold);
    }
    let donors: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let bounds = chunk_bounds(total, BATCH_CHUNKS);
    let per = crate::parallel::map_slice(&bounds, |_, &(lo, hi)| -> Result<(f64, NetGrads, usize), SslError> {
        let mut grads = NetGrads::zeros();
        let mut loss = 0.0;
        let mut kept = 0usize;
        for i in lo..hi {
            let s = samples[i];
            let mut rng = derived_rng(seed, TAG_UNSUP_AUG, iter, i as u64);
            let ((weak, _), (strong, strong_rec)) =
                augment::weak_strong_pair(&s.image, &donors, aug_cfg, &mut rng)?;
            let a_t = net::forward(&state.teacher, &weak)?;
            let t_stats = FisherStats::compute(&a_t)?;
            let keep = match policy.kind {
                FilterKind::DynamicEntropy => t_stats.entropy <= state.tau_k.expect("checked above"),
                FilterKind::FixedEntropy => t_stats.entropy <= policy.fixed_tau,
                FilterKind::GeodesicDistance => {
                    let a_s_weak = net::forward(&state.student, &weak)?;
                    geodesic_filter(&t_stats.mode, &fisher::mode(&a_s_weak), policy.geo_thresh_deg)
                }
            };
            if !keep {
                continue;
            }
            let e_t = inplane_rotation(strong_rec.theta_deg).matrix() * t_stats.expected_rotation();
            let a_s = net::forward(&state.student, &strong)?;
            let s_stats = FisherStats::compute(&a_s)?;
            let (l, dl_da) = fisher::cross_entropy_with_stats(&e_t, &a_s, &s_stats);
            net::backward_into(&state.student, &strong, &dl_da, &mut grads);
            loss += l;
            kept += 1;
        }
        Ok((loss, grads, kept))
    });
    let mut loss = 0.0;
    let mut grads = NetGrads::zeros();
    let mut kept = 0usize;
    for r in per {
        let (l, g, k) = r?;
        loss += l;
        grads.add_assign(&g);
        kept += k;
    }
    if kept > 0 {
        let inv = 1.0 / kept as f64;
        loss *= inv;
        grads.scale(inv);
    }
    Ok(BatchLoss { loss, grads, kept, total })
}

/// Total objective: supervised + lambda * unsupervised.
pub fn total_loss(sup: f64, unsup: f64, lambda: f64) -> f64 {
    sup + lambda * unsup
}

/// One CSV row of the training log.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iter: u64,
    pub stage: usize,
    pub tau: Option<f64>,
    pub keep_rate: Option<f64>,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub val_geodesic_deg: Option<f64>,
    pub val_mae_deg: Option<f64>,
    pub val_frobenius: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("iter,stage,tau,keep_rate,sup_loss,unsup_loss,val_geodesic_deg,val_mae_deg,val_frobenius\n");
        fn opt(x: Option<f64>) -> String {
            x.map(|v| v.to_string()).unwrap_or_default()
        }
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.stage,
                opt(r.tau),
                opt(r.keep_rate),
                r.sup_loss,
                r.unsup_loss,
                opt(r.val_geodesic_deg),
                opt(r.val_mae_deg),
                opt(r.val_frobenius)
            );
        }
        s
    }
}

fn fresh_state(cfg: &ExperimentConfig) -> TrainState {
    let mut init_rng = derived_rng(cfg.seed, TAG_INIT, 0, 0);
    let student = NetParams::init(&mut init_rng);
    TrainState {
        teacher: student.clone(),
        student,
        optim: OptimState::new(cfg.train.lr_phase1),
        ema_decay: cfg.train.ema_decay,
        stage_k: 0,
        tau_k: None,
        iter: 0,
    }
}

struct ValTracker {
    best_params: NetParams,
    best_geo: f64,
    validated: bool,
}

impl ValTracker {
    fn new(params: &NetParams) -> Self {
        ValTracker { best_params: params.clone(), best_geo: f64::INFINITY, validated: false }
    }

    fn observe(&mut self, params: &NetParams, geo: f64) {
        self.validated = true;
        if geo < self.best_geo {
            self.best_geo = geo;
            self.best_params = params.clone();
        }
    }
}

fn validate(params: &NetParams, val: &DataSet) -> Result<eval::EvalReport, SslError> {
    Ok(eval::evaluate_net(params, val)?)
}

/// Supervised training loop shared by phase 1 and the compute-matched
/// baselines. Starts fresh (None) or continues a given state; runs `iters`
/// steps; student ends at the best-on-validation parameters (or the final
/// ones when validation never ran). The teacher is left untouched except
/// when starting fresh.
pub fn run_supervised(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    start: Option<TrainState>,
    iters: u64,
) -> Result<(TrainState, TrainLog), SslError> {
    if data.labeled.samples.is_empty() {
        return Err(SslError::NoLabeledData);
    }
    let mut state = start.unwrap_or_else(|| fresh_state(cfg));
    let mut log = TrainLog::default();
    let mut tracker = ValTracker::new(&state.student);
    let n = data.labeled.samples.len();
    for _ in 0..iters {
        let giter = state.iter;
        let idx = draw_batch_indices(cfg.seed, TAG_SUP_BATCH, giter, n, cfg.train.batch_labeled);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.labeled.samples[i]).collect();
        let sup = sup_loss_batch(&state.student, &batch, &cfg.aug, false, cfg.seed, giter)?;
        if !sup.loss.is_finite() || !sup.grads.is_finite() {
            return Err(SslError::Diverged { iter: giter, last_good: Box::new(state) });
        }
        net::adam_update(&mut state.student, &sup.grads, &mut state.optim);
        state.iter += 1;

        let mut row = LogRow {
            iter: state.iter,
            stage: state.stage_k,
            tau: state.tau_k,
            keep_rate: None,
            sup_loss: sup.loss,
            unsup_loss: 0.0,
            val_geodesic_deg: None,
            val_mae_deg: None,
            val_frobenius: None,
        };
        if state.iter % cfg.train.val_interval == 0 && !data.val.samples.is_empty() {
            let rep = validate(&state.student, &data.val)?;
            tracker.observe(&state.student, rep.mean_geodesic_deg);
            row.val_geodesic_deg = Some(rep.mean_geodesic_deg);
            row.val_mae_deg = Some(rep.mae_deg);
            row.val_frobenius = Some(rep.mean_frobenius);
        }
        log.rows.push(row);
    }
    if tracker.validated {
        state.student = tracker.best_params;
    }
    Ok((state, log))
}

/// Phase 1: supervised training of the student, best-on-validation
/// selection, then the teacher is initialized as an exact clone.
pub fn run_phase1(cfg: &ExperimentConfig, data: &DataBundle) -> Result<(TrainState, TrainLog), SslError> {
    let (mut state, log) = run_supervised(cfg, data, None, cfg.train.phase1_iters)?;
    state.teacher = state.student.clone();
    Ok((state, log))
}

/// Phase 2: K equal stages; at each stage boundary the entropy threshold is
/// recomputed over the unlabeled sweep set. Each iteration combines one
/// labeled and one unlabeled batch, takes one optimizer step on the student,
/// then updates the teacher by EMA. Returns the final student (no best-model
/// swap), continuing phase 1's optimizer moments at the phase-2 rate.
pub fn run_phase2(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    mut state: TrainState,
) -> Result<(TrainState, TrainLog), SslError> {
    if data.labeled.samples.is_empty() {
        return Err(SslError::NoLabeledData);
    }
    let policy = cfg.filter;
    let t_total = cfg.train.phase2_iters;
    let k_stages = policy.stages as u64;
    state.optim.lr = cfg.train.lr_phase2;
    let mut log = TrainLog::default();
    let n_lab = data.labeled.samples.len();
    let n_unlab = data.unlabeled.samples.len();
    let use_unsup = policy.lambda > 0.0 && n_unlab > 0;

    let mut sweep_keep_rate = None;
    for local in 0..t_total {
        // Stage boundaries at floor(k T / K), k = 0..K-1; stage 1 starts
        // immediately.
        if use_unsup && policy.kind == FilterKind::DynamicEntropy {
            let boundary = (0..k_stages).any(|k| local == k * t_total / k_stages);
            if boundary {
                let entropies = entropy_sweep(&state.teacher, &data.unlabeled)?;
                let tau = update_threshold(&entropies, policy.keep_fraction)?;
                state.tau_k = Some(tau);
                state.stage_k += 1;
                let kept = entropies.iter().filter(|&&h| h <= tau).count();
                sweep_keep_rate = Some(kept as f64 / entropies.len() as f64);
            }
        }

        let giter = state.iter;
        let sup_idx = draw_batch_indices(cfg.seed, TAG_SUP_BATCH, giter, n_lab, cfg.train.batch_labeled);
        let sup_batch: Vec<&Sample> = sup_idx.iter().map(|&i| &data.labeled.samples[i]).collect();
        let sup = sup_loss_batch(
            &state.student,
            &sup_batch,
            &cfg.aug,
            cfg.train.labeled_strong_aug,
            cfg.seed,
            giter,
        )?;

        let unsup = if use_unsup {
            let idx =
                draw_batch_indices(cfg.seed, TAG_UNSUP_BATCH, giter, n_unlab, cfg.train.batch_unlabeled);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.unlabeled.samples[i]).collect();
            unsup_loss_batch(&state, &batch, &policy, &cfg.aug, cfg.seed, giter)?
        } else {
            BatchLoss::zero(0)
        };

        let loss = total_loss(sup.loss, unsup.loss, policy.lambda);
        if !loss.is_finite() || !sup.grads.is_finite() || !unsup.grads.is_finite() {
            return Err(SslError::Diverged { iter: giter, last_good: Box::new(state) });
        }
        let mut grads = sup.grads;
        if use_unsup {
            grads.add_scaled(&unsup.grads, policy.lambda);
        }
        net::adam_update(&mut state.student, &grads, &mut state.optim);
        ema_update(&mut state);
        state.iter += 1;

        let mut row = LogRow {
            iter: state.iter,
            stage: state.stage_k,
            tau: state.tau_k,
            keep_rate: if use_unsup && unsup.total > 0 {
                Some(unsup.kept as f64 / unsup.total as f64)
            } else {
                sweep_keep_rate
            },
            sup_loss: sup.loss,
            unsup_loss: unsup.loss,
            val_geodesic_deg: None,
            val_mae_deg: None,
            val_frobenius: None,
        };
        if state.iter % cfg.train.val_interval == 0 && !data.val.samples.is_empty() {
            let rep = validate(&state.student, &data.val)?;
            row.val_geodesic_deg = Some(rep.mean_geodesic_deg);
            row.val_mae_deg = Some(rep.mae_deg);
            row.val_frobenius = Some(rep.mean_frobenius);
        }
        log.rows.push(row);
    }
    Ok((state, log))
}

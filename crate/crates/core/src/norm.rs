//! The normalization family: BN, sigma-BN, their task-specific forms, and
//! the layer-norm analogues.
//!
//! Plain BN standardizes with mini-batch statistics and applies a per-channel
//! affine `gamma * xhat + beta`. The sigma variants replace the affine map
//! with a single bounded scale `sigmoid(gamma_raw) * xhat`, optionally plus a
//! frozen bias when converted from pretrained affine parameters. Task-specific
//! variants give every task its own parameter row and its own running
//! statistics; layer-norm variants normalize over the feature axes per sample
//! and keep no running statistics at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{channel_stats, sigmoid, NormStats, Tape, Var};
use crate::tensor::Tensor;

/// Train vs eval behaviour of batch-statistics variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Which member of the normalization family a state implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Shared batch norm with affine transform.
    Bn,
    /// Task-specific batch norm with affine transform.
    Tsbn,
    /// Shared sigmoid batch norm (bounded scale, no shift).
    SigmaBn,
    /// Task-specific sigmoid batch norm.
    TsSigmaBn,
    /// Task-specific layer norm with affine transform.
    Tsln,
    /// Task-specific sigmoid layer norm.
    TsSigmaLn,
}

impl NormVariant {
    /// Effective scale is `sigmoid(gamma_raw)` instead of `gamma` itself.
    pub fn is_sigma(self) -> bool {
        matches!(self, NormVariant::SigmaBn | NormVariant::TsSigmaBn | NormVariant::TsSigmaLn)
    }

    /// Normalizes per sample over the feature axes (no running statistics).
    pub fn is_layer(self) -> bool {
        matches!(self, NormVariant::Tsln | NormVariant::TsSigmaLn)
    }

    /// Each task owns a parameter row (and statistics row for BN kinds).
    pub fn is_task_specific(self) -> bool {
        matches!(
            self,
            NormVariant::Tsbn | NormVariant::TsSigmaBn | NormVariant::Tsln | NormVariant::TsSigmaLn
        )
    }

    /// Carries a learnable shift out of the box.
    pub fn has_affine_beta(self) -> bool {
        matches!(self, NormVariant::Bn | NormVariant::Tsbn | NormVariant::Tsln)
    }
}

/// Per-feature mini-batch statistics: mean and biased variance over the batch
/// (and spatial) axes, plus the reduction population size needed for the
/// unbiased running-variance correction.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Mean and biased per-feature variance of `x: [N,F]` or `[N,F,H,W]`.
///
/// The reduction population (batch times spatial) must be at least 2.
pub fn batch_stats(x: &Tensor) -> Result<BatchStats> {
    let shape = x.shape();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::Shape(format!("batch_stats expects [N,F] or [N,F,H,W], got {shape:?}")));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let count = n * spatial;
    if count < 2 {
        return Err(Error::DegenerateBatch(format!(
            "statistics over a population of {count} are undefined"
        )));
    }
    let (mean, var) = channel_stats(x.data(), n, c, spatial);
    Ok(BatchStats { mean, var, count })
}

/// Per-layer, per-task normalization state.
///
/// Shared variants (`Bn`, `SigmaBn`) store a single parameter/statistics row
/// regardless of the task count; task-specific variants store one row per
/// task. Layer-norm variants keep no running statistics.
#[derive(Debug, Clone)]
pub struct NormState {
    variant: NormVariant,
    num_tasks: usize,
    num_features: usize,
    /// Raw scale rows (pre-sigmoid for sigma variants), one `[F]` tensor per row.
    gamma: Vec<Tensor>,
    /// Shift rows; empty when the variant carries no beta.
    beta: Vec<Tensor>,
    beta_frozen: bool,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    initialized: Vec<bool>,
    momentum: f64,
    eps: f64,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

impl NormState {
    pub fn new(variant: NormVariant, num_tasks: usize, num_features: usize) -> Result<Self> {
        Self::with_hyperparams(variant, num_tasks, num_features, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_hyperparams(
        variant: NormVariant,
        num_tasks: usize,
        num_features: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if num_tasks == 0 || num_features == 0 {
            return Err(Error::Spec("norm state needs at least one task and one feature".into()));
        }
        if momentum <= 0.0 || momentum > 1.0 {
            return Err(Error::Parameter(format!("momentum {momentum} outside (0,1]")));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("epsilon {eps} must be positive")));
        }
        let rows = if variant.is_task_specific() { num_tasks } else { 1 };
        // sigma variants start at sigmoid(0) = 0.5; affine variants at identity
        let gamma_init = if variant.is_sigma() { 0.0 } else { 1.0 };
        let gamma = (0..rows)
            .map(|_| Tensor::filled(vec![num_features], gamma_init).with_requires_grad(true))
            .collect();
        let beta = if variant.has_affine_beta() {
            (0..rows).map(|_| Tensor::zeros(vec![num_features]).with_requires_grad(true)).collect()
        } else {
            Vec::new()
        };
        let stat_rows = if variant.is_layer() { 0 } else { rows };
        Ok(NormState {
            variant,
            num_tasks,
            num_features,
            gamma,
            beta,
            beta_frozen: false,
            running_mean: vec![vec![0.0; num_features]; stat_rows],
            running_var: vec![vec![1.0; num_features]; stat_rows],
            initialized: vec![false; stat_rows],
            momentum,
            eps,
        })
    }

    pub fn variant(&self) -> NormVariant {
        self.variant
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Number of distinct parameter rows (1 for shared variants).
    pub fn rows(&self) -> usize {
        self.gamma.len()
    }

    /// Maps a task index onto its parameter/statistics row.
    pub fn row_for_task(&self, task: usize) -> Result<usize> {
        if task >= self.num_tasks {
            return Err(Error::Index(format!(
                "task {task} out of range for {} tasks",
                self.num_tasks
            )));
        }
        Ok(if self.variant.is_task_specific() { task } else { 0 })
    }

    pub fn gamma_row(&self, row: usize) -> &Tensor {
        &self.gamma[row]
    }

    pub fn gamma_row_mut(&mut self, row: usize) -> &mut Tensor {
        &mut self.gamma[row]
    }

    pub fn beta_row(&self, row: usize) -> Option<&Tensor> {
        self.beta.get(row)
    }

    pub fn beta_row_mut(&mut self, row: usize) -> Option<&mut Tensor> {
        self.beta.get_mut(row)
    }

    pub fn has_beta(&self) -> bool {
        !self.beta.is_empty()
    }

    pub fn beta_frozen(&self) -> bool {
        self.beta_frozen
    }

    pub fn running_mean_row(&self, row: usize) -> &[f64] {
        &self.running_mean[row]
    }

    pub fn running_var_row(&self, row: usize) -> &[f64] {
        &self.running_var[row]
    }

    pub fn stats_initialized(&self, row: usize) -> bool {
        self.initialized[row]
    }

    /// Overwrites a statistics row wholesale (checkpoint restore).
    pub fn set_running_row(&mut self, row: usize, mean: Vec<f64>, var: Vec<f64>, init: bool) {
        self.running_mean[row] = mean;
        self.running_var[row] = var;
        self.initialized[row] = init;
    }

    /// Effective per-channel scale of a row: `sigmoid(gamma)` for sigma
    /// variants, `gamma` itself otherwise.
    pub fn effective_scale(&self, row: usize) -> Vec<f64> {
        let g = self.gamma[row].data();
        if self.variant.is_sigma() {
            g.iter().map(|&v| sigmoid(v)).collect()
        } else {
            g.to_vec()
        }
    }

    /// Records the normalization of `x` for `task` on `tape`.
    ///
    /// `gamma`/`beta` are the leased parameter rows for this task (see
    /// [`NormState::lease_row`]); `mask` forces channels to zero for pruning.
    /// Train mode on BN variants returns the mini-batch statistics so the
    /// caller can fold them into the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        task: usize,
        mode: Mode,
        gamma: Var,
        beta: Option<Var>,
        mask: Option<Vec<bool>>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let row = self.row_for_task(task)?;
        let xs = tape.shape(x);
        if xs.len() < 2 || xs[1] != self.num_features {
            return Err(Error::Shape(format!(
                "input has {} channels, norm state expects {}",
                xs.get(1).copied().unwrap_or(0),
                self.num_features
            )));
        }
        if beta.is_some() != self.has_beta() {
            return Err(Error::Contract("beta lease disagrees with norm state".into()));
        }

        let stats_kind = if self.variant.is_layer() {
            NormStats::PerSample
        } else {
            match mode {
                Mode::Train => NormStats::Batch,
                Mode::Eval => {
                    if !self.initialized[row] {
                        return Err(Error::UninitializedStats(format!(
                            "eval-mode forward for task {task} before any running-statistics update"
                        )));
                    }
                    NormStats::Fixed {
                        mean: self.running_mean[row].clone(),
                        var: self.running_var[row].clone(),
                    }
                }
            }
        };

        let (out, raw) =
            tape.norm(x, gamma, beta, self.variant.is_sigma(), self.eps, stats_kind, mask)?;
        Ok((out, raw.map(|(mean, var, count)| BatchStats { mean, var, count })))
    }

    /// Convenience wrapper that runs [`NormState::forward_on_tape`] on a
    /// scratch tape and returns plain tensors.
    pub fn forward_tensor(
        &self,
        x: &Tensor,
        task: usize,
        mode: Mode,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        let row = self.row_for_task(task)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gv = tape.constant(&self.gamma[row]);
        let bv = self.beta.get(row).map(|b| tape.constant(b));
        let (out, stats) = self.forward_on_tape(&mut tape, xv, task, mode, gv, bv, None)?;
        Ok((tape.to_tensor(out), stats))
    }

    /// Leases this task's parameter rows onto a tape. Frozen betas are leased
    /// as constants so they participate in the forward but receive no grads.
    pub fn lease_row(&self, tape: &mut Tape, task: usize) -> Result<(Var, Option<Var>)> {
        let row = self.row_for_task(task)?;
        let g = tape.leaf(&self.gamma[row]);
        let b = self.beta.get(row).map(|b| {
            if self.beta_frozen {
                tape.constant(b)
            } else {
                tape.leaf(b)
            }
        });
        Ok((g, b))
    }

    /// Folds mini-batch statistics into the addressed task's running
    /// estimates: `running <- (1-momentum)*running + momentum*batch`, with
    /// the unbiased `n/(n-1)` correction applied to the variance. Estimates
    /// start from the (0, 1) prior.
    pub fn update_running_stats(&mut self, task: usize, stats: &BatchStats) -> Result<()> {
        if self.variant.is_layer() {
            return Err(Error::Unsupported(
                "layer-norm variants keep no running statistics".into(),
            ));
        }
        let row = self.row_for_task(task)?;
        if stats.mean.len() != self.num_features || stats.var.len() != self.num_features {
            return Err(Error::Shape(format!(
                "statistics have {} features, norm state expects {}",
                stats.mean.len(),
                self.num_features
            )));
        }
        if stats.count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "cannot fold statistics with population {}",
                stats.count
            )));
        }
        let correction = stats.count as f64 / (stats.count as f64 - 1.0);
        let m = self.momentum;
        for f in 0..self.num_features {
            self.running_mean[row][f] = (1.0 - m) * self.running_mean[row][f] + m * stats.mean[f];
            self.running_var[row][f] =
                (1.0 - m) * self.running_var[row][f] + m * stats.var[f] * correction;
        }
        self.initialized[row] = true;
        Ok(())
    }
}

/// Result of converting pretrained affine BN parameters to sigma form.
#[derive(Debug, Clone)]
pub struct ConvertedRows {
    /// Inverse-sigmoid initialization for the raw scales.
    pub gamma_raw: Vec<f64>,
    /// Pretrained shifts, to be kept frozen.
    pub beta: Vec<f64>,
    /// How many scale entries fell outside `(clamp_delta, 1-clamp_delta)`.
    pub clamped: usize,
}

/// Maps pretrained affine parameters `(gamma_pre, beta_pre)` onto sigma-BN
/// rows: `gamma_raw = logit(clamp(gamma_pre, delta, 1-delta))`, beta copied
/// verbatim and flagged frozen by [`NormState::apply_pretrained`].
pub fn convert_pretrained(
    gamma_pre: &[f64],
    beta_pre: &[f64],
    clamp_delta: f64,
) -> Result<ConvertedRows> {
    if !(0.0..0.5).contains(&clamp_delta) || clamp_delta == 0.0 {
        return Err(Error::Parameter(format!("clamp_delta {clamp_delta} outside (0, 0.5)")));
    }
    if gamma_pre.len() != beta_pre.len() {
        return Err(Error::Shape(format!(
            "gamma_pre has {} entries, beta_pre {}",
            gamma_pre.len(),
            beta_pre.len()
        )));
    }
    let mut clamped = 0;
    let gamma_raw = gamma_pre
        .iter()
        .map(|&g| {
            let c = g.clamp(clamp_delta, 1.0 - clamp_delta);
            if c != g {
                clamped += 1;
            }
            (c / (1.0 - c)).ln()
        })
        .collect();
    Ok(ConvertedRows { gamma_raw, beta: beta_pre.to_vec(), clamped })
}

impl NormState {
    /// Installs converted pretrained rows: every task row starts from the same
    /// inverse-sigmoid scales, and the pretrained shifts are attached frozen.
    pub fn apply_pretrained(&mut self, rows: &ConvertedRows) -> Result<()> {
        if !self.variant.is_sigma() {
            return Err(Error::Unsupported(
                "pretrained conversion targets sigma variants only".into(),
            ));
        }
        if rows.gamma_raw.len() != self.num_features {
            return Err(Error::Shape(format!(
                "converted rows have {} features, norm state expects {}",
                rows.gamma_raw.len(),
                self.num_features
            )));
        }
        for g in &mut self.gamma {
            g.data_mut().copy_from_slice(&rows.gamma_raw);
        }
        self.beta = (0..self.gamma.len())
            .map(|_| {
                Tensor::new(vec![self.num_features], rows.beta.clone())
                    .expect("length checked above")
                    .with_requires_grad(false)
            })
            .collect();
        self.beta_frozen = true;
        Ok(())
    }
}

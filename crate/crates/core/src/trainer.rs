//! Minimax training with SGD + momentum for the weighted model, its two
//! ablations and the DANN / source-only baselines.
//!
//! Every variant performs one forward pass and one backward pass per step.
//! The adversarial game between the feature extractor and the domain
//! discriminator comes from the gradient reversal inside
//! [`EtnParams::discriminate`], so all parameter groups descend the same summed
//! objective at the same learning rate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{BatchIndices, MiniBatches, PdaTask, TaskSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossBreakdown};
use crate::model::{Architecture, EtnParams, Quantifier, TransferWeights};
use crate::netcore::{Matrix, ParamSet, Tape, Var};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Etn,
    EtnWoClassifier,
    EtnWoAuxiliary,
    Dann,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Etn,
        Variant::EtnWoClassifier,
        Variant::EtnWoAuxiliary,
        Variant::Dann,
        Variant::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Etn => "etn",
            Variant::EtnWoClassifier => "etn_wo_classifier",
            Variant::EtnWoAuxiliary => "etn_wo_auxiliary",
            Variant::Dann => "dann",
            Variant::SourceOnly => "source_only",
        }
    }

    pub fn quantifier(self) -> Option<Quantifier> {
        match self {
            Variant::Etn | Variant::EtnWoClassifier => Some(Quantifier::LeakyAuxiliary),
            Variant::EtnWoAuxiliary => Some(Quantifier::SigmoidDiscriminator),
            Variant::Dann | Variant::SourceOnly => None,
        }
    }

    pub fn is_weighted(self) -> bool {
        self.quantifier().is_some()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Validation(vec![format!(
                    "unknown variant `{s}` (expected one of etn, etn_wo_classifier, \
                     etn_wo_auxiliary, dann, source_only)"
                )])
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the target entropy term.
    pub gamma: f64,
    /// Scale of the auxiliary one-vs-rest label loss.
    pub lambda: f64,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    /// Steepness of the reversal-coefficient ramp `2 / (1 + exp(-k p)) - 1`.
    pub grl_ramp: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub log_interval: usize,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Etn,
            gamma: 0.1,
            lambda: 1.0,
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            grl_ramp: 10.0,
            batch_size: 32,
            total_iterations: 3000,
            log_interval: 50,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.gamma) {
            p.push(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !nonneg(self.lambda) {
            p.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            p.push(format!("eta0 must be > 0, got {}", self.eta0));
        }
        if !nonneg(self.alpha) {
            p.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !nonneg(self.beta) {
            p.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !nonneg(self.grl_ramp) {
            p.push(format!("grl_ramp must be >= 0, got {}", self.grl_ramp));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.total_iterations == 0 {
            p.push("total_iterations must be >= 1".into());
        }
        if self.log_interval == 0 {
            p.push("log_interval must be >= 1".into());
        }
        if let Err(Error::Validation(mut v)) = self.architecture.validate() {
            p.append(&mut v);
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Copy with the architecture's input and class counts taken from `task`.
    pub fn fitted_to(&self, task: &PdaTask) -> Self {
        let mut c = self.clone();
        c.architecture.input_dim = task.input_dim();
        c.architecture.num_classes = task.num_classes;
        c
    }
}

/// `η_p = η_0 / (1 + α p)^β`.
pub fn lr_at(p: f64, eta0: f64, alpha: f64, beta: f64) -> f64 {
    eta0 / (1.0 + alpha * p).powf(beta)
}

/// Gradient-reversal coefficient `2 / (1 + exp(-10 p)) - 1`.
pub fn grl_mu(p: f64) -> f64 {
    grl_mu_with(p, 10.0)
}

pub fn grl_mu_with(p: f64, ramp: f64) -> f64 {
    2.0 / (1.0 + (-ramp * p).exp()) - 1.0
}

/// `v ← m·v + g; θ ← θ - lr·v`, then zero the gradients.
pub fn sgd_momentum_step(params: &mut ParamSet, lr: f64, momentum: f64) {
    for (_, p) in params.iter_mut() {
        for (theta, v, g) in [
            (&mut p.weight, &mut p.velocity_weight, &mut p.grad_weight),
            (&mut p.bias, &mut p.velocity_bias, &mut p.grad_bias),
        ] {
            for ((t, vi), gi) in theta
                .values_mut()
                .iter_mut()
                .zip(v.values_mut().iter_mut())
                .zip(g.values())
            {
                *vi = momentum * *vi + gi;
                *t -= lr * *vi;
            }
            g.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub p: f64,
    pub eta: f64,
    pub mu: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub target_acc: f64,
    pub mean_w_shared: Option<f64>,
    pub mean_w_outlier: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

/// State captured when a step produces a non-finite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSnapshot {
    pub iteration: usize,
    pub reason: String,
    pub losses: LossBreakdown,
    pub max_abs_param: f64,
}

/// Test hooks for a single step.
#[derive(Debug, Clone, Default)]
pub struct StepOverrides {
    /// Replace the computed weights with these normalized constants.
    pub frozen_weights: Option<Vec<f64>>,
    /// Leave the auxiliary objectives out of the summed loss.
    pub skip_aux_losses: bool,
}

/// Everything measured during one step, before its parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub p: f64,
    pub eta: f64,
    pub mu: f64,
    pub losses: LossBreakdown,
    /// Raw and normalized weights of this step's source batch.
    pub weights: Option<(TransferWeights, TransferWeights)>,
}

/// A variant's objective on one mini-batch, split by how each part's gradient
/// reaches the parameters.
#[derive(Debug)]
pub struct Objective {
    pub tape: Tape,
    /// Classification terms; their gradient reaches `theta_f` and `theta_y` unchanged.
    pub supervised: Var,
    /// Domain terms behind the gradient reversal: `theta_d` descends them,
    /// `theta_f` ascends them scaled by `mu`.
    pub adversarial: Option<Var>,
    /// Quantifier terms on detached features; only `theta_y_tilde` sees them.
    pub auxiliary: Option<Var>,
    /// The sum that is differentiated.
    pub total: Var,
    pub losses: LossBreakdown,
    /// Raw and normalized weights of the source rows.
    pub weights: Option<(TransferWeights, TransferWeights)>,
}

/// Builds the objective of `config.variant` for source rows `xs` with labels
/// `ys` and target rows `xt`, at reversal coefficient `mu`.
pub fn objective(
    params: &EtnParams,
    config: &TrainConfig,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    mu: f64,
    overrides: &StepOverrides,
) -> Result<Objective> {
    let n_s = ys.len();
    let n_t = xt.rows();
    let mut tape = Tape::new();
    let mut losses = LossBreakdown::default();

    if config.variant == Variant::SourceOnly {
        let x = tape.input(xs.clone());
        let f = params.features(&mut tape, x)?;
        let ps = params.classify(&mut tape, f)?;
        let ce = losses::weighted_cross_entropy(&mut tape, ps, ys, &vec![1.0; n_s])?;
        losses.e_gy = tape.scalar(ce);
        return Ok(Objective {
            tape,
            supervised: ce,
            adversarial: None,
            auxiliary: None,
            total: ce,
            losses,
            weights: None,
        });
    }

    let x = tape.input_stacked(xs, xt)?;
    let f = params.features(&mut tape, x)?;
    let probs = params.classify(&mut tape, f)?;
    let ps = tape.rows(probs, 0, n_s)?;
    let pt = tape.rows(probs, n_s, n_s + n_t)?;

    if config.variant == Variant::Dann {
        let ent = losses::mean_entropy(&mut tape, pt)?;
        losses.entropy_term = tape.scalar(ent);
        let d = params.discriminate(&mut tape, f, mu)?;
        let domain_labels: Vec<bool> = (0..n_s + n_t).map(|k| k < n_s).collect();
        let l = losses::loss_dann(&mut tape, ps, ys, d, &domain_labels)?;
        losses.e_gy = tape.scalar(l.classification);
        losses.e_gd = tape.scalar(l.domain);
        return Ok(Objective {
            tape,
            supervised: l.classification,
            adversarial: Some(l.domain),
            auxiliary: None,
            total: l.total,
            losses,
            weights: None,
        });
    }

    let aux = params.aux_branch(&mut tape, f)?;
    let all_raw = params.raw_weights(&tape, &aux)?;
    let raw = TransferWeights::raw(all_raw.values()[..n_s].to_vec());
    let normalized = match &overrides.frozen_weights {
        Some(w) => TransferWeights::raw(w.clone()).normalize()?,
        None => raw.normalize()?,
    };
    let class_weights = if config.variant == Variant::EtnWoClassifier {
        TransferWeights::uniform(n_s)
    } else {
        normalized.clone()
    };

    let cl = losses::loss_classifier(&mut tape, ps, ys, class_weights.values(), pt, config.gamma)?;
    losses.e_gy = tape.scalar(cl.total);
    losses.entropy_term = tape.scalar(cl.entropy);

    let d = params.discriminate(&mut tape, f, mu)?;
    let ds = tape.rows(d, 0, n_s)?;
    let dt = tape.rows(d, n_s, n_s + n_t)?;
    let ed = losses::loss_discriminator(&mut tape, ds, normalized.values(), dt)?;
    losses.e_gd = tape.scalar(ed);

    let gs = tape.rows(aux.source_prob, 0, n_s)?;
    let gt = tape.rows(aux.source_prob, n_s, n_s + n_t)?;
    let mut auxiliary = losses::loss_aux_domain(&mut tape, gs, gt)?;
    losses.e_aux_domain = tape.scalar(auxiliary);
    if let Some(scores) = aux.scores {
        let ss = tape.rows(scores, 0, n_s)?;
        let e_lab = losses::loss_aux_label(&mut tape, ss, ys, config.lambda)?;
        losses.e_aux_label = tape.scalar(e_lab);
        auxiliary = tape.add(auxiliary, e_lab)?;
    }

    let mut total = tape.add(cl.total, ed)?;
    if !overrides.skip_aux_losses {
        total = tape.add(total, auxiliary)?;
    }
    Ok(Objective {
        tape,
        supervised: cl.total,
        adversarial: Some(ed),
        auxiliary: Some(auxiliary),
        total,
        losses,
        weights: Some((raw, normalized)),
    })
}

/// Stepwise trainer; [`train`] runs it to completion.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    task: &'a PdaTask,
    config: TrainConfig,
    params: EtnParams,
    batches: MiniBatches,
    iteration: usize,
    shared_mask: Vec<bool>,
}

impl<'a> Trainer<'a> {
    pub fn new(task: &'a PdaTask, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if task.source.is_empty() || task.target.is_empty() {
            return Err(Error::Usage(
                "training needs nonempty source and target domains".into(),
            ));
        }
        let arch = &config.architecture;
        let mut problems = Vec::new();
        if arch.input_dim != task.input_dim() {
            problems.push(format!(
                "architecture input_dim {} does not match task features {}",
                arch.input_dim,
                task.input_dim()
            ));
        }
        if arch.num_classes != task.num_classes {
            problems.push(format!(
                "architecture num_classes {} does not match task classes {}",
                arch.num_classes, task.num_classes
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let params = EtnParams::init(
            arch,
            config.variant.quantifier(),
            &mut stream(config.seed, Stream::Init),
        )?;
        let batches = MiniBatches::for_task(task, config.batch_size, config.seed)?;
        Ok(Self {
            task,
            config: config.clone(),
            params,
            batches,
            iteration: 0,
            shared_mask: task.shared_mask(),
        })
    }

    pub fn params(&self) -> &EtnParams {
        &self.params
    }

    pub fn into_params(self) -> EtnParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iterations
    }

    /// Training progress of step `i`, linear from 0 at the first step to 1 at the last.
    pub fn progress(&self, i: usize) -> f64 {
        let t = self.config.total_iterations;
        if t <= 1 {
            1.0
        } else {
            i as f64 / (t - 1) as f64
        }
    }

    pub fn step(&mut self) -> Result<StepStats> {
        self.step_with(&StepOverrides::default())
    }

    pub fn step_with(&mut self, overrides: &StepOverrides) -> Result<StepStats> {
        let i = self.iteration;
        let p = self.progress(i);
        let c = &self.config;
        let eta = lr_at(p, c.eta0, c.alpha, c.beta);
        let mu = grl_mu_with(p, c.grl_ramp);
        let batch = self.batches.next().expect("batch stream is endless");

        let forward = match self.forward(&batch, mu, overrides) {
            Ok(f) => f,
            Err(Error::Numeric(reason)) => {
                return Err(Error::Diverged(Box::new(DivergenceSnapshot {
                    iteration: i,
                    reason,
                    losses: LossBreakdown::default(),
                    max_abs_param: self.params.max_abs(),
                })))
            }
            Err(e) => return Err(e),
        };
        let Objective {
            tape,
            total,
            losses,
            weights,
            ..
        } = forward;

        if !losses.is_finite() || !tape.scalar(total).is_finite() {
            return Err(Error::Diverged(Box::new(DivergenceSnapshot {
                iteration: i,
                reason: "non-finite loss".into(),
                losses,
                max_abs_param: self.params.max_abs(),
            })));
        }

        let momentum = self.config.momentum;
        let mut sets = self.active_sets_mut();
        tape.backward(total, &mut sets)?;
        for set in sets {
            sgd_momentum_step(set, eta, momentum);
        }

        self.iteration += 1;
        Ok(StepStats {
            iteration: i,
            p,
            eta,
            mu,
            losses,
            weights,
        })
    }

    fn forward(&self, batch: &BatchIndices, mu: f64, overrides: &StepOverrides) -> Result<Objective> {
        let xs = self.task.source.features.select_rows(&batch.source);
        let xt = self.task.target.features.select_rows(&batch.target);
        let ys: Vec<usize> = batch.source.iter().map(|&k| self.task.source.labels[k]).collect();
        objective(&self.params, &self.config, &xs, &ys, &xt, mu, overrides)
    }

    /// Parameter groups trained by this variant.
    fn active_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let variant = self.config.variant;
        let [f, y, d, q] = self.params.sets_mut();
        match variant {
            Variant::SourceOnly => vec![f, y],
            Variant::Dann => vec![f, y, d],
            _ => vec![f, y, d, q],
        }
    }

    /// Full-data metrics for the current parameters.
    pub fn record(&self, stats: &StepStats) -> Result<HistoryRecord> {
        self.record_for(&self.params, stats)
    }

    fn record_for(&self, params: &EtnParams, stats: &StepStats) -> Result<HistoryRecord> {
        let target_acc = eval::target_accuracy(params, self.task)?;
        let (mean_w_shared, mean_w_outlier) = if params.quantifier.is_some() {
            let w = params.transferability(&self.task.source.features)?;
            group_means(w.values(), &self.shared_mask)
        } else {
            (None, None)
        };
        Ok(HistoryRecord {
            iteration: stats.iteration,
            p: stats.p,
            eta: stats.eta,
            mu: stats.mu,
            losses: stats.losses,
            target_acc,
            mean_w_shared,
            mean_w_outlier,
        })
    }

    fn should_log(&self, i: usize) -> bool {
        i % self.config.log_interval == 0 || i + 1 == self.config.total_iterations
    }
}

fn group_means(values: &[f64], mask: &[bool]) -> (Option<f64>, Option<f64>) {
    let mean = |want: bool| {
        let (s, n) = values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == want)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    (mean(true), mean(false))
}

/// Runs `config.total_iterations` steps. History is logged every
/// `log_interval` steps and at the final step, each record measured with the
/// parameters that produced that step's losses.
pub fn train(task: &PdaTask, config: &TrainConfig) -> Result<(EtnParams, TrainHistory)> {
    let mut trainer = Trainer::new(task, config)?;
    let mut history = TrainHistory::default();
    while !trainer.is_done() {
        let i = trainer.iteration();
        let before = trainer.should_log(i).then(|| trainer.params.clone());
        let stats = trainer.step()?;
        if let Some(before) = before {
            history.records.push(trainer.record_for(&before, &stats)?);
        }
    }
    Ok((trainer.into_params(), history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_classes: usize,
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub status: String,
}

/// Trains every `(target size, variant, seed)` cell on `Ct = {0..t-1}`.
///
/// The task for a cell is generated from `base_spec` with its seed replaced by
/// the cell seed, so all variants at one seed see the same data. Failed cells
/// are reported in `status` and do not stop the sweep. Up to `jobs` cells run
/// concurrently; the output order is the factorial order regardless.
pub fn sweep_class_overlap(
    base_spec: &TaskSpec,
    target_sizes: &[usize],
    variants: &[Variant],
    seeds: &[u64],
    base_config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut problems = Vec::new();
    for &t in target_sizes {
        if t == 0 || t > base_spec.num_source_classes {
            problems.push(format!(
                "target size {t} is outside 1..={}",
                base_spec.num_source_classes
            ));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(d) = target_sizes.iter().find(|t| !seen.insert(**t)) {
        problems.push(format!("duplicate target size {d}"));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let cells: Vec<(usize, Variant, u64)> = target_sizes
        .iter()
        .flat_map(|&t| {
            variants
                .iter()
                .flat_map(move |&v| seeds.iter().map(move |&s| (t, v, s)))
        })
        .collect();

    let run_cell = |&(t, variant, seed): &(usize, Variant, u64)| -> SweepRow {
        let spec = TaskSpec {
            seed,
            ..base_spec.with_first_target_classes(t)
        };
        let outcome = crate::datagen::generate(&spec).and_then(|task| {
            let config = TrainConfig {
                variant,
                seed,
                ..base_config.fitted_to(&task)
            };
            run_final_accuracy(&task, &config)
        });
        match outcome {
            Ok(acc) => SweepRow {
                target_classes: t,
                variant,
                seed,
                accuracy: Some(acc),
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                target_classes: t,
                variant,
                seed,
                accuracy: None,
                status: format!("failed: {e}"),
            },
        }
    };

    if jobs <= 1 {
        return Ok(cells.iter().map(run_cell).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} workers: {e}")))?;
    use rayon::prelude::*;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

/// Final target accuracy of one run, skipping history bookkeeping.
pub fn run_final_accuracy(task: &PdaTask, config: &TrainConfig) -> Result<f64> {
    let mut trainer = Trainer::new(task, config)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    eval::target_accuracy(trainer.params(), task)
}

//! Training loop, evaluation, checkpoints and per-epoch metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annealing::{
    beta_at, curriculum_stage, lambda_at, AnnealConfig, CurriculumPlan, ScheduleKind,
};
use crate::data::{degrade, read_corpus, Corpus, DegradationConfig};
use crate::error::{Error, Result};
use crate::experts::{ExpertKind, DEFAULT_SIGMA_PERT};
use crate::model::{nsa_objective, Supervision, TermWeights};
use crate::numeric::ops::{argmax, entropy_slice};
use crate::numeric::{DenseMatrix, GradTape};
use crate::rng;
use crate::routing::{forward, prior_expert, prior_graph, ModelParams, RouteOptions, RoutingMode};

pub const CHECKPOINT_HEADER: &str = "#moce-ckpt v1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "epoch,lambda_t,beta_t,stage,task,role,struct,total,eval_task,mean_routing_entropy,role_accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumKind {
    /// clean, mild and wild thirds.
    Staged,
    /// No degradation at any epoch.
    Clean,
}

/// Everything that determines a training run. Serialized as a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_corpus: Option<PathBuf>,
    /// Per-epoch evaluation corpus; the training corpus when absent.
    pub eval_corpus: Option<PathBuf>,
    pub dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Tokens per gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Decoupled decay, applied as `θ ← θ − lr·wd·θ` after each step.
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub schedule: ScheduleKind,
    pub anneal_midpoint: Option<f64>,
    pub anneal_slope: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub step_breaks: Vec<(f64, f64)>,
    pub swap_weights: bool,
    pub curriculum: CurriculumKind,
    pub beta_max: f64,
    pub seed: u64,
    pub sigma_pert: f64,
    /// Epochs of per-expert fitting on role-filtered tokens before joint
    /// training. Zero disables it.
    pub prefit_epochs: usize,
    pub freeze_general_expert: bool,
    pub no_confidence: bool,
    pub uniform_routing: bool,
    pub single_expert: Option<ExpertKind>,
    pub no_struct_loss: bool,
    pub no_role_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_corpus: None,
            eval_corpus: None,
            dim: 8,
            hidden: 16,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Cosine,
            schedule: ScheduleKind::Sigmoid,
            anneal_midpoint: None,
            anneal_slope: None,
            lambda1: 1.0,
            lambda2: 0.5,
            step_breaks: Vec::new(),
            swap_weights: false,
            curriculum: CurriculumKind::Staged,
            beta_max: 4.0,
            seed: 42,
            sigma_pert: DEFAULT_SIGMA_PERT,
            prefit_epochs: 0,
            freeze_general_expert: false,
            no_confidence: false,
            uniform_routing: false,
            single_expert: None,
            no_struct_loss: false,
            no_role_loss: false,
        }
    }
}

impl TrainConfig {
    /// Reads a TOML config. Relative corpus paths are resolved against the
    /// directory holding the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_corpus, &mut cfg.eval_corpus]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("dim and hidden must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(Error::Config("beta_max must be >= 0".into()));
        }
        if !(self.sigma_pert >= 0.0 && self.sigma_pert.is_finite()) {
            return Err(Error::Config("sigma_pert must be >= 0".into()));
        }
        if self.uniform_routing && self.single_expert.is_some() {
            return Err(Error::Config(
                "single_expert and uniform_routing are mutually exclusive".into(),
            ));
        }
        if self.epochs > 0 {
            self.anneal().validate()?;
        }
        Ok(())
    }

    pub fn anneal(&self) -> AnnealConfig {
        let base = AnnealConfig::default_for(self.epochs);
        AnnealConfig {
            kind: self.schedule,
            midpoint: self.anneal_midpoint.unwrap_or(base.midpoint),
            slope: self.anneal_slope.unwrap_or(base.slope),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            total_epochs: self.epochs,
            step_breaks: self.step_breaks.clone(),
            swap_weights: self.swap_weights,
        }
    }

    pub fn curriculum_plan(&self) -> CurriculumPlan {
        match self.curriculum {
            CurriculumKind::Staged => CurriculumPlan::default_for(self.epochs),
            CurriculumKind::Clean => CurriculumPlan::clean(self.epochs),
        }
    }

    pub fn route_options(&self, beta: f64) -> RouteOptions {
        let mode = match (self.single_expert, self.uniform_routing) {
            (Some(kind), _) => RoutingMode::Single(kind),
            (None, true) => RoutingMode::Uniform,
            (None, false) => RoutingMode::Learned,
        };
        RouteOptions {
            beta,
            no_confidence: self.no_confidence,
            mode,
        }
    }

    /// Loss multipliers at `λ`, with disabled terms zeroed.
    pub fn term_weights(&self, lambda_t: f64) -> TermWeights {
        let (task, role, struct_align) = self.anneal().term_weights(lambda_t);
        TermWeights {
            task,
            role: if self.no_role_loss { 0.0 } else { role },
            struct_align: if self.no_struct_loss {
                0.0
            } else {
                struct_align
            },
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tokens: usize,
    pub task_mse: f64,
    /// Over labelled tokens; absent when none carry a label.
    pub role_accuracy: Option<f64>,
    pub mean_alpha: f64,
    /// Mean entropy of the routing weights, in nats.
    pub mean_routing_entropy: f64,
    /// Fraction of tokens whose top expert is not allowed for their
    /// predicted role by the prior graph.
    pub struct_violation_rate: f64,
}

pub fn evaluate_params(
    params: &ModelParams,
    opts: &RouteOptions,
    corpus: &Corpus,
) -> Result<EvalMetrics> {
    if corpus.dim != params.dim() {
        return Err(Error::Validation(format!(
            "corpus D={} but the model expects D={}",
            corpus.dim,
            params.dim()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Validation(
            "cannot evaluate on an empty corpus".into(),
        ));
    }
    let idx = corpus.all_indices();
    let x = corpus.batch(&idx)?;
    let targets = corpus.targets(&idx)?;
    let (labels, mask) = corpus.labels(&idx);
    let out = forward(&x, params, opts)?;

    let n = corpus.len();
    let diff = out.fused.values.sub(&targets)?;
    let task_mse = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;

    let graph = prior_graph();
    let mut correct = 0usize;
    let mut labelled = 0usize;
    let mut entropy = 0.0;
    let mut violations = 0usize;
    for i in 0..n {
        let role = argmax(out.roles.token(i));
        if mask[i] {
            labelled += 1;
            correct += usize::from(role == labels[i]);
        }
        let w = out.state.weights.row(i);
        entropy += entropy_slice(w);
        if graph.get(role, argmax(w)) == 0.0 {
            violations += 1;
        }
    }
    Ok(EvalMetrics {
        tokens: n,
        task_mse,
        role_accuracy: (labelled > 0).then(|| correct as f64 / labelled as f64),
        mean_alpha: out.state.alpha.mean(),
        mean_routing_entropy: entropy / n as f64,
        struct_violation_rate: violations as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lambda_t: f64,
    pub beta_t: f64,
    pub stage: String,
    pub task: f64,
    pub role: f64,
    pub struct_align: f64,
    pub total: f64,
    pub eval_task: f64,
    pub mean_routing_entropy: f64,
    pub role_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let acc = r.role_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lambda_t,
                r.beta_t,
                r.stage,
                r.task,
                r.role,
                r.struct_align,
                r.total,
                r.eval_task,
                r.mean_routing_entropy,
                acc
            )
            .expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epochs_trained: usize,
    /// Routing options in force at the end of training; evaluation uses them.
    pub route: RouteOptions,
    pub params: ModelParams,
    pub final_metrics: Option<EvalMetrics>,
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        let body =
            serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(format!("{CHECKPOINT_HEADER}\n{body}\n"))
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        if first.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected `{CHECKPOINT_HEADER}`"),
            });
        }
        let ckpt: Self = serde_json::from_str(body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() + 1,
            message: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus) -> Result<EvalMetrics> {
    evaluate_params(&ckpt.params, &ckpt.route, corpus)
}

/// Position of the General expert's tensors in [`ModelParams::tensors`].
fn general_tensor_range() -> std::ops::Range<usize> {
    let start = 3 + 4 * ExpertKind::General.index();
    start..start + 4
}

struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<DenseMatrix>,
    frozen: Option<std::ops::Range<usize>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, shapes: &[&DenseMatrix]) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: shapes
                .iter()
                .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
                .collect(),
            frozen: cfg.freeze_general_expert.then(general_tensor_range),
        }
    }

    fn step(&mut self, params: Vec<&mut DenseMatrix>, grads: Vec<&DenseMatrix>, lr: f64) {
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if self.frozen.as_ref().is_some_and(|r| r.contains(&i)) {
                continue;
            }
            let v = &mut self.velocity[i];
            let decay = 1.0 - lr * self.weight_decay;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let delta = match self.kind {
                    OptimizerKind::Gd => gv,
                    OptimizerKind::Momentum => {
                        *vv = self.momentum * *vv + gv;
                        *vv
                    }
                };
                *pv = (*pv - lr * delta) * decay;
            }
        }
    }
}

/// Fits each expert on its own regression sub-task: tokens whose labelled
/// role the prior graph sends to that expert (every token for General).
fn prefit_experts(params: &mut ModelParams, cfg: &TrainConfig, corpus: &Corpus) -> Result<()> {
    for kind in ExpertKind::ALL {
        let indices: Vec<usize> = corpus
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                kind == ExpertKind::General || r.role.is_some_and(|role| prior_expert(role) == kind)
            })
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        let expert = params.experts.get_mut(kind);
        let mut velocity: Vec<DenseMatrix> = expert
            .tensors()
            .iter()
            .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
            .collect();
        let mut order = indices;
        let mut s = rng::stream(rng::derive(
            rng::derive_label(cfg.seed, "prefit"),
            kind.index() as u64,
        ));
        for _ in 0..cfg.prefit_epochs {
            order.shuffle(&mut s);
            for chunk in order.chunks(cfg.batch_size) {
                let x = corpus.batch(chunk)?;
                let y = corpus.targets(chunk)?;
                let mut tape = GradTape::new();
                let leaves: Vec<_> = expert
                    .tensors()
                    .iter()
                    .map(|t| tape.leaf((*t).clone()))
                    .collect();
                let xv = tape.leaf(x.tokens().clone());
                let z = tape.matmul(xv, leaves[0])?;
                let z = tape.add_row(z, leaves[1])?;
                let h = tape.relu(z)?;
                let o = tape.matmul(h, leaves[2])?;
                let o = tape.add_row(o, leaves[3])?;
                let loss = tape.mse(o, y)?;
                let grads = tape.backward(loss)?;
                for ((p, v), leaf) in expert
                    .tensors_mut()
                    .into_iter()
                    .zip(&mut velocity)
                    .zip(&leaves)
                {
                    let g = grads.wrt(*leaf);
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = cfg.momentum * *vv + gv;
                        *pv -= cfg.learning_rate * *vv;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Trains from scratch on `train`, evaluating on `eval` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
) -> Result<(Checkpoint, MetricsLog)> {
    cfg.validate()?;
    for (name, c) in [("training", train_corpus), ("evaluation", eval_corpus)] {
        c.validate()?;
        if c.dim != cfg.dim {
            return Err(Error::Validation(format!(
                "{name} corpus has D={} but the config sets dim={}",
                c.dim, cfg.dim
            )));
        }
    }
    if cfg.epochs > 0 && train_corpus.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }

    let mut params = ModelParams::init(cfg.seed, cfg.dim, cfg.hidden, cfg.sigma_pert)?;
    if cfg.prefit_epochs > 0 {
        prefit_experts(&mut params, cfg, train_corpus)?;
    }
    let mut opt = Optimizer::new(cfg, &params.tensors());
    let anneal = cfg.anneal();
    let plan = cfg.curriculum_plan();
    let graph = prior_graph();
    let mut log = MetricsLog::default();
    let mut route = cfg.route_options(beta_at(0, cfg.epochs, cfg.beta_max));
    let mut final_metrics = None;

    for epoch in 0..cfg.epochs {
        let lambda_t = lambda_at(epoch as f64, &anneal)?;
        let beta_t = beta_at(epoch, cfg.epochs, cfg.beta_max);
        route = cfg.route_options(beta_t);
        let weights = cfg.term_weights(lambda_t);
        let stage = curriculum_stage(epoch, &plan)?;
        let view = degrade(
            train_corpus,
            &DegradationConfig::at_severity(stage.severity, stage.label_mask_rate)?,
            rng::derive(rng::derive_label(cfg.seed, "epoch-view"), epoch as u64),
        )?;
        let mut order = view.all_indices();
        order.shuffle(&mut rng::stream(rng::derive(
            rng::derive_label(cfg.seed, "shuffle"),
            epoch as u64,
        )));
        let lr = cfg.learning_rate_at(epoch);

        let mut sums = [0.0f64; 4];
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = view.batch(chunk)?;
            let targets = view.targets(chunk)?;
            let (labels, mask) = view.labels(chunk);
            let sup = Supervision {
                targets: &targets,
                labels: &labels,
                mask: &mask,
                compat_graph: &graph,
            };
            let (value, grads) = match nsa_objective(&params, &x, &sup, &route, weights) {
                Ok(r) => r,
                Err(Error::NumericDomain(_)) => return Err(Error::Diverged { epoch, batch }),
                Err(e) => return Err(e),
            };
            if !value.total.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
            let share = chunk.len() as f64;
            for (s, v) in
                sums.iter_mut()
                    .zip([value.task, value.role, value.struct_align, value.total])
            {
                *s += share * v;
            }
            opt.step(params.tensors_mut(), grads.tensors(), lr);
        }

        let seen = view.len().max(1) as f64;
        let metrics = evaluate_params(&params, &route, eval_corpus)?;
        log.rows.push(MetricsRow {
            epoch,
            lambda_t,
            beta_t,
            stage: stage.name.clone(),
            task: sums[0] / seen,
            role: sums[1] / seen,
            struct_align: sums[2] / seen,
            total: sums[3] / seen,
            eval_task: metrics.task_mse,
            mean_routing_entropy: metrics.mean_routing_entropy,
            role_accuracy: metrics.role_accuracy,
        });
        final_metrics = Some(metrics);
    }

    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epochs_trained: cfg.epochs,
        route,
        params,
        final_metrics,
    };
    Ok((ckpt, log))
}

/// Reads the corpora named in the config and trains.
pub fn train_from_config(cfg: &TrainConfig) -> Result<(Checkpoint, MetricsLog)> {
    let path = cfg
        .train_corpus
        .as_ref()
        .ok_or_else(|| Error::Config("train_corpus is not set".into()))?;
    let train_corpus = read_corpus(path)?;
    let eval_corpus = match &cfg.eval_corpus {
        Some(p) => read_corpus(p)?,
        None => train_corpus.clone(),
    };
    train(cfg, &train_corpus, &eval_corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusSpec};
    use crate::numeric::ops::LOG_EPS;
    use crate::roles::RoleClassifierParams;

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize, seed: u64) -> Corpus {
        gen_corpus(&CorpusSpec::toy(n, 8, seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let c = corpus(100, 1);
        let (ckpt, log) = train(&small_cfg(0), &c, &c).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(
            ckpt.params,
            ModelParams::init(7, 8, 16, DEFAULT_SIGMA_PERT).unwrap()
        );
        assert_eq!(ckpt.final_metrics, None);
    }

    #[test]
    fn short_run_is_deterministic_and_logs_closed_forms() {
        let c = corpus(300, 2);
        let cfg = small_cfg(6);
        let (a, log_a) = train(&cfg, &c, &c).unwrap();
        let (b, log_b) = train(&cfg, &c, &c).unwrap();
        assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
        assert_eq!(log_a.to_csv(), log_b.to_csv());

        let anneal = cfg.anneal();
        let plan = cfg.curriculum_plan();
        for row in &log_a.rows {
            assert_eq!(
                row.lambda_t,
                1.0 / (1.0 + ((3.0 - row.epoch as f64) / 1.0).exp())
            );
            assert_eq!(row.lambda_t, lambda_at(row.epoch as f64, &anneal).unwrap());
            assert_eq!(row.beta_t, 1.0 + 3.0 * row.epoch as f64 / 5.0);
            assert_eq!(row.stage, curriculum_stage(row.epoch, &plan).unwrap().name);
        }
        let last = log_a.rows.last().unwrap();
        let m = evaluate(&a, &c).unwrap();
        assert_eq!(m.task_mse, last.eval_task);
        assert_eq!(Some(m), a.final_metrics);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let c = corpus(120, 3);
        let (ckpt, _) = train(&small_cfg(2), &c, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let idx = c.all_indices();
        let x = c.batch(&idx).unwrap();
        let a = forward(&x, &ckpt.params, &ckpt.route).unwrap();
        let b = forward(&x, &back.params, &back.route).unwrap();
        let bits = |m: &DenseMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.fused.values), bits(&b.fused.values));

        fs::write(&path, "not a checkpoint\n{}").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zero_classifier_gives_zero_confidence_and_uniform_routing() {
        let c = corpus(200, 4);
        let (mut ckpt, _) = train(&small_cfg(0), &c, &c).unwrap();
        ckpt.params.role = RoleClassifierParams::zeros(8, 9);
        let m = evaluate(&ckpt, &c).unwrap();
        assert!(m.mean_alpha.abs() < 1e-12);
        assert!((m.mean_routing_entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn evaluation_rejects_mismatched_corpora() {
        let (ckpt, _) = train(&small_cfg(0), &corpus(10, 1), &corpus(10, 1)).unwrap();
        let wide = gen_corpus(&CorpusSpec::toy(10, 4, 1).unwrap()).unwrap();
        assert!(matches!(evaluate(&ckpt, &wide), Err(Error::Validation(_))));
        assert!(matches!(
            evaluate(
                &ckpt,
                &Corpus {
                    dim: 8,
                    records: vec![]
                }
            ),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            train(&small_cfg(1), &wide, &wide),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let c = corpus(200, 5);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            optimizer: OptimizerKind::Gd,
            lr_schedule: LrSchedule::Constant,
            ..small_cfg(3)
        };
        match train(&cfg, &c, &c) {
            Err(Error::Diverged { epoch, batch }) => assert!(epoch < 3 && batch < 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frozen_general_expert_stays_put() {
        let c = corpus(150, 6);
        let cfg = TrainConfig {
            freeze_general_expert: true,
            ..small_cfg(2)
        };
        let (ckpt, _) = train(&cfg, &c, &c).unwrap();
        let init = ModelParams::init(7, 8, 16, DEFAULT_SIGMA_PERT).unwrap();
        assert_eq!(
            ckpt.params.experts.get(ExpertKind::General),
            init.experts.get(ExpertKind::General)
        );
        assert_ne!(
            ckpt.params.experts.get(ExpertKind::Json),
            init.experts.get(ExpertKind::Json)
        );
    }

    #[test]
    fn prefit_lowers_expert_error_on_its_roles() {
        let c = corpus(400, 8);
        let cfg = TrainConfig {
            prefit_epochs: 5,
            ..small_cfg(0)
        };
        let mut fitted = ModelParams::init(7, 8, 16, DEFAULT_SIGMA_PERT).unwrap();
        let before = fitted.clone();
        prefit_experts(&mut fitted, &cfg, &c).unwrap();
        let idx: Vec<usize> = (0..c.len())
            .filter(|&i| prior_expert(c.records[i].role.unwrap()) == ExpertKind::Json)
            .collect();
        let x = c.batch(&idx).unwrap();
        let y = c.targets(&idx).unwrap();
        let err = |p: &ModelParams| {
            let o = crate::experts::expert_forward(&x, p.experts.get(ExpertKind::Json)).unwrap();
            o.sub(&y).unwrap().data().iter().map(|v| v * v).sum::<f64>()
        };
        assert!(err(&fitted) < 0.5 * err(&before));
    }

    #[test]
    fn config_validation_and_toml() {
        let cfg = TrainConfig {
            single_expert: Some(ExpertKind::Code),
            uniform_routing: true,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());

        let cfg = TrainConfig {
            single_expert: Some(ExpertKind::Json),
            train_corpus: Some("a.jsonl".into()),
            anneal_slope: Some(3.0),
            ..TrainConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = toml::from_str("epochs = 5\nno_confidence = true\n").unwrap();
        assert_eq!(partial.epochs, 5);
        assert!(partial.no_confidence);
        assert!(toml::from_str::<TrainConfig>("epoch = 5\n").is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let log = MetricsLog {
            rows: vec![MetricsRow {
                epoch: 0,
                lambda_t: 0.5,
                beta_t: 1.0,
                stage: "clean".into(),
                task: 1.5,
                role: 2.0,
                struct_align: 0.25,
                total: 1.0,
                eval_task: 1.25,
                mean_routing_entropy: LOG_EPS,
                role_accuracy: None,
            }],
        };
        assert_eq!(
            log.to_csv(),
            format!("{METRICS_HEADER}\n0,0.5,1,clean,1.5,2,0.25,1,1.25,0.000000000001,\n")
        );
    }
}

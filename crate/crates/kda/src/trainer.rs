//! The optimization loop: Adam, reduce-on-plateau scheduling, per-epoch
//! margin refresh, checkpointing, and deterministic seeding.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datahub::{batch_indices, BatchMode, DataError, Dataset};
use crate::eval::{class_mean_embeddings, evaluate, EvalError, EvalResult};
use crate::gradcore::{Graph, Tensor, TensorError};
use crate::losses::{compute_margins, kda_objective, LossBreakdown, MarginMatrix};
use crate::model::{save_checkpoint, KdaModel, ModelError};

/// Training stops once the learning rate decays below this floor.
pub const LR_FLOOR: f64 = 1e-7;

/// Which per-epoch metric the plateau scheduler monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauMetric {
    Hm,
    Zsl,
    Loss,
}

impl PlateauMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hm" | "HM" => Some(Self::Hm),
            "zsl" | "ZSL" => Some(Self::Zsl),
            "loss" => Some(Self::Loss),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hm => "hm",
            Self::Zsl => "zsl",
            Self::Loss => "loss",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Self::Loss)
    }
}

/// When the margin matrix is recomputed from the current E_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginRefresh {
    PerEpoch,
    PerStep,
}

impl MarginRefresh {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-epoch" | "per_epoch" => Some(Self::PerEpoch),
            "per-step" | "per_step" => Some(Self::PerStep),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PerEpoch => "per-epoch",
            Self::PerStep => "per-step",
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_metric: PlateauMetric,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin_refresh: MarginRefresh,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            plateau_factor: 0.1,
            plateau_patience: 3,
            plateau_metric: PlateauMetric::Hm,
            lambda: 1.0,
            alpha: 1.0,
            beta: 0.2,
            margin_refresh: MarginRefresh::PerEpoch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(TrainError::Config(format!("eps {} must be > 0", self.eps)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size {} must be ≥ 2 (alignment loss needs B ≥ 2)",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be ≥ 1".to_string()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(TrainError::Config(format!(
                "plateau_factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(TrainError::Config(
                "plateau_patience must be ≥ 1".to_string(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config(format!(
                "lambda {} must be ≥ 0",
                self.lambda
            )));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::Config(format!(
                "alpha {} must be ≥ 0",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Consume the keys this config understands from a parsed key = value
    /// map, leaving unrelated keys in place.
    pub fn apply_map(&mut self, map: &mut BTreeMap<String, String>) -> Result<(), TrainError> {
        fn take<T>(
            map: &mut BTreeMap<String, String>,
            key: &str,
            parse: impl Fn(&str) -> Option<T>,
        ) -> Result<Option<T>, TrainError> {
            match map.remove(key) {
                None => Ok(None),
                Some(raw) => parse(raw.trim())
                    .map(Some)
                    .ok_or_else(|| TrainError::Config(format!("bad value '{raw}' for {key}"))),
            }
        }
        let float = |s: &str| s.parse::<f64>().ok();
        let int = |s: &str| s.parse::<usize>().ok();
        if let Some(v) = take(map, "lr", float)? {
            self.lr = v;
        }
        if let Some(v) = take(map, "beta1", float)? {
            self.beta1 = v;
        }
        if let Some(v) = take(map, "beta2", float)? {
            self.beta2 = v;
        }
        if let Some(v) = take(map, "eps", float)? {
            self.eps = v;
        }
        if let Some(v) = take(map, "batch_size", int)? {
            self.batch_size = v;
        }
        if let Some(v) = take(map, "max_epochs", int)? {
            self.max_epochs = v;
        }
        if let Some(v) = take(map, "plateau_factor", float)? {
            self.plateau_factor = v;
        }
        if let Some(v) = take(map, "plateau_patience", int)? {
            self.plateau_patience = v;
        }
        if let Some(v) = take(map, "plateau_metric", PlateauMetric::parse)? {
            self.plateau_metric = v;
        }
        if let Some(v) = take(map, "lambda", float)? {
            self.lambda = v;
        }
        if let Some(v) = take(map, "alpha", float)? {
            self.alpha = v;
        }
        if let Some(v) = take(map, "beta", float)? {
            self.beta = v;
        }
        if let Some(v) = take(map, "margin_refresh", MarginRefresh::parse)? {
            self.margin_refresh = v;
        }
        if let Some(v) = take(map, "seed", |s| s.parse::<u64>().ok())? {
            self.seed = v;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    /// A loss component left the finite range; names the batch and component.
    NonFinite {
        epoch: usize,
        batch: usize,
        component: &'static str,
        value: f64,
    },
    Tensor(TensorError),
    Data(DataError),
    Eval(EvalError),
    Model(ModelError),
    Io(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(d) => write!(f, "invalid training config: {d}"),
            Self::NonFinite {
                epoch,
                batch,
                component,
                value,
            } => write!(
                f,
                "non-finite {component} loss ({value}) at epoch {epoch}, batch {batch}"
            ),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Eval(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Io(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        Self::Eval(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// First/second-moment buffers and the shared step counter.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        Self {
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update: m ← β1·m + (1−β1)·g, v ← β2·v + (1−β2)·g², bias-corrected
/// m̂ and v̂, then p ← p − lr·m̂/(√v̂ + eps). Parameters with no gradient
/// buffer are treated as having zero gradient.
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    if params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "adam state covers {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((name, p), (m, v)) in params
        .iter()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        if grad.len() != m.len() {
            return Err(TrainError::Config(format!(
                "parameter '{name}' changed size under the optimizer"
            )));
        }
        let mut data = p.to_vec();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data)?;
    }
    Ok(())
}

/// Multiply the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement of the monitored metric.
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, higher_is_better: bool) -> Self {
        Self {
            lr: initial_lr,
            factor,
            patience,
            higher_is_better,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => {
                if self.higher_is_better {
                    metric > best
                } else {
                    metric < best
                }
            }
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Replay the plateau rule over a recorded metric history, independently of
/// [`PlateauScheduler`]: returns the learning rate in force after each epoch.
pub fn replay_lr_trace(
    history: &[f64],
    patience: usize,
    factor: f64,
    initial_lr: f64,
    higher_is_better: bool,
) -> Vec<f64> {
    let mut lr = initial_lr;
    let mut best = f64::NAN;
    let mut bad = 0usize;
    let mut trace = Vec::with_capacity(history.len());
    for (i, &metric) in history.iter().enumerate() {
        let improved = if i == 0 {
            true
        } else if higher_is_better {
            metric > best
        } else {
            metric < best
        };
        if improved {
            best = metric;
            bad = 0;
        } else {
            bad += 1;
            if bad >= patience {
                lr *= factor;
                bad = 0;
            }
        }
        trace.push(lr);
    }
    trace
}

/// The final learning rate implied by a metric history under the plateau rule.
pub fn plateau_schedule(
    history: &[f64],
    patience: usize,
    factor: f64,
    initial_lr: f64,
    higher_is_better: bool,
) -> f64 {
    replay_lr_trace(history, patience, factor, initial_lr, higher_is_better)
        .last()
        .copied()
        .unwrap_or(initial_lr)
}

/// One epoch's losses, validation metrics, and the lr in force afterwards.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub eval: EvalResult,
    pub lr: f64,
}

/// Everything a training run produced.
#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_hm: f64,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Machine-readable per-epoch metrics (fractions, full precision).
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,kaml,align,total,S,U,HM,ZSL,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss.kaml,
                r.loss.align,
                r.loss.total,
                r.eval.s,
                r.eval.u,
                r.eval.hm,
                r.eval.zsl,
                r.lr
            ));
        }
        out
    }

    /// Human-readable per-epoch log.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&format!(
                "epoch={} kaml={:.6} align={:.6} total={:.6} {} lr={:e}\n",
                r.epoch,
                r.loss.kaml,
                r.loss.align,
                r.loss.total,
                r.eval.metrics_line(),
                r.lr
            ));
        }
        out.push_str(&format!(
            "best HM={:.2} at epoch {} ({:.1}s)\n",
            self.best_hm * 100.0,
            self.best_epoch,
            self.wall_seconds
        ));
        out
    }
}

/// Embed each seen class's descriptions in eval mode and detach the values,
/// then build the margin matrix from them.
fn refresh_margins(
    model: &KdaModel,
    dataset: &Dataset,
    seen: &[i64],
    alpha: f64,
    beta: f64,
) -> Result<MarginMatrix, TrainError> {
    let mut per_class = Vec::with_capacity(seen.len());
    for class in seen {
        let (rows, _) = dataset.knowledge_rows(&[*class])?;
        let mut g = Graph::new();
        let embedded = model.embed_knowledge::<ChaCha8Rng>(&mut g, &rows, None)?;
        let d = embedded.cols();
        let data = embedded.to_vec();
        let detached: Vec<Vec<f64>> = (0..embedded.rows())
            .map(|r| data[r * d..(r + 1) * d].to_vec())
            .collect();
        per_class.push(detached);
    }
    Ok(compute_margins(&per_class, alpha, beta)?)
}

fn check_finite(
    value: f64,
    component: &'static str,
    epoch: usize,
    batch: usize,
) -> Result<(), TrainError> {
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            epoch,
            batch,
            component,
            value,
        });
    }
    Ok(())
}

/// Train the model on the dataset's train partition. Per epoch: refresh the
/// margin matrix from the current E_t (detached), run Adam over shuffled
/// batches of the combined objective, evaluate on the test partitions, and
/// apply the plateau rule. The model ends at its best-HM parameters; when
/// `out_dir` is given, the best checkpoint, a metrics CSV, and a text log are
/// written there.
pub fn fit(
    model: &mut KdaModel,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let seen = dataset.seen_classes();
    let class_to_index: BTreeMap<i64, usize> =
        seen.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let trainable = model.trainable_parameters();
    let mut adam = AdamState::new(&trainable);
    let mut scheduler = PlateauScheduler::new(
        config.lr,
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_metric.higher_is_better(),
    );
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xD0));

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_hm: f64::NEG_INFINITY,
        best_epoch: 0,
        best_checkpoint: None,
        wall_seconds: 0.0,
    };
    let mut best_snapshot = model.snapshot();

    let mut margins = refresh_margins(model, dataset, &seen, config.alpha, config.beta)?;
    for epoch in 1..=config.max_epochs {
        if config.margin_refresh == MarginRefresh::PerEpoch && epoch > 1 {
            margins = refresh_margins(model, dataset, &seen, config.alpha, config.beta)?;
        }
        let shuffle_seed = config.seed.wrapping_add(0x5EED).wrapping_add(epoch as u64);
        let batches = batch_indices(
            dataset.split.train.len(),
            config.batch_size,
            shuffle_seed,
            BatchMode::Train,
        )?;

        let mut sums = (0.0, 0.0, 0.0);
        for (batch_no, batch) in batches.iter().enumerate() {
            if config.margin_refresh == MarginRefresh::PerStep {
                margins = refresh_margins(model, dataset, &seen, config.alpha, config.beta)?;
            }
            let ids: Vec<String> = batch
                .iter()
                .map(|&i| dataset.split.train[i].clone())
                .collect();
            let (audio, visual, classes) = dataset.stack_features(&ids)?;
            let labels: Vec<usize> = classes
                .iter()
                .map(|c| class_to_index[c]) // validated: train classes are seen
                .collect();

            for (_, p) in &trainable {
                p.zero_grad();
            }
            let mut g = Graph::new();
            let av = model.embed_features(&mut g, &audio, &visual, Some(&mut dropout_rng))?;
            let class_means =
                class_mean_embeddings(&mut g, model, dataset, &seen, Some(&mut dropout_rng))?;
            let loss = kda_objective(
                &mut g,
                &av.rho_av,
                &class_means,
                &labels,
                &margins,
                config.lambda,
            )?;
            check_finite(loss.breakdown.kaml, "kaml", epoch, batch_no)?;
            check_finite(loss.breakdown.align, "align", epoch, batch_no)?;
            check_finite(loss.breakdown.total, "total", epoch, batch_no)?;
            g.backward(&loss.total)?;
            adam_step(
                &trainable,
                &mut adam,
                scheduler.lr(),
                config.beta1,
                config.beta2,
                config.eps,
            )?;
            sums.0 += loss.breakdown.kaml;
            sums.1 += loss.breakdown.align;
            sums.2 += loss.breakdown.total;
        }
        let n = batches.len() as f64;
        let loss = LossBreakdown {
            kaml: sums.0 / n,
            align: sums.1 / n,
            total: sums.2 / n,
            lambda: config.lambda,
        };

        let eval = evaluate(model, dataset)?;
        if eval.hm > report.best_hm {
            report.best_hm = eval.hm;
            report.best_epoch = epoch;
            best_snapshot = model.snapshot();
        }
        let metric = match config.plateau_metric {
            PlateauMetric::Hm => eval.hm,
            PlateauMetric::Zsl => eval.zsl,
            PlateauMetric::Loss => loss.total,
        };
        let lr = scheduler.step(metric);
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            eval,
            lr,
        });
        if lr < LR_FLOOR {
            break;
        }
    }

    model.restore(&best_snapshot)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
        let ckpt = dir.join("model.kda");
        save_checkpoint(model, &ckpt)?;
        report.best_checkpoint = Some(ckpt);
        for (name, content) in [
            ("metrics.csv", report.metrics_csv()),
            ("train.log", report.log_text()),
        ] {
            let path = dir.join(name);
            fs::write(&path, content)
                .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{generate_synthetic, SynthConfig};
    use crate::losses::kaml_loss;
    use crate::model::{class_logits, ModelConfig, UnimodalMode};
    use rand::Rng;

    fn param(name: &str, data: Vec<f64>) -> (String, Tensor) {
        let n = data.len();
        (name.to_string(), Tensor::from_vec(vec![n], data).unwrap())
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let params = vec![param("p", vec![1.0, -2.0, 3.0])];
        params[0].1.zero_grad();
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 0.1, 0.5, 0.999, 1e-8).unwrap();
        assert_eq!(params[0].1.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_hand_computed_first_step() {
        // p=0, g=1, lr=0.1, β1=0.5, β2=0.999, eps=0: m̂=1, v̂=1 → p = −0.1.
        let params = vec![param("p", vec![0.0])];
        params[0].1.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 0.1, 0.5, 0.999, 0.0).unwrap();
        assert!((params[0].1.value(0) + 0.1).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_with_zero_betas_degenerates_to_sign_scaled_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let p0: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (lr, eps) = (0.05, 1e-8);
            let params = vec![param("p", p0.clone())];
            params[0].1.accumulate_grad(&g);
            let mut state = AdamState::new(&params);
            adam_step(&params, &mut state, lr, 0.0, 0.0, eps).unwrap();
            for i in 0..5 {
                let expected = p0[i] - lr * g[i] / (g[i].abs() + eps);
                assert!((params[0].1.value(i) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let params = vec![param("p", vec![0.3, -0.7])];
            let mut state = AdamState::new(&params);
            for step in 0..10 {
                params[0].1.zero_grad();
                params[0]
                    .1
                    .accumulate_grad(&[0.1 * step as f64, -0.05 * step as f64]);
                adam_step(&params, &mut state, 0.01, 0.5, 0.999, 1e-8).unwrap();
            }
            params[0].1.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_flat_history_drops_once_after_patience() {
        let trace = replay_lr_trace(&[10.0, 10.0, 10.0, 10.0], 3, 0.1, 1.0, true);
        assert_eq!(trace, vec![1.0, 1.0, 1.0, 0.1]);

        let mut sched = PlateauScheduler::new(1.0, 0.1, 3, true);
        let stateful: Vec<f64> = [10.0, 10.0, 10.0, 10.0]
            .iter()
            .map(|&m| sched.step(m))
            .collect();
        assert_eq!(stateful, trace);
    }

    #[test]
    fn plateau_strictly_improving_history_keeps_lr() {
        let trace = replay_lr_trace(&[1.0, 2.0, 3.0, 4.0, 5.0], 3, 0.1, 0.5, true);
        assert!(trace.iter().all(|&lr| lr == 0.5));
    }

    #[test]
    fn plateau_two_drops_compound() {
        let history = vec![10.0; 9];
        let lr = plateau_schedule(&history, 3, 0.1, 1.0, true);
        // drops after epochs 4 and 7 (wait-counter resets after each drop)
        assert!((lr - 0.01).abs() < 1e-15);
        let trace = replay_lr_trace(&history, 3, 0.1, 1.0, true);
        assert_eq!(trace[3], 0.1);
        assert_eq!(trace[6], 0.1 * 0.1);
    }

    #[test]
    fn plateau_loss_metric_treats_lower_as_better() {
        let trace = replay_lr_trace(&[5.0, 4.0, 3.0, 2.0], 2, 0.5, 1.0, false);
        assert!(trace.iter().all(|&lr| lr == 1.0));
        let trace = replay_lr_trace(&[5.0, 5.0, 5.0], 2, 0.5, 1.0, false);
        assert_eq!(trace, vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn replay_matches_stateful_scheduler_on_random_histories() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let history: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let patience = rng.gen_range(1..5);
            let replayed = replay_lr_trace(&history, patience, 0.1, 1.0, true);
            let mut sched = PlateauScheduler::new(1.0, 0.1, patience, true);
            let stateful: Vec<f64> = history.iter().map(|&m| sched.step(m)).collect();
            assert_eq!(replayed, stateful);
        }
    }

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SynthConfig {
            seen_classes: 3,
            unseen_classes: 2,
            samples_per_class: 15,
            audio_dim: 8,
            visual_dim: 8,
            text_dim: 6,
            cluster_spread: 0.05,
            modality_noise: 0.05,
            seed: 42,
        })
        .unwrap()
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            audio_dim: 8,
            visual_dim: 8,
            text_dim: 6,
            hidden_dim: 8,
            common_dim: 6,
            dropout_enc: 0.1,
            dropout_proj: 0.1,
            dropout_dec: 0.1,
            unimodal: UnimodalMode::Both,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 12,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_reduces_training_loss_and_is_deterministic() {
        let dataset = tiny_dataset();
        let run = || {
            let mut model = KdaModel::init(tiny_model_config(), 3).unwrap();
            fit(&mut model, &dataset, &tiny_train_config(), None).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.epochs.last().unwrap().loss.total < a.epochs[0].loss.total);
        let key = |r: &TrainReport| -> Vec<(u64, u64, u64, u64)> {
            r.epochs
                .iter()
                .map(|e| {
                    (
                        e.loss.total.to_bits(),
                        e.eval.hm.to_bits(),
                        e.eval.zsl.to_bits(),
                        e.lr.to_bits(),
                    )
                })
                .collect()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn fit_lr_trace_is_replayable_and_non_increasing() {
        let dataset = tiny_dataset();
        let mut model = KdaModel::init(tiny_model_config(), 3).unwrap();
        let config = tiny_train_config();
        let report = fit(&mut model, &dataset, &config, None).unwrap();
        let history: Vec<f64> = report.epochs.iter().map(|e| e.eval.hm).collect();
        let replayed = replay_lr_trace(
            &history,
            config.plateau_patience,
            config.plateau_factor,
            config.lr,
            true,
        );
        let recorded: Vec<f64> = report.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(recorded, replayed);
        for pair in recorded.windows(2) {
            assert!(pair[1] <= pair[0]);
            if pair[1] < pair[0] {
                assert!((pair[1] - pair[0] * config.plateau_factor).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn lambda_zero_gradients_equal_pure_margin_loss_gradients() {
        let dataset = tiny_dataset();
        let model = KdaModel::init(tiny_model_config(), 9).unwrap();
        let seen = dataset.seen_classes();
        let margins = refresh_margins(&model, &dataset, &seen, 1.0, 0.2).unwrap();
        let ids: Vec<String> = dataset.split.train[..6].to_vec();
        let (audio, visual, classes) = dataset.stack_features(&ids).unwrap();
        let labels: Vec<usize> = classes.iter().map(|c| *c as usize).collect();
        let params = model.trainable_parameters();

        let grads_of = |use_objective: bool| -> Vec<Vec<f64>> {
            for (_, p) in &params {
                p.zero_grad();
            }
            let mut g = Graph::new();
            let av = model
                .embed_features::<ChaCha8Rng>(&mut g, &audio, &visual, None)
                .unwrap();
            let means =
                class_mean_embeddings::<ChaCha8Rng>(&mut g, &model, &dataset, &seen, None).unwrap();
            let loss = if use_objective {
                kda_objective(&mut g, &av.rho_av, &means, &labels, &margins, 0.0)
                    .unwrap()
                    .total
            } else {
                let logits = class_logits(&mut g, &av.rho_av, &means).unwrap();
                kaml_loss(&mut g, &logits, &labels, &margins).unwrap()
            };
            g.backward(&loss).unwrap();
            params
                .iter()
                .map(|(_, p)| p.grad().unwrap_or_default())
                .collect()
        };
        let with_align_term = grads_of(true);
        let kaml_only = grads_of(false);
        for (a, b) in with_align_term.iter().zip(&kaml_only) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y);
            }
        }
    }

    #[test]
    fn unimodal_training_never_updates_the_frozen_branch() {
        let dataset = tiny_dataset();
        let mut cfg = tiny_model_config();
        cfg.unimodal = UnimodalMode::AudioOnly;
        let mut model = KdaModel::init(cfg, 3).unwrap();
        let frozen_before: Vec<(String, Vec<f64>)> = model
            .named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("v_") || n.starts_with("attn"))
            .map(|(n, p)| (n, p.to_vec()))
            .collect();
        let mut train_cfg = tiny_train_config();
        train_cfg.max_epochs = 3;
        fit(&mut model, &dataset, &train_cfg, None).unwrap();
        for (name, before) in frozen_before {
            let after = model
                .named_parameters()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .to_vec();
            assert_eq!(before, after, "frozen parameter '{name}' changed");
        }
    }

    #[test]
    fn fit_aborts_on_non_finite_loss_with_location() {
        let mut dataset = tiny_dataset();
        // Poison several training samples with huge alternating-sign values:
        // once any of them survives a ReLU, the squared mean difference in
        // the alignment term overflows and the first epoch must abort.
        let poison_ids: Vec<String> = dataset.split.train[..8].to_vec();
        for record in dataset.records.iter_mut() {
            if poison_ids.contains(&record.id) {
                for (j, v) in record.audio.iter_mut().enumerate() {
                    *v = if j % 2 == 0 { 1e300 } else { -1e300 };
                }
                for (j, v) in record.visual.iter_mut().enumerate() {
                    *v = if j % 2 == 0 { -1e300 } else { 1e300 };
                }
            }
        }
        let mut model = KdaModel::init(tiny_model_config(), 3).unwrap();
        match fit(&mut model, &dataset, &tiny_train_config(), None) {
            Err(TrainError::NonFinite { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn per_step_margin_refresh_runs_and_is_deterministic() {
        let dataset = tiny_dataset();
        let run = || {
            let mut model = KdaModel::init(tiny_model_config(), 3).unwrap();
            let config = TrainConfig {
                margin_refresh: MarginRefresh::PerStep,
                max_epochs: 3,
                ..tiny_train_config()
            };
            fit(&mut model, &dataset, &config, None)
                .unwrap()
                .epochs
                .iter()
                .map(|e| e.loss.total.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_map_round_trip_and_validation() {
        let mut map = BTreeMap::new();
        for (k, v) in [
            ("lr", "0.01"),
            ("beta1", "0.9"),
            ("batch_size", "16"),
            ("plateau_metric", "loss"),
            ("margin_refresh", "per-step"),
            ("lambda", "2.5"),
            ("seed", "99"),
        ] {
            map.insert(k.to_string(), v.to_string());
        }
        let mut cfg = TrainConfig::default();
        cfg.apply_map(&mut map).unwrap();
        assert!(map.is_empty());
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.plateau_metric, PlateauMetric::Loss);
        assert_eq!(cfg.margin_refresh, MarginRefresh::PerStep);
        assert_eq!(cfg.lambda, 2.5);
        assert_eq!(cfg.seed, 99);

        let bad = TrainConfig {
            plateau_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

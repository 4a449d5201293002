//! Source pre-training, classification/adversarial alternation and the
//! minimax updates, with the learning-rate and trade-off schedules.
//!
//! One adversarial step runs a single forward pass, then two backward passes
//! over the same graph: `L_F` for the classifier (descent) and `L_G` for the
//! feature extractor (ascent).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::{Scenario, TrainingData};
use crate::error::{DadaError, Result};
use crate::eval::{accuracy, condition_failure_rate, predictions, MetricsRecord, Phase};
use crate::losses::{
    assemble, category_weights, loss_supervised, CategoryWeights, LambdaPlacement, LossInputs, Objective, Supervision,
};
use crate::model::{init_network, DadaNetwork, ParamGroup};

/// `eta0 / (1 + alpha p)^beta`.
pub fn lr_schedule(p: f64, eta0: f64, alpha: f64, beta: f64) -> f64 {
    eta0 / (1.0 + alpha * p).powf(beta)
}

/// `2 / (1 + exp(-gamma p)) - 1`.
pub fn lambda_schedule(p: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * p).exp()) - 1.0
}

/// Every hyperparameter of a run. Defaults follow the published schedule
/// constants; desk-scale runs usually raise `eta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Hidden widths of the feature extractor; each layer is affine + ReLU.
    pub hidden: Vec<usize>,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Open-set leakage probability.
    pub q: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Classification epochs per alternation; 0 disables the classification
    /// phases.
    pub t_cls: usize,
    /// Adversarial epochs per alternation.
    pub t_adv: usize,
    pub n_alter: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub lambda_placement: LambdaPlacement,
    pub condition_threshold: f64,
    /// Add the source cross-entropy of pre-training to the adversarial
    /// updates of both players.
    pub keep_supervision: bool,
    /// Probabilities read by the source cross-entropy of pre-training,
    /// classification epochs and the kept supervision.
    pub supervision: Supervision,
    /// Constant trade-off weight instead of the ramp.
    pub lambda_fixed: Option<f64>,
    /// Constant weight for the category-weight combination instead of the
    /// trade-off weight.
    pub category_lambda: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Dada,
            hidden: vec![64, 64],
            eta0: 1e-4,
            alpha: 10.0,
            beta: 0.75,
            gamma: 10.0,
            q: 0.1,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_cls: 10,
            t_adv: 2,
            n_alter: 16,
            pretrain_epochs: 10,
            seed: 0,
            lambda_placement: LambdaPlacement::Joint,
            condition_threshold: 0.5,
            keep_supervision: true,
            supervision: Supervision::Full,
            lambda_fixed: None,
            category_lambda: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DadaError::Config(msg));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 must be positive, got {}", self.eta0));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("alpha, beta and gamma must be non-negative".into());
        }
        if self.objective == Objective::DadaO && !(0.0..0.5).contains(&self.q) {
            return bad(format!("q must lie in [0, 0.5) for dada_o, got {}", self.q));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.t_adv == 0 || self.n_alter == 0 {
            return bad("t_adv and n_alter must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden needs at least one positive width".into());
        }
        if !(self.condition_threshold > 0.0 && self.condition_threshold < 1.0) {
            return bad("condition_threshold must lie in (0, 1)".into());
        }
        if let Some(l) = self.lambda_fixed {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda_fixed must be non-negative, got {l}"));
            }
        }
        if let Some(l) = self.category_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("category_lambda must lie in [0, 1], got {l}"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, progress: f64) -> f64 {
        lr_schedule(progress, self.eta0, self.alpha, self.beta)
    }

    pub fn lambda_at(&self, progress: f64) -> f64 {
        self.lambda_fixed.unwrap_or_else(|| lambda_schedule(progress, self.gamma))
    }

    /// Partial-set runs need partial data, open-set runs open data; the
    /// source-only baseline accepts anything.
    pub fn check_scenario(&self, scenario: Scenario) -> Result<()> {
        let ok = match self.objective {
            Objective::SourceOnly => true,
            Objective::DadaP => scenario == Scenario::Partial,
            Objective::DadaO => scenario == Scenario::Open,
            _ => scenario != Scenario::Open,
        };
        if ok {
            Ok(())
        } else {
            Err(DadaError::Scenario(format!(
                "objective {} cannot train on {scenario} data",
                self.objective
            )))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| DadaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DadaError::Config(e.to_string()))
    }
}

/// Receives the network after every epoch and returns extra metrics. This is
/// the only way evaluation data reaches the training loop.
pub trait EpochMonitor {
    fn evaluate(&self, net: &DadaNetwork) -> Result<Vec<(String, f64)>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: DadaNetwork,
    /// Optimizer steps over all phases.
    pub step: u64,
    pub adv_step: u64,
    pub total_adv_steps: u64,
    /// `adv_step / total_adv_steps`.
    pub progress: f64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    velocity: Vec<Vec<f64>>,
    pub history: Vec<MetricsRecord>,
    /// Weights of the most recent partial-set refresh.
    pub category_weights: Option<CategoryWeights>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        check_data(data)?;
        let mut dims = vec![data.source_x[0].len()];
        dims.extend(&config.hidden);
        let net = init_network(&dims, data.num_classes, config.seed)?;
        let velocity = net.params().iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Stream 0 initializes weights; batches come from stream 1.
        rng.set_stream(1);
        let steps = steps_per_epoch(data.source_x.len(), config.batch_size);
        Ok(TrainState {
            net,
            step: 0,
            adv_step: 0,
            total_adv_steps: (config.n_alter * config.t_adv * steps) as u64,
            progress: 0.0,
            epoch: 0,
            rng,
            velocity,
            history: Vec::new(),
            category_weights: None,
        })
    }

    fn log(&mut self, phase: Phase, name: impl Into<String>, value: f64) {
        self.history.push(MetricsRecord {
            step: self.step,
            epoch: self.epoch,
            phase,
            name: name.into(),
            value,
        });
    }
}

fn check_data(data: &TrainingData) -> Result<()> {
    if data.source_x.is_empty() || data.target_x.is_empty() {
        return Err(DadaError::invalid("training needs source and target instances"));
    }
    if data.source_x.len() != data.source_y.len() {
        return Err(DadaError::invalid("one label per source instance is required"));
    }
    if let Some(&y) = data.source_y.iter().find(|&&y| y >= data.num_classes) {
        return Err(DadaError::invalid(format!("source label {y} outside 0..{}", data.num_classes)));
    }
    Ok(())
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn gather_rows(x: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
    Tensor::from_rows(&rows)
}

/// SGD with momentum and weight decay. `direction` is the gradient to
/// descend (already negated for ascent).
fn sgd_update(param: &mut Tensor, velocity: &mut [f64], direction: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, v), g) in param.data_mut().iter_mut().zip(velocity.iter_mut()).zip(direction) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

fn apply_gradients(
    state: &mut TrainState,
    config: &TrainConfig,
    grads_f: &[Vec<f64>],
    grads_g: Option<&[Vec<f64>]>,
    lr: f64,
) {
    let velocity = &mut state.velocity;
    for (i, (group, param)) in state.net.params_mut().into_iter().enumerate() {
        let direction: Vec<f64> = match (group, grads_g) {
            (ParamGroup::Features, Some(g)) => g[i].iter().map(|v| -v).collect(),
            _ => grads_f[i].clone(),
        };
        sgd_update(param, &mut velocity[i], &direction, lr, config.momentum, config.weight_decay);
    }
}

/// One K-way cross-entropy update of `G` and `F` on a source batch.
pub fn classification_step(state: &mut TrainState, config: &TrainConfig, xs: &Tensor, ys: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = state.net.register(&mut tape);
    let x = tape.constant(xs.clone());
    let p = state.net.probs_on_tape(&mut tape, &params, x)?;
    let ce = loss_supervised(&mut tape, p, ys, config.supervision)?;
    tape.backward(ce)?;
    let grads = collect_grads(&tape, &params.vars);
    let lr = config.lr_at(state.progress);
    apply_gradients(state, config, &grads, None, lr);
    state.step += 1;
    Ok(tape.value(ce).item())
}

fn collect_grads(tape: &Tape, vars: &[crate::autodiff::Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect()
}

/// One minimax update on a source and a target batch. Returns the loss
/// components, the trade-off weight and the learning rate that were used.
pub fn adversarial_step(
    state: &mut TrainState,
    config: &TrainConfig,
    xs: &Tensor,
    ys: &[usize],
    xt: &Tensor,
) -> Result<BTreeMap<String, f64>> {
    let progress = state.progress;
    let lambda = config.lambda_at(progress);
    let lr = config.lr_at(progress);
    if config.objective == Objective::SourceOnly {
        let ce = classification_step(state, config, xs, ys)?;
        advance_progress(state);
        return Ok(BTreeMap::from([
            ("loss_ce".to_string(), ce),
            ("lambda".to_string(), lambda),
            ("lr".to_string(), lr),
        ]));
    }

    let mut tape = Tape::new();
    let params = state.net.register(&mut tape);
    let vs = tape.constant(xs.clone());
    let vt = tape.constant(xt.clone());
    let ps = state.net.probs_on_tape(&mut tape, &params, vs)?;
    let pt = state.net.probs_on_tape(&mut tape, &params, vt)?;
    let inputs = LossInputs {
        probs_s: ps,
        labels_s: ys,
        probs_t: Some(pt),
        lambda,
        placement: config.lambda_placement,
        weights: state.category_weights.as_ref(),
        q: Some(config.q),
    };
    let bundle = assemble(&mut tape, config.objective, &inputs)?;
    let supervised = config.keep_supervision && config.objective != Objective::DannCa;
    let ce = loss_supervised(&mut tape, ps, ys, config.supervision)?;
    let (l_f, l_g) = if supervised {
        let f = tape.add(bundle.l_f, ce)?;
        let g = match bundle.l_g {
            Some(g) => Some(tape.sub(g, ce)?),
            None => None,
        };
        (f, g)
    } else {
        (bundle.l_f, bundle.l_g)
    };

    let mut values = bundle.values(&tape);
    values.insert("loss_ce".into(), tape.value(ce).item());

    tape.backward(l_f)?;
    let grads_f = collect_grads(&tape, &params.vars);
    let grads_g = match l_g {
        Some(g) => {
            tape.reset_grads();
            tape.backward(g)?;
            Some(collect_grads(&tape, &params.vars))
        }
        None => None,
    };
    apply_gradients(state, config, &grads_f, grads_g.as_deref(), lr);

    state.step += 1;
    advance_progress(state);
    values.insert("lambda".into(), lambda);
    values.insert("lr".into(), lr);
    Ok(values)
}

fn advance_progress(state: &mut TrainState) {
    state.adv_step += 1;
    state.progress = if state.total_adv_steps == 0 {
        1.0
    } else {
        (state.adv_step as f64 / state.total_adv_steps as f64).min(1.0)
    };
}

/// Refreshes partial-set category weights over the whole target set.
pub fn refresh_category_weights(state: &mut TrainState, config: &TrainConfig, data: &TrainingData) -> Result<()> {
    let outs = state.net.forward(&data.target_x)?;
    let p_bar: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| o.p_bar[..data.num_classes].to_vec())
        .collect();
    let lambda = config
        .category_lambda
        .unwrap_or_else(|| config.lambda_at(state.progress).min(1.0));
    state.category_weights = Some(category_weights(&p_bar, lambda)?);
    Ok(())
}

fn end_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &TrainingData,
    phase: Phase,
    losses: BTreeMap<String, f64>,
    steps: usize,
    monitor: Option<&dyn EpochMonitor>,
) -> Result<()> {
    for (name, total) in losses {
        let value = if name == "lambda" || name == "lr" {
            total
        } else {
            total / steps as f64
        };
        state.log(phase, name, value);
    }
    let outs = state.net.forward(&data.source_x)?;
    let preds = predictions(&outs);
    let acc = accuracy(&preds, &data.source_y)?;
    state.log(phase, "acc_source", acc);
    let fails = outs
        .iter()
        .zip(&data.source_y)
        .filter(|(o, &y)| o.p[y] <= config.condition_threshold)
        .count();
    state.log(phase, "cond_fail_rate", fails as f64 / data.source_y.len() as f64);
    if phase == Phase::Adv {
        if let Some(w) = state.category_weights.clone() {
            for (k, c) in w.c.iter().enumerate() {
                state.log(phase, format!("cat_weight_{}", k + 1), *c);
            }
        }
    }
    if let Some(m) = monitor {
        for (name, value) in m.evaluate(&state.net)? {
            state.log(phase, name, value);
        }
    }
    log::debug!("epoch {} ({phase}) acc_source {acc:.4}", state.epoch);
    Ok(())
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One pass of cross-entropy training over the shuffled source set.
pub fn classification_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &TrainingData,
    phase: Phase,
    monitor: Option<&dyn EpochMonitor>,
) -> Result<()> {
    state.epoch += 1;
    let order = shuffled(data.source_x.len(), &mut state.rng);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(config.batch_size) {
        let xs = gather_rows(&data.source_x, chunk)?;
        let ys: Vec<usize> = chunk.iter().map(|&i| data.source_y[i]).collect();
        total += classification_step(state, config, &xs, &ys)?;
        steps += 1;
    }
    let losses = BTreeMap::from([("loss_ce".to_string(), total), ("lr".to_string(), config.lr_at(state.progress))]);
    end_epoch(state, config, data, phase, losses, steps, monitor)
}

/// One pass of minimax updates. Source batches follow a shuffled source
/// order; target batches of equal size cycle through a shuffled target order.
pub fn adversarial_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &TrainingData,
    monitor: Option<&dyn EpochMonitor>,
) -> Result<()> {
    state.epoch += 1;
    if config.objective == Objective::DadaP {
        refresh_category_weights(state, config, data)?;
    }
    let src = shuffled(data.source_x.len(), &mut state.rng);
    let tgt = shuffled(data.target_x.len(), &mut state.rng);
    let mut cursor = 0;
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut steps = 0;
    for chunk in src.chunks(config.batch_size) {
        let t_idx: Vec<usize> = (0..chunk.len())
            .map(|j| tgt[(cursor + j) % tgt.len()])
            .collect();
        cursor = (cursor + chunk.len()) % tgt.len();
        let xs = gather_rows(&data.source_x, chunk)?;
        let ys: Vec<usize> = chunk.iter().map(|&i| data.source_y[i]).collect();
        let xt = gather_rows(&data.target_x, &t_idx)?;
        let values = adversarial_step(state, config, &xs, &ys, &xt)?;
        for (k, v) in values {
            if k == "lambda" || k == "lr" {
                sums.insert(k, v);
            } else {
                *sums.entry(k).or_insert(0.0) += v;
            }
        }
        steps += 1;
    }
    end_epoch(state, config, data, Phase::Adv, sums, steps, monitor)
}

/// Cross-entropy pre-training on labeled source data.
pub fn pretrain_source(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &TrainingData,
    monitor: Option<&dyn EpochMonitor>,
) -> Result<()> {
    for _ in 0..config.pretrain_epochs {
        classification_epoch(state, config, data, Phase::Pretrain, monitor)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history(&self) -> &[MetricsRecord] {
        &self.state.history
    }
}

/// Pre-training followed by `n_alter` rounds of `t_cls` classification
/// epochs and `t_adv` adversarial epochs. For source-only runs the
/// adversarial epochs reduce to cross-entropy descent for both players.
pub fn train(config: &TrainConfig, data: &TrainingData, monitor: Option<&dyn EpochMonitor>) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_scenario(data.scenario)?;
    let mut state = TrainState::new(config, data)?;
    pretrain_source(&mut state, config, data, monitor)?;
    for round in 0..config.n_alter {
        log::info!("alternation {}/{}", round + 1, config.n_alter);
        for _ in 0..config.t_cls {
            classification_epoch(&mut state, config, data, Phase::Cls, monitor)?;
        }
        for _ in 0..config.t_adv {
            adversarial_epoch(&mut state, config, data, monitor)?;
        }
    }
    if config.objective == Objective::DadaP {
        refresh_category_weights(&mut state, config, data)?;
    }
    Ok(TrainOutcome { state })
}

/// Fraction of labeled source instances whose true-category probability is
/// at most `threshold`.
pub fn source_condition_failure_rate(net: &DadaNetwork, data: &TrainingData, threshold: f64) -> Result<f64> {
    condition_failure_rate(net, &data.source_x, &data.source_y, threshold)
}

/// Value of `metric` at the last epoch of every maximal run of epochs that
/// share a phase, in training order.
pub fn phase_end_values(history: &[MetricsRecord], metric: &str) -> Vec<(Phase, u64, f64)> {
    let mut out: Vec<(Phase, u64, f64)> = Vec::new();
    for r in history.iter().filter(|r| r.name == metric) {
        match out.last_mut() {
            Some(last) if last.0 == r.phase => *last = (r.phase, r.epoch, r.value),
            _ => out.push((r.phase, r.epoch, r.value)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_gaussian_grid, make_two_moons};

    fn small_config(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            hidden: vec![8],
            eta0: 0.05,
            batch_size: 16,
            t_cls: 1,
            t_adv: 1,
            n_alter: 2,
            pretrain_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0.0, 1e-4, 10.0, 0.75), 1e-4);
        let end = lr_schedule(1.0, 1e-4, 10.0, 0.75);
        assert!((end - 1.655_600_260_761_702e-5).abs() < 1e-15);
        assert_eq!(lambda_schedule(0.0, 10.0), 0.0);
        assert!((lambda_schedule(1.0, 10.0) - 0.999_909_204_262_595_2).abs() < 1e-15);
    }

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("eta0 = 0.0").is_err());
        assert!(TrainConfig::from_toml("objective = \"dada_o\"\nq = 0.5").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let partial = TrainConfig::from_toml("objective = \"dada_p\"\neta0 = 0.01").unwrap();
        assert_eq!(partial.objective, Objective::DadaP);
        assert_eq!(partial.batch_size, 64);
    }

    #[test]
    fn scenario_rules() {
        let c = small_config(Objective::DadaP);
        assert!(c.check_scenario(Scenario::Closed).is_err());
        assert!(c.check_scenario(Scenario::Partial).is_ok());
        let o = small_config(Objective::DadaO);
        assert!(o.check_scenario(Scenario::Open).is_ok());
        assert!(o.check_scenario(Scenario::Closed).is_err());
        assert!(small_config(Objective::SourceOnly).check_scenario(Scenario::Open).is_ok());
        assert!(small_config(Objective::Dada).check_scenario(Scenario::Open).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (data, _) = make_two_moons(60, 30.0, 0.1, 2).unwrap().split();
        let c = small_config(Objective::Dada);
        let a = train(&c, &data, None).unwrap();
        let b = train(&c, &data, None).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn zero_pretrain_epochs_leave_network_untouched() {
        let (data, _) = make_two_moons(20, 0.0, 0.1, 2).unwrap().split();
        let mut c = small_config(Objective::Dada);
        c.pretrain_epochs = 0;
        let mut state = TrainState::new(&c, &data).unwrap();
        let before = state.clone();
        pretrain_source(&mut state, &c, &data, None).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn pretraining_separates_gaussians() {
        let pair = make_gaussian_grid(2, 100, [0.0, 0.0], 0.3, 5).unwrap();
        let (data, _) = pair.split();
        let c = TrainConfig {
            pretrain_epochs: 30,
            ..small_config(Objective::SourceOnly)
        };
        let mut state = TrainState::new(&c, &data).unwrap();
        let before = source_condition_failure_rate(&state.net, &data, 0.5).unwrap();
        pretrain_source(&mut state, &c, &data, None).unwrap();
        let outs = state.net.forward(&data.source_x).unwrap();
        assert!(accuracy(&predictions(&outs), &data.source_y).unwrap() >= 0.99);
        let after = source_condition_failure_rate(&state.net, &data, 0.5).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn lambda_and_lr_follow_progress() {
        let (data, _) = make_two_moons(40, 30.0, 0.1, 1).unwrap().split();
        let c = small_config(Objective::Dada);
        let mut state = TrainState::new(&c, &data).unwrap();
        let xs = gather_rows(&data.source_x, &[0, 1, 2]).unwrap();
        let xt = gather_rows(&data.target_x, &[0, 1, 2]).unwrap();
        let ys = vec![data.source_y[0], data.source_y[1], data.source_y[2]];
        for _ in 0..4 {
            let p = state.progress;
            assert_eq!(p, state.adv_step as f64 / state.total_adv_steps as f64);
            let v = adversarial_step(&mut state, &c, &xs, &ys, &xt).unwrap();
            assert_eq!(v["lambda"], lambda_schedule(p, c.gamma));
            assert_eq!(v["lr"], lr_schedule(p, c.eta0, c.alpha, c.beta));
            assert!(state.progress > p);
        }
    }

    #[test]
    fn descent_step_lowers_classifier_loss() {
        // With the feature extractor frozen, a small enough step on F
        // decreases L_F on the same batch.
        let (data, _) = make_two_moons(40, 30.0, 0.1, 3).unwrap().split();
        let c = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..small_config(Objective::Dada)
        };
        let state = TrainState::new(&c, &data).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let xs = gather_rows(&data.source_x, &idx).unwrap();
        let xt = gather_rows(&data.target_x, &idx).unwrap();
        let ys: Vec<usize> = idx.iter().map(|&i| data.source_y[i]).collect();
        let l_f = |net: &DadaNetwork| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let vs = tape.constant(xs.clone());
            let vt = tape.constant(xt.clone());
            let ps = net.probs_on_tape(&mut tape, &params, vs).unwrap();
            let pt = net.probs_on_tape(&mut tape, &params, vt).unwrap();
            let inp = LossInputs {
                probs_s: ps,
                labels_s: &ys,
                probs_t: Some(pt),
                lambda: 0.5,
                placement: LambdaPlacement::Joint,
                weights: None,
                q: None,
            };
            let b = assemble(&mut tape, Objective::Dada, &inp).unwrap();
            tape.backward(b.l_f).unwrap();
            (tape.value(b.l_f).item(), collect_grads(&tape, &params.vars))
        };
        let (before, grads) = l_f(&state.net);
        let mut lr = 1e-1;
        let mut decreased = false;
        for _ in 0..30 {
            let mut net = state.net.clone();
            for (i, (group, p)) in net.params_mut().into_iter().enumerate() {
                if group == ParamGroup::Classifier {
                    for (w, g) in p.data_mut().iter_mut().zip(&grads[i]) {
                        *w -= lr * g;
                    }
                }
            }
            if l_f(&net).0 < before {
                decreased = true;
                break;
            }
            lr /= 2.0;
        }
        assert!(decreased);
    }

    #[test]
    fn epoch_logs_have_fixed_evaluation_metrics() {
        let (data, _) = make_two_moons(40, 30.0, 0.1, 1).unwrap().split();
        let c = small_config(Objective::Dada);
        let out = train(&c, &data, None).unwrap();
        let epochs = (c.pretrain_epochs + c.n_alter * (c.t_cls + c.t_adv)) as u64;
        assert_eq!(out.state.epoch, epochs);
        for name in ["acc_source", "cond_fail_rate", "lr"] {
            assert_eq!(out.history().iter().filter(|r| r.name == name).count() as u64, epochs);
        }
        let adv = out.history().iter().filter(|r| r.name == "lambda").count();
        assert_eq!(adv, c.n_alter * c.t_adv);
        for r in out.history() {
            assert!(crate::eval::is_known_metric(&r.name), "{}", r.name);
        }
        let ends = phase_end_values(out.history(), "cond_fail_rate");
        let phases: Vec<Phase> = ends.iter().map(|e| e.0).collect();
        assert_eq!(phases, vec![Phase::Pretrain, Phase::Cls, Phase::Adv, Phase::Cls, Phase::Adv]);
    }

    #[test]
    fn scenario_mismatch_is_rejected() {
        let (data, _) = make_two_moons(20, 30.0, 0.1, 1).unwrap().split();
        let err = train(&small_config(Objective::DadaP), &data, None).unwrap_err();
        assert!(matches!(err, DadaError::Scenario(_)));
    }
}

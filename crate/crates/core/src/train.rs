//! DAgger-style imitation training with SGD or Adam, CSV logging and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::evidence_inputs;
use crate::error::{Result, SdbError};
use crate::eval::evaluate;
use crate::model::{Detached, Phase, SdbModel};
use crate::params::Fwd;
use crate::regularizer::LossBreakdown;
use crate::selection::ControllerState;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::world::{derived_rng, Action, Episode, MetricsTable, ToyWorld};
use crate::{flat_config, string_config_value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

string_config_value!(Optimizer);

flat_config! {
    /// Optimisation schedule and outputs of one training run.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct TrainConfig {
        /// number of parameter updates
        iterations: usize = 400; "updates",
        /// episodes per update
        batch_size: usize = 8; "episodes",
        /// step size
        learning_rate: f64 = 0.05; "dimensionless",
        /// update rule (sgd or adam)
        optimizer: Optimizer = Optimizer::Sgd; "enum",
        /// Adam first-moment decay
        adam_beta1: f64 = 0.9; "dimensionless",
        /// Adam second-moment decay
        adam_beta2: f64 = 0.999; "dimensionless",
        /// global gradient-norm clip; 0 disables clipping
        grad_clip: f64 = 5.0; "gradient norm",
        /// initial probability of following a policy sample instead of the expert
        dagger_mix: f64 = 0.5; "probability",
        /// value of dagger_mix reached linearly at the last update
        dagger_mix_final: f64 = 1.0; "probability",
        /// evaluate on the held-out set every this many updates; 0 disables
        eval_every: usize = 0; "updates",
        /// seeds used by multi-seed protocols
        seeds: Vec<u64> = vec![0, 1, 2, 3, 4]; "seed",
        /// training CSV path; empty disables logging
        log_path: String = String::new(); "path",
        /// checkpoint written at the end of training; empty disables it
        checkpoint_path: String = String::new(); "path",
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SdbError::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        for m in [self.dagger_mix, self.dagger_mix_final] {
            if !(0.0..=1.0).contains(&m) {
                return bad("dagger_mix values must lie in [0, 1]");
            }
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Linear schedule from `dagger_mix` to `dagger_mix_final`.
    pub fn mix_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.dagger_mix;
        }
        let frac = iteration as f64 / (self.iterations - 1) as f64;
        self.dagger_mix + (self.dagger_mix_final - self.dagger_mix) * frac
    }
}

/// One row of the training CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub duet: f64,
    pub agr: f64,
    pub sm: f64,
    pub div: f64,
    pub sdb: f64,
    pub omega: f64,
    pub m: f64,
    pub gamma: f64,
    pub rho: f64,
    pub total: f64,
}

/// Per-episode sums on the tape.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub duet: Var,
    pub agr: Option<Var>,
    pub sm: Option<Var>,
    pub div: Option<Var>,
    pub steps: usize,
    pub shift_norms: Vec<f64>,
    /// Per-step NLL values.
    pub step_losses: Vec<f64>,
    /// Per-step logits.
    pub step_logits: Vec<Vec<f64>>,
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn add_opt(f: &mut Fwd, acc: Option<Var>, v: Var) -> Var {
    match acc {
        Some(a) => f.tape.add(a, v),
        None => v,
    }
}

/// Roll out one episode with expert labels, mixing policy samples and expert moves.
pub fn run_episode_train(
    model: &SdbModel,
    f: &mut Fwd,
    episode: &mut Episode,
    dagger_mix: f64,
    rng: &mut impl Rng,
    detached: &mut Detached,
) -> Result<EpisodeTrace> {
    let instruction = model.encode_instruction(f, &episode.instruction)?;
    let dist = episode.graph.distances_from(episode.graph.goal);
    let mut state = ControllerState::new();
    let (mut duet, mut agr, mut sm, mut div) = (None, None, None, None);
    let mut trace_norms = Vec::new();
    let mut step_losses = Vec::new();
    let mut step_logits = Vec::new();
    for t in 1..=model.cfg.max_episode_len {
        let current = episode.current();
        let candidates = episode.graph.candidate_actions(current);
        let inputs = evidence_inputs(&episode.graph, current, &candidates, &episode.history_summary());
        let out = model.step(f, &instruction, &inputs, t, &mut state, Phase::Train, rng, detached)?;
        let expert = episode.graph.expert_action_with(current, episode.graph.goal, &dist)?;
        let idx = candidates.index_of(expert).expect("expert action is a candidate");
        let logp = f.tape.log_softmax_rows(out.logits);
        let lp = f.tape.pick(logp, 0, idx);
        let nll = f.tape.scale(lp, -1.0);
        step_losses.push(f.tape.value(nll).item());
        step_logits.push(f.tape.value(out.logits).data().to_vec());
        duet = Some(add_opt(f, duet, nll));
        if let Some(c) = out.components {
            agr = Some(add_opt(f, agr, c.agr));
            sm = Some(add_opt(f, sm, c.sm));
            div = Some(add_opt(f, div, c.div));
        }
        trace_norms.extend(out.shift_norm);
        let follow_policy = rng.random::<f64>() < dagger_mix;
        let action = if follow_policy { candidates.actions()[sample(&out.probabilities, rng)] } else { expert };
        episode.apply(action);
        if action == Action::Stop {
            break;
        }
    }
    Ok(EpisodeTrace {
        duet: duet.expect("at least one step"),
        agr,
        sm,
        div,
        steps: step_losses.len(),
        shift_norms: trace_norms,
        step_losses,
        step_logits,
    })
}

/// Summed objective of a batch of episodes, normalised by the total step count.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub grads: Vec<Mat>,
    pub breakdown: LossBreakdown,
    pub steps: usize,
    pub shift_norms: Vec<f64>,
}

/// Forward and backward over `episodes`; `detached` holds one entry per episode.
pub fn batch_gradients(
    model: &SdbModel,
    episodes: &mut [Episode],
    dagger_mix: f64,
    rngs: &mut [rand_chacha::ChaCha8Rng],
    detached: &mut [Detached],
    with_grads: bool,
) -> Result<BatchResult> {
    let mut grads = model.store.zeros_like();
    let (mut duet, mut agr, mut sm, mut div) = (0.0, 0.0, 0.0, 0.0);
    let mut steps = 0;
    let mut shift_norms = Vec::new();
    let lambdas = model.lambdas();
    let omega = model.omega().unwrap_or(0.0);
    for ((ep, rng), det) in episodes.iter_mut().zip(rngs.iter_mut()).zip(detached.iter_mut()) {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &model.store, with_grads);
        let tr = run_episode_train(model, &mut f, ep, dagger_mix, rng, det)?;
        steps += tr.steps;
        shift_norms.extend(tr.shift_norms.iter());
        let val = |f: &Fwd, v: Option<Var>| v.map(|v| f.tape.value(v).item()).unwrap_or(0.0);
        duet += f.tape.value(tr.duet).item();
        agr += val(&f, tr.agr);
        sm += val(&f, tr.sm);
        div += val(&f, tr.div);
        if !with_grads {
            continue;
        }
        // episode share of duet + ω·(λ·components), before dividing by the batch step count
        let loss = match (model.operator, tr.agr, tr.sm, tr.div) {
            (Some(op), Some(a), Some(s), Some(d)) => {
                let a = f.tape.scale(a, lambdas.agr);
                let s = f.tape.scale(s, lambdas.sm);
                let d = f.tape.scale(d, lambdas.div);
                let sdb = f.tape.add(a, s);
                let sdb = f.tape.add(sdb, d);
                let theta = f.p(op.theta_omega);
                let w = f.tape.softplus(theta);
                let weighted = f.tape.mul(w, sdb);
                f.tape.add(tr.duet, weighted)
            }
            _ => tr.duet,
        };
        let mut g = f.tape.backward(loss);
        let eg = f.binder.collect(&model.store, &mut g);
        for (acc, e) in grads.iter_mut().zip(&eg) {
            acc.add_assign(e);
        }
    }
    let n = steps as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(1.0 / n));
    let breakdown = LossBreakdown::new(duet / n, agr / n, sm / n, div / n, lambdas, omega);
    Ok(BatchResult { grads, breakdown, steps, shift_norms })
}

/// Scalar loss of a batch whose detached values were already recorded (used by gradient checks).
pub fn batch_loss(model: &SdbModel, episodes: &[Episode], dagger_mix: f64, seeds: &[u64], detached: &[Detached]) -> Result<f64> {
    let mut eps = episodes.to_vec();
    eps.iter_mut().for_each(Episode::reset);
    let mut rngs: Vec<_> = seeds.iter().map(|&s| derived_rng(s, &[])).collect();
    let mut det: Vec<Detached> = detached.iter().cloned().map(Detached::into_replay).collect();
    Ok(batch_gradients(model, &mut eps, dagger_mix, &mut rngs, &mut det, false)?.breakdown.total)
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

fn apply_update(model: &mut SdbModel, grads: &[Mat], cfg: &TrainConfig, adam: &mut AdamState) {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    adam.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(adam.t);
    let c2 = 1.0 - b2.powi(adam.t);
    for (i, entry) in model.store.entries_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let p = entry.value.data_mut();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, gi) in p.iter_mut().zip(g) {
                    *w -= cfg.learning_rate * clip * gi;
                }
            }
            Optimizer::Adam => {
                let m = adam.m[i].data_mut();
                let v = adam.v[i].data_mut();
                for j in 0..p.len() {
                    let gi = clip * g[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * gi;
                    v[j] = b2 * v[j] + (1.0 - b2) * gi * gi;
                    p[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

fn log_row(model: &SdbModel, step: usize, b: &LossBreakdown) -> LogRow {
    LogRow {
        step,
        duet: b.duet,
        agr: b.agr,
        sm: b.sm,
        div: b.div,
        sdb: b.sdb,
        omega: b.omega,
        m: model.margin().unwrap_or(0.0),
        gamma: model.gamma().unwrap_or(0.0),
        rho: model.rho().unwrap_or(0.0),
        total: b.total,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SdbModel,
    pub log: Vec<LogRow>,
    /// `(iteration, held-out metrics)` for every periodic evaluation.
    pub evals: Vec<(usize, MetricsTable)>,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Train a fresh model on the toy world.
pub fn train(model_cfg: &crate::types::ModelConfig, cfg: &TrainConfig, world: &ToyWorld) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model_cfg.vocab_size < world.cfg.token_vocab() {
        return Err(SdbError::Config(format!(
            "vocab_size {} is smaller than the world's {} tokens",
            model_cfg.vocab_size,
            world.cfg.token_vocab()
        )));
    }
    if world.table.env_dim() != model_cfg.env_dim {
        return Err(SdbError::Config("world feature width differs from env_dim".into()));
    }
    let mut model = SdbModel::new(model_cfg)?;
    let mut adam = AdamState { m: model.store.zeros_like(), v: model.store.zeros_like(), t: 0 };
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();
    for it in 0..cfg.iterations {
        let mut rngs: Vec<_> = (0..cfg.batch_size).map(|b| derived_rng(model_cfg.seed, &[it as u64, b as u64])).collect();
        let mut episodes = rngs.iter_mut().map(|r| world.sample_train_episode(r)).collect::<Result<Vec<_>>>()?;
        let mut det = vec![Detached::recording(); cfg.batch_size];
        let res = batch_gradients(&model, &mut episodes, cfg.mix_at(it), &mut rngs, &mut det, true)?;
        let finite = res.breakdown.total.is_finite() && res.grads.iter().all(Mat::is_finite);
        if !finite {
            if !cfg.checkpoint_path.is_empty() {
                model.save(Path::new(&cfg.checkpoint_path))?;
            }
            return Err(SdbError::NonFiniteLoss { iteration: it });
        }
        log.push(log_row(&model, it, &res.breakdown));
        apply_update(&mut model, &res.grads, cfg, &mut adam);
        for n in res.shift_norms {
            model.buffers.record(n);
        }
        if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            evals.push((it + 1, evaluate(&model, &world.eval)?.metrics));
        }
    }
    if !cfg.log_path.is_empty() {
        write_log(Path::new(&cfg.log_path), &log)?;
    }
    if !cfg.checkpoint_path.is_empty() {
        model.save(Path::new(&cfg.checkpoint_path))?;
    }
    Ok(TrainOutcome { model, log, evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ModelConfig;
    use crate::world::WorldConfig;

    fn small_world(env_dim: usize) -> ToyWorld {
        let cfg = WorldConfig { train_graphs: 4, eval_graphs: 2, eval_episodes_per_graph: 2, ..WorldConfig::default() };
        ToyWorld::new(&cfg, env_dim, 12).unwrap()
    }

    #[test]
    fn teacher_forcing_follows_expert() {
        let mcfg = ModelConfig::default();
        let model = SdbModel::new(&mcfg).unwrap();
        let world = small_world(mcfg.env_dim);
        for i in 0..5 {
            let mut rng = derived_rng(3, &[i]);
            let mut ep = world.sample_train_episode(&mut rng).unwrap();
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &model.store, false);
            run_episode_train(&model, &mut f, &mut ep, 0.0, &mut rng, &mut Detached::recording()).unwrap();
            assert_eq!(ep.trajectory, ep.expert_path);
            assert!(ep.stopped);
        }
    }

    #[test]
    fn zero_lambdas_make_total_equal_duet() {
        let mcfg = ModelConfig { lambda_agr: 0.0, lambda_sm: 0.0, lambda_div: 0.0, ..ModelConfig::default() };
        let world = small_world(mcfg.env_dim);
        let tcfg = TrainConfig { iterations: 2, batch_size: 2, ..TrainConfig::default() };
        let out = train(&mcfg, &tcfg, &world).unwrap();
        for r in &out.log {
            assert_eq!(r.total, r.duet);
            assert_eq!(r.sdb, 0.0);
        }
    }

    #[test]
    fn zero_iterations_keep_initialisation() {
        let mcfg = ModelConfig::default();
        let world = small_world(mcfg.env_dim);
        let out = train(&mcfg, &TrainConfig { iterations: 0, ..TrainConfig::default() }, &world).unwrap();
        assert_eq!(out.model.store, SdbModel::new(&mcfg).unwrap().store);
        assert!(out.log.is_empty());
    }

    #[test]
    fn mix_schedule_is_linear() {
        let c = TrainConfig { iterations: 5, ..TrainConfig::default() };
        assert_eq!(c.mix_at(0), 0.5);
        assert_eq!(c.mix_at(4), 1.0);
        assert_eq!(c.mix_at(2), 0.75);
    }
}

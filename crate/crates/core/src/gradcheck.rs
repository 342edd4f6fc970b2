//! Central finite-difference checks of the analytic training gradient.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::{Detached, SdbModel};
use crate::params::ParamGroup;
use crate::tensor::{softplus_inverse, Mat};
use crate::train::{batch_gradients, batch_loss};
use crate::types::ModelConfig;
use crate::world::{derived_rng, Episode, ToyWorld, WorldConfig};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupReport {
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub scalars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub eps: f64,
    pub groups: BTreeMap<ParamGroup, GroupReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compare `grad` with central differences of `f` at `x`; returns the max relative error.
pub fn check_function(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64], eps: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let up = f(&xp);
        xp[i] = x[i] - eps;
        let down = f(&xp);
        xp[i] = x[i];
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Small world matching the toy model dimensions.
pub fn toy_world(cfg: &ModelConfig, seed: u64) -> Result<ToyWorld> {
    let wc = WorldConfig {
        num_nodes_min: 5,
        num_nodes_max: 6,
        min_hops: 1,
        landmark_vocab: cfg.vocab_size - 4,
        distractor_vocab: 4,
        train_graphs: 3,
        eval_graphs: 1,
        eval_episodes_per_graph: 1,
        world_seed: seed,
        ..WorldConfig::default()
    };
    ToyWorld::new(&wc, cfg.env_dim, cfg.max_instruction_len)
}

/// Finite-difference check of the full objective over `episodes` teacher-forced episodes of at most `steps` steps.
///
/// Values that the model treats as constants (confidence cues, previous
/// descriptors, noise scale) are recorded once and held fixed while the
/// parameters are perturbed, so both sides differentiate the same function.
pub fn grad_check(cfg: &ModelConfig, steps: usize, episodes: usize, eps: f64, seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig { max_episode_len: steps, seed, ..cfg.clone() };
    let mut model = SdbModel::new(&cfg)?;
    if let Some(op) = model.operator {
        // keep the diversity hinge active so θ_m carries a gradient
        *model.store.get_mut(op.theta_m) = Mat::scalar(softplus_inverse(10.0));
    }
    let world = toy_world(&cfg, seed)?;
    let mut rng = derived_rng(seed, &[77]);
    let eps_set: Vec<Episode> = (0..episodes).map(|_| world.sample_train_episode(&mut rng)).collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| seed * 1000 + i).collect();

    let mut work = eps_set.clone();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| derived_rng(s, &[])).collect();
    let mut det = vec![Detached::recording(); episodes];
    let analytic = batch_gradients(&model, &mut work, 0.0, &mut rngs, &mut det, true)?;

    let mut groups: BTreeMap<ParamGroup, GroupReport> = BTreeMap::new();
    for idx in 0..model.store.len() {
        let group = model.store.entries()[idx].group;
        let n = model.store.entries()[idx].value.len();
        let mut worst: f64 = 0.0;
        let mut max_grad: f64 = 0.0;
        for j in 0..n {
            let orig = model.store.entries()[idx].value.data()[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                model.store.entries_mut()[idx].value.data_mut()[j] = v;
                batch_loss(&model, &eps_set, 0.0, &seeds, &det)
            };
            let up = eval_at(orig + eps)?;
            let down = eval_at(orig - eps)?;
            model.store.entries_mut()[idx].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.grads[idx].data()[j];
            worst = worst.max(relative_error(a, numeric));
            max_grad = max_grad.max(a.abs());
        }
        let e = groups.entry(group).or_insert(GroupReport { max_rel_error: 0.0, max_abs_grad: 0.0, scalars: 0 });
        e.max_rel_error = e.max_rel_error.max(worst);
        e.max_abs_grad = e.max_abs_grad.max(max_grad);
        e.scalars += n;
    }
    Ok(GradReport { eps, groups })
}

//! The K→1 stage: reliability cues, scoring, soft consolidation and
//! EMA-stabilised selection.

use rand::Rng;

use crate::error::{Result, SdbError};
use crate::layers::Mlp;
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{cosine, dot, entropy, sigmoid, softmax, Mat};
use crate::types::{argmax_lowest, ActionDistribution, CueMask, ModelConfig, Tokens};

pub const MIN_NORM: f64 = 1e-12;

/// `[A, C, S]` for one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityCues {
    pub alignment: f64,
    pub confidence: f64,
    pub stability: f64,
}

impl ReliabilityCues {
    pub fn as_array(&self) -> [f64; 3] {
        [self.alignment, self.confidence, self.stability]
    }

    pub fn masked(&self, drop: CueMask) -> Self {
        Self {
            alignment: if drop.alignment { 0.0 } else { self.alignment },
            confidence: if drop.confidence { 0.0 } else { self.confidence },
            stability: if drop.stability { 0.0 } else { self.stability },
        }
    }
}

fn check_norm(v: &[f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n < MIN_NORM {
        return Err(SdbError::ZeroVector(n));
    }
    Ok(())
}

/// Cues from pooled descriptors and per-hypothesis action distributions.
/// Without a previous descriptor the current anchor descriptor stands in.
pub fn compute_acs(descriptors: &[Vec<f64>], dists: &[ActionDistribution], prev: Option<&[f64]>) -> Result<Vec<ReliabilityCues>> {
    assert_eq!(descriptors.len(), dists.len());
    assert!(!descriptors.is_empty(), "empty hypothesis bank");
    for d in descriptors {
        check_norm(d)?;
    }
    let anchor = &descriptors[0];
    let prev = prev.unwrap_or(anchor);
    check_norm(prev)?;
    Ok(descriptors
        .iter()
        .zip(dists)
        .map(|(h, p)| ReliabilityCues {
            alignment: cosine(h, anchor),
            confidence: -p.entropy(),
            stability: cosine(h, prev),
        })
        .collect())
}

/// The scorer `g_ψ: R³ → R`.
#[derive(Debug, Clone, Copy)]
pub struct Scorer {
    pub mlp: Mlp,
}

impl Scorer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, "scorer", ParamGroup::Scorer, 3, cfg.scorer_hidden, 1, cfg.init_gain, rng) }
    }

    /// `a^(k) = g_ψ([A, C, S])`.
    pub fn reliability_score(&self, store: &ParamStore, cues: &[ReliabilityCues]) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = cues.iter().map(|c| c.as_array().to_vec()).collect();
        self.mlp.eval(store, &Mat::from_rows(&rows)).into_vec()
    }

    /// Tape version on a `K × 3` cue matrix, returning weights as a `1 × K` row.
    pub fn weights(&self, f: &mut Fwd, cues: Var) -> Var {
        let scores = self.mlp.forward(f, cues);
        let row = f.tape.transpose(scores);
        f.tape.softmax_rows(row)
    }
}

/// `w = softmax(a)`.
pub fn controller_weights(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// `Σ_k w_k X_k` for equally shaped matrices.
pub fn soft_consolidate(contexts: &[Mat], w: &[f64]) -> Mat {
    assert_eq!(contexts.len(), w.len());
    let mut out = Mat::zeros(contexts[0].rows(), contexts[0].cols());
    for (c, &wk) in contexts.iter().zip(w) {
        out.add_assign(&c.scaled(wk));
    }
    out
}

/// Tape version of [`soft_consolidate`] with `w` a `1 × K` node.
pub fn soft_consolidate_tape(f: &mut Fwd, contexts: &[Tokens], w: Var) -> Tokens {
    let mut acc: Option<Var> = None;
    for (k, c) in contexts.iter().enumerate() {
        let wk = f.tape.pick(w, 0, k);
        let term = f.tape.mul(c.values, wk);
        acc = Some(match acc {
            Some(a) => f.tape.add(a, term),
            None => term,
        });
    }
    Tokens { values: acc.expect("nonempty bank"), mask: contexts[0].mask.clone() }
}

/// Per-episode controller memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Number of steps already consumed.
    pub step: usize,
    pub weights: Vec<f64>,
    pub ema_weights: Vec<f64>,
    pub prev_descriptor: Option<Vec<f64>>,
}

impl ControllerState {
    pub fn new() -> Self {
        Self { step: 0, weights: Vec::new(), ema_weights: Vec::new(), prev_descriptor: None }
    }

    /// `w̄_t = (1−ρ) w̄_{t−1} + ρ w_t`, or `w_1` at the first step. `step` is 1-based.
    pub fn update(&mut self, w: &[f64], rho: f64, step: usize) -> Result<usize> {
        if self.step + 1 != step {
            return Err(SdbError::StaleState { state_step: self.step, step });
        }
        self.ema_weights = if self.step == 0 {
            w.to_vec()
        } else {
            assert_eq!(self.ema_weights.len(), w.len());
            self.ema_weights.iter().zip(w).map(|(b, x)| (1.0 - rho) * b + rho * x).collect()
        };
        self.weights = w.to_vec();
        self.step = step;
        Ok(argmax_lowest(&self.ema_weights))
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new()
    }
}

/// EMA update, lowest-index argmax and the chosen context; `h†` becomes the chosen descriptor.
pub fn stable_select<'b>(
    state: &mut ControllerState,
    w: &[f64],
    rho: f64,
    step: usize,
    contexts: &'b [Mat],
    descriptors: &[Vec<f64>],
) -> Result<(usize, &'b Mat)> {
    let k = state.update(w, rho, step)?;
    state.prev_descriptor = Some(descriptors[k].clone());
    Ok((k, &contexts[k]))
}

/// Uniformly random slot.
pub fn random_select<'b, T>(bank: &'b [T], rng: &mut impl Rng) -> (usize, &'b T) {
    let k = rng.random_range(0..bank.len());
    (k, &bank[k])
}

pub fn rho(store: &ParamStore, theta_rho: ParamId) -> f64 {
    sigmoid(store.get(theta_rho).item())
}

/// Row-wise cosine of `rows` (`K × H`) against `target` (`1 × H`), as `K × 1`.
pub fn cosine_rows(f: &mut Fwd, rows: Var, target: Var) -> Var {
    let h = f.tape.value(rows).cols();
    let ones = f.tape.constant(Mat::filled(h, 1, 1.0));
    let num = f.tape.matmul_t(rows, target);
    let sq = f.tape.mul(rows, rows);
    let rn = f.tape.matmul(sq, ones);
    let tsq = f.tape.mul(target, target);
    let tn = f.tape.sum_all(tsq);
    // one square root of the product keeps the self-cosine exactly 1
    let den = f.tape.mul(rn, tn);
    let den = f.tape.sqrt(den);
    f.tape.div(num, den)
}

/// Entropy-based confidence `−H(p)` of a distribution.
pub fn confidence(p: &[f64]) -> f64 {
    -entropy(p)
}

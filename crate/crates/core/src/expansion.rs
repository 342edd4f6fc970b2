//! The 1→K stage: state summary, low-rank shift basis, slot gating,
//! alignment residuals, hypothesis generation and shared fusion.
//!
//! Matrices follow the row-vector convention: a token matrix `X` is
//! `[tokens × H]` and the shift basis acts on the right, `X·B` with
//! `B = W_d · Diag(g) · W_u`, `W_d: [H × r]`, `W_u: [r × H]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::layers::{Attention, LayerNorm, Mlp};
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{sigmoid, Mat};
use crate::types::{ModelConfig, Tokens};

/// Shared fusion block: biased cross-attention then a feed-forward layer, both residual.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub attention: Attention,
    pub ffn: Mlp,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden_dim;
        Self {
            attention: Attention::new(store, "fusion.attention", ParamGroup::Fusion, h, cfg.init_gain, rng),
            ffn: Mlp::new(store, "fusion.ffn", ParamGroup::Fusion, h, cfg.ffn_hidden, h, cfg.init_gain, rng),
        }
    }

    /// `Z = Q + CA(Q, E; bias)`, `H = Z + FFN(Z)`. Fully masked evidence contributes a zero context.
    pub fn forward(&self, f: &mut Fwd, queries: &Tokens, evidence: &Tokens, bias: Option<Var>) -> Tokens {
        let z = match self.attention.forward(f, queries.values, bias, evidence) {
            Some(ctx) => f.tape.add(queries.values, ctx),
            None => queries.values,
        };
        let ff = self.ffn.forward(f, z);
        Tokens { values: f.tape.add(z, ff), mask: queries.mask.clone() }
    }
}

/// Parameters of the shift generator.
#[derive(Debug, Clone, Copy)]
pub struct Hsg {
    pub w_d: ParamId,
    pub w_u: ParamId,
    pub w_b: ParamId,
    pub w_pi: ParamId,
    pub w_align: ParamId,
    pub align_attention: Attention,
    /// Query biases for slots `1..K` as rows of a `[(K−1) × H]` matrix; slot 0 has none.
    pub query_bias: Option<ParamId>,
    pub theta_gamma: ParamId,
    pub layer_norm: LayerNorm,
    pub phi: Mlp,
    pub step_embedding: ParamId,
    pub k: usize,
}

/// Output of hypothesis generation before fusion.
#[derive(Debug, Clone)]
pub struct Hypotheses {
    /// `T̃^(0..K)`; slot 0 is the raw instruction matrix.
    pub shifted: Vec<Tokens>,
    /// `1 × K` slot gates.
    pub gating: Var,
    /// `1 × r` basis gates.
    pub basis_gates: Var,
    /// Mean row norm of the shifts over slots `1..K`.
    pub mean_shift_norm: f64,
}

/// Fused hypothesis contexts; index 0 is the anchor.
#[derive(Debug, Clone)]
pub struct HypothesisBank {
    pub contexts: Vec<Tokens>,
    pub gating: Option<Var>,
    pub mean_shift_norm: Option<f64>,
}

impl HypothesisBank {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub const ANCHOR: usize = 0;
}

/// `W_d · Diag(gates) · W_u` as a dense `[H × H]` matrix.
pub fn build_shift_basis(w_d: &Mat, gates: &[f64], w_u: &Mat) -> Mat {
    let mut scaled = w_d.clone();
    for i in 0..scaled.rows() {
        for (v, g) in scaled.row_mut(i).iter_mut().zip(gates) {
            *v *= g;
        }
    }
    scaled.matmul(w_u)
}

fn row_norm_mean(m: &Mat) -> f64 {
    (0..m.rows()).map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / m.rows() as f64
}

impl Hsg {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (h, r, k) = (cfg.hidden_dim, cfg.rank, cfg.k);
        let g = ParamGroup::Hsg;
        let gain = cfg.init_gain;
        Self {
            w_d: store.add_random("hsg.w_d", g, h, r, gain, rng),
            w_u: store.add_random("hsg.w_u", g, r, h, gain, rng),
            w_b: store.add_random("hsg.w_b", g, h, r, gain, rng),
            w_pi: store.add_random("hsg.w_pi", g, h, k, gain, rng),
            w_align: store.add_random("hsg.w_align", g, h, h, gain, rng),
            align_attention: Attention::new(store, "hsg.align_attention", g, h, gain, rng),
            query_bias: (k > 1).then(|| store.add_random("hsg.query_bias", g, k - 1, h, 0.5 * gain * ((k - 1) as f64).sqrt(), rng)),
            theta_gamma: store.add("theta_gamma", ParamGroup::ThetaGamma, Mat::scalar(0.0)),
            layer_norm: LayerNorm::new(store, "hsg.layer_norm", g, h),
            phi: Mlp::new(store, "hsg.phi", g, 3 * h, cfg.ffn_hidden, h, gain, rng),
            step_embedding: store.add_random("hsg.step_embedding", g, cfg.max_episode_len, h, 0.5 * gain * (cfg.max_episode_len as f64).sqrt(), rng),
            k,
        }
    }

    pub fn gamma(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.theta_gamma).item())
    }

    /// Query bias for slot `k` (`None` for the anchor).
    pub fn bias(&self, f: &mut Fwd, k: usize) -> Option<Var> {
        if k == 0 {
            return None;
        }
        let all = f.p(self.query_bias.expect("slots beyond the anchor have query biases"));
        Some(f.tape.gather_rows(all, &[k - 1]))
    }

    /// Input of `φ`: `[pool(T), pool(E), e(t)]`, with `step` 0-based.
    pub fn summary_input(&self, f: &mut Fwd, instruction: &Tokens, evidence: &Tokens, step: usize) -> Result<Var> {
        let pt = instruction.pool(f.tape)?;
        let pe = evidence.pool(f.tape)?;
        let table = f.p(self.step_embedding);
        let rows = f.tape.value(table).rows();
        let e = f.tape.gather_rows(table, &[step.min(rows - 1)]);
        Ok(f.tape.concat_cols(&[pt, pe, e]))
    }

    /// `s_t = φ([pool(T), pool(E), e(t)])` as a `1 × H` row.
    pub fn state_summary(&self, f: &mut Fwd, instruction: &Tokens, evidence: &Tokens, step: usize) -> Result<Var> {
        let x = self.summary_input(f, instruction, evidence, step)?;
        Ok(self.phi.forward(f, x))
    }

    /// `sigmoid(s W_b)`, length r.
    pub fn basis_gates(&self, f: &mut Fwd, s: Var) -> Var {
        let w = f.p(self.w_b);
        let z = f.tape.matmul(s, w);
        f.tape.sigmoid(z)
    }

    /// Dense shift basis for the current gates.
    pub fn shift_basis(&self, store: &ParamStore, gates: &[f64]) -> Mat {
        build_shift_basis(store.get(self.w_d), gates, store.get(self.w_u))
    }

    /// `π_t = softmax(s W_π)`.
    pub fn slot_gating(&self, f: &mut Fwd, s: Var) -> Var {
        let w = f.p(self.w_pi);
        let z = f.tape.matmul(s, w);
        f.tape.softmax_rows(z)
    }

    /// `CA(LN(T), E; δq^(k)) · W_align`, zero on masked instruction rows and for fully masked evidence.
    pub fn alignment_residual(&self, f: &mut Fwd, normed: &Tokens, evidence: &Tokens, k: usize) -> Var {
        let bias = self.bias(f, k);
        match self.align_attention.forward(f, normed.values, bias, evidence) {
            Some(ctx) => {
                let w = f.p(self.w_align);
                let r = f.tape.matmul(ctx, w);
                let mask = normed.mask_column(f.tape);
                f.tape.mul(r, mask)
            }
            None => {
                let shape = f.tape.value(normed.values).shape();
                f.tape.constant(Mat::zeros(shape.0, shape.1))
            }
        }
    }

    pub fn normalize(&self, f: &mut Fwd, instruction: &Tokens) -> Tokens {
        Tokens { values: self.layer_norm.forward(f, instruction.values), mask: instruction.mask.clone() }
    }

    /// `T̃^(0) = T`; `T̃^(k) = LN(T) + π_k·LN(T)B + γ·π_k·ΔT_align^(k)` for `k ≥ 1`.
    pub fn generate_hypotheses(&self, f: &mut Fwd, instruction: &Tokens, evidence: &Tokens, s: Var) -> Hypotheses {
        let gates = self.basis_gates(f, s);
        let gating = self.slot_gating(f, s);
        let mut shifted = vec![instruction.clone()];
        let mut norm_sum = 0.0;
        if self.k > 1 {
            let normed = self.normalize(f, instruction);
            let w_d = f.p(self.w_d);
            let w_u = f.p(self.w_u);
            let down = f.tape.matmul(normed.values, w_d);
            let down = f.tape.mul(down, gates);
            let global = f.tape.matmul(down, w_u);
            let tg = f.p(self.theta_gamma);
            let gamma = f.tape.sigmoid(tg);
            for k in 1..self.k {
                let pik = f.tape.pick(gating, 0, k);
                let align = self.alignment_residual(f, &normed, evidence, k);
                let align = f.tape.mul(align, gamma);
                let inner = f.tape.add(global, align);
                let shift = f.tape.mul(inner, pik);
                norm_sum += row_norm_mean(f.tape.value(shift));
                let values = f.tape.add(normed.values, shift);
                shifted.push(Tokens { values, mask: instruction.mask.clone() });
            }
        }
        let mean_shift_norm = if self.k > 1 { norm_sum / (self.k - 1) as f64 } else { 0.0 };
        Hypotheses { shifted, gating, basis_gates: gates, mean_shift_norm }
    }

    /// `T̃^(k) = LN(T) + ε_k` with each row of `ε_k` a random direction of length `scale`.
    pub fn noise_hypotheses(&self, f: &mut Fwd, instruction: &Tokens, scale: f64, rng: &mut impl Rng) -> Vec<Tokens> {
        let mut out = vec![instruction.clone()];
        if self.k > 1 {
            let normed = self.normalize(f, instruction);
            let (rows, cols) = f.tape.value(normed.values).shape();
            for _ in 1..self.k {
                let eps = noise_rows(rows, cols, scale, rng);
                let eps = f.tape.constant(eps);
                out.push(Tokens { values: f.tape.add(normed.values, eps), mask: instruction.mask.clone() });
            }
        }
        out
    }
}

/// Gaussian directions rescaled to row norm `scale`.
pub fn noise_rows(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        let row = m.row_mut(i);
        row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v *= scale / n);
    }
    m
}

/// Full 1→K expansion: summary, hypotheses, then shared fusion with per-slot query bias.
pub fn expand(hsg: &Hsg, fusion: &Fusion, f: &mut Fwd, instruction: &Tokens, evidence: &Tokens, step: usize) -> Result<HypothesisBank> {
    let s = hsg.state_summary(f, instruction, evidence, step)?;
    let hyp = hsg.generate_hypotheses(f, instruction, evidence, s);
    let mut contexts = Vec::with_capacity(hyp.shifted.len());
    for (k, t) in hyp.shifted.iter().enumerate() {
        let bias = hsg.bias(f, k);
        contexts.push(fusion.forward(f, t, evidence, bias));
    }
    Ok(HypothesisBank { contexts, gating: Some(hyp.gating), mean_shift_norm: Some(hyp.mean_shift_norm) })
}

/// Noise ablation: anchor as usual, other slots fuse norm-matched noisy copies with no query bias.
pub fn noise_expand(
    hsg: &Hsg,
    fusion: &Fusion,
    f: &mut Fwd,
    instruction: &Tokens,
    evidence: &Tokens,
    scale: f64,
    rng: &mut impl Rng,
) -> HypothesisBank {
    let shifted = hsg.noise_hypotheses(f, instruction, scale, rng);
    let contexts = shifted.iter().map(|t| fusion.forward(f, t, evidence, None)).collect();
    HypothesisBank { contexts, gating: None, mean_shift_norm: None }
}

//! Instruction and evidence encoders plus the shared navigation head.

use rand::Rng;

use crate::error::{Result, SdbError};
use crate::layers::Attention;
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{softmax, Mat};
use crate::types::{ModelConfig, Tokens};
use crate::world::{Action, CandidateSet, NavGraph};

#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub token_embedding: ParamId,
    pub self_attention: Attention,
    pub evidence_weight: ParamId,
    pub evidence_bias: ParamId,
    pub stop_embedding: ParamId,
    pub head: ParamId,
}

/// Sinusoidal position table `[len × dim]`.
pub fn positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for p in 0..len {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            m[(p, j)] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Rows `[neighbor feature ++ history]` per neighbor, then `[current feature ++ history]` for STOP.
pub fn evidence_inputs(graph: &NavGraph, current: usize, candidates: &CandidateSet, history: &[f64]) -> Mat {
    let rows: Vec<Vec<f64>> = candidates
        .actions()
        .iter()
        .map(|a| {
            let node = match a {
                Action::Move(n) => *n,
                Action::Stop => current,
            };
            graph.feature(node).iter().chain(history).copied().collect()
        })
        .collect();
    Mat::from_rows(&rows)
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden_dim;
        let g = ParamGroup::Encoders;
        Self {
            token_embedding: store.add_random("enc.token_embedding", g, cfg.vocab_size, h, cfg.init_gain * (cfg.vocab_size as f64).sqrt(), rng),
            self_attention: Attention::new(store, "enc.self_attention", g, h, cfg.init_gain, rng),
            evidence_weight: store.add_random("enc.evidence_weight", g, 2 * cfg.env_dim, h, cfg.init_gain, rng),
            evidence_bias: store.add("enc.evidence_bias", g, Mat::zeros(1, h)),
            stop_embedding: store.add_random("enc.stop_embedding", g, 1, h, cfg.init_gain, rng),
            head: store.add_random("head.projection", ParamGroup::Head, h, h, cfg.init_gain, rng),
        }
    }

    /// Embedding plus sinusoidal positions, followed by one residual self-attention layer.
    pub fn encode_instruction(&self, f: &mut Fwd, tokens: &[usize], max_len: usize) -> Result<Tokens> {
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(SdbError::EmptyInstruction { len: tokens.len(), max: max_len });
        }
        let vocab = f.store.get(self.token_embedding).rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(SdbError::Config(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let table = f.p(self.token_embedding);
        let emb = f.tape.gather_rows(table, tokens);
        let dim = f.tape.value(emb).cols();
        let pos = f.tape.constant(positions(tokens.len(), dim));
        let x = f.tape.add(emb, pos);
        let mem = Tokens { values: x, mask: vec![true; tokens.len()] };
        let att = self.self_attention.forward(f, x, None, &mem).expect("instruction has valid tokens");
        Ok(Tokens { values: f.tape.add(x, att), mask: mem.mask })
    }

    /// One token per candidate; the STOP row also carries the stop embedding.
    pub fn encode_environment(&self, f: &mut Fwd, inputs: &Mat) -> Tokens {
        let n = inputs.rows();
        let x = f.tape.constant(inputs.clone());
        let w = f.p(self.evidence_weight);
        let b = f.p(self.evidence_bias);
        let proj = f.tape.matmul(x, w);
        let proj = f.tape.add(proj, b);
        let mut sel = Mat::zeros(n, 1);
        sel[(n - 1, 0)] = 1.0;
        let sel = f.tape.constant(sel);
        let stop = f.p(self.stop_embedding);
        let stop = f.tape.matmul(sel, stop);
        Tokens { values: f.tape.add(proj, stop), mask: vec![true; n] }
    }

    /// Candidate scores `pool(ctx) · W_head · E_iᵀ` as a `1 × n` row.
    pub fn action_logits(&self, f: &mut Fwd, ctx: &Tokens, evidence: &Tokens) -> Result<Var> {
        let pooled = ctx.pool(f.tape)?;
        Ok(self.logits_from_pooled(f, pooled, evidence))
    }

    pub fn logits_from_pooled(&self, f: &mut Fwd, pooled: Var, evidence: &Tokens) -> Var {
        let w = f.p(self.head);
        let q = f.tape.matmul(pooled, w);
        f.tape.matmul_t(q, evidence.values)
    }

    /// Head probabilities on plain values, for gradient-free uses.
    pub fn probabilities_value(&self, store: &ParamStore, pooled: &[f64], evidence: &Mat) -> Vec<f64> {
        let q = Mat::row_vector(pooled.to_vec()).matmul(store.get(self.head));
        softmax(q.matmul_t(evidence).data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::new(&mut store, &cfg, &mut rng);
        (store, bb)
    }

    #[test]
    fn instruction_encoding_contract() {
        let (store, bb) = setup();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        assert!(matches!(bb.encode_instruction(&mut f, &[], 4), Err(SdbError::EmptyInstruction { .. })));
        assert!(bb.encode_instruction(&mut f, &[1, 2, 3, 4, 5], 4).is_err());
        let one = bb.encode_instruction(&mut f, &[3], 4).unwrap();
        assert_eq!(one.mask, vec![true]);
        let a = bb.encode_instruction(&mut f, &[1, 2, 3], 4).unwrap();
        let a2 = bb.encode_instruction(&mut f, &[1, 2, 3], 4).unwrap();
        let b = bb.encode_instruction(&mut f, &[3, 2, 1], 4).unwrap();
        assert_eq!(f.tape.value(a.values), f.tape.value(a2.values));
        // compare as multisets of rows: a permutation must not just reorder the output rows
        let mut ra: Vec<Vec<f64>> = (0..3).map(|i| f.tape.value(a.values).row(i).to_vec()).collect();
        let mut rb: Vec<Vec<f64>> = (0..3).map(|i| f.tape.value(b.values).row(i).to_vec()).collect();
        ra.sort_by(|x, y| x.partial_cmp(y).unwrap());
        rb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_ne!(ra, rb);
    }

    #[test]
    fn stop_row_ignores_neighbors() {
        let (store, bb) = setup();
        let mut inputs = Mat::from_rows(&[vec![0.5; 12], vec![-1.0; 12], vec![0.25; 12]]);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let e1 = bb.encode_environment(&mut f, &inputs);
        inputs.row_mut(0).iter_mut().for_each(|v| *v = 3.0);
        let e2 = bb.encode_environment(&mut f, &inputs);
        assert_eq!(f.tape.value(e1.values).rows(), 3);
        assert_eq!(f.tape.value(e1.values).row(2), f.tape.value(e2.values).row(2));
        assert_ne!(f.tape.value(e1.values).row(0), f.tape.value(e2.values).row(0));
    }

    #[test]
    fn head_examples() {
        let (mut store, bb) = setup();
        *store.get_mut(bb.head) = Mat::identity(8);
        let pooled = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut e = Mat::zeros(2, 8);
        e[(0, 0)] = 9f64.ln();
        let p = bb.probabilities_value(&store, &pooled, &e);
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
        let same = Mat::from_rows(&[vec![0.3; 8], vec![0.3; 8]]);
        let p = bb.probabilities_value(&store, &pooled, &same);
        assert_eq!(p[0], p[1]);
        let p = bb.probabilities_value(&store, &pooled, &Mat::zeros(1, 8));
        assert_eq!(p, vec![1.0]);
        // tape and value paths agree, and reordering rows reorders probabilities
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let pv = f.tape.constant(Mat::row_vector(pooled.clone()));
        let ev = Tokens { values: f.tape.constant(e.clone()), mask: vec![true; 2] };
        let logits = bb.logits_from_pooled(&mut f, pv, &ev);
        let q = softmax(f.tape.value(logits).data());
        assert!((q[0] - 0.9).abs() < 1e-12);
        let swapped = Mat::from_rows(&[e.row(1).to_vec(), e.row(0).to_vec()]);
        let p2 = bb.probabilities_value(&store, &pooled, &swapped);
        assert!((p2[1] - 0.9).abs() < 1e-12);
    }
}

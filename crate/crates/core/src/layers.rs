//! Small tape-level building blocks shared by the backbone and the operator.

use rand::Rng;

use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Mat;
use crate::types::Tokens;

const MASKED_SCORE: f64 = -1e30;
pub const LN_EPS: f64 = 1e-5;

/// Single-head scaled dot-product attention with projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Attention {
    pub fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add_random(format!("{prefix}.wq"), group, dim, dim, gain, rng),
            wk: store.add_random(format!("{prefix}.wk"), group, dim, dim, gain, rng),
            wv: store.add_random(format!("{prefix}.wv"), group, dim, dim, gain, rng),
            wo: store.add_random(format!("{prefix}.wo"), group, dim, dim, gain, rng),
        }
    }

    /// Attend from `queries` (rows × H) to `memory`; `query_bias` (1 × H) is added to the
    /// projected queries. Returns `None` when every memory token is masked.
    pub fn forward(&self, f: &mut Fwd, queries: Var, query_bias: Option<Var>, memory: &Tokens) -> Option<Var> {
        if memory.mask.iter().all(|m| !m) {
            return None;
        }
        let wq = f.p(self.wq);
        let wk = f.p(self.wk);
        let wv = f.p(self.wv);
        let wo = f.p(self.wo);
        let mut q = f.tape.matmul(queries, wq);
        if let Some(b) = query_bias {
            q = f.tape.add(q, b);
        }
        let k = f.tape.matmul(memory.values, wk);
        let v = f.tape.matmul(memory.values, wv);
        let dim = f.tape.value(q).cols() as f64;
        let scores = f.tape.matmul_t(q, k);
        let mut scores = f.tape.scale(scores, 1.0 / dim.sqrt());
        if memory.mask.iter().any(|m| !m) {
            let bias = Mat::row_vector(memory.mask.iter().map(|&m| if m { 0.0 } else { MASKED_SCORE }).collect());
            let bias = f.tape.constant(bias);
            scores = f.tape.add(scores, bias);
        }
        let attn = f.tape.softmax_rows(scores);
        let ctx = f.tape.matmul(attn, v);
        Some(f.tape.matmul(ctx, wo))
    }
}

/// Per-token layer normalisation with learnable scale and offset.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{prefix}.scale"), group, Mat::filled(1, dim, 1.0)),
            offset: store.add(format!("{prefix}.offset"), group, Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let n = f.tape.layer_norm_rows(x, LN_EPS);
        let s = f.p(self.scale);
        let o = f.p(self.offset);
        let y = f.tape.mul(n, s);
        f.tape.add(y, o)
    }
}

/// Two-layer perceptron `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        output: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w1: store.add_random(format!("{prefix}.w1"), group, input, hidden, gain, rng),
            b1: store.add(format!("{prefix}.b1"), group, Mat::zeros(1, hidden)),
            w2: store.add_random(format!("{prefix}.w2"), group, hidden, output, gain, rng),
            b2: store.add(format!("{prefix}.b2"), group, Mat::zeros(1, output)),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w1 = f.p(self.w1);
        let b1 = f.p(self.b1);
        let w2 = f.p(self.w2);
        let b2 = f.p(self.b2);
        let h = f.tape.matmul(x, w1);
        let h = f.tape.add(h, b1);
        let h = f.tape.tanh(h);
        let y = f.tape.matmul(h, w2);
        f.tape.add(y, b2)
    }

    /// Same computation on plain values.
    pub fn eval(&self, store: &ParamStore, x: &Mat) -> Mat {
        let h = x.matmul(store.get(self.w1));
        let b1 = store.get(self.b1);
        let h = Mat::from_vec(
            h.rows(),
            h.cols(),
            h.data().iter().enumerate().map(|(i, v)| (v + b1.data()[i % b1.cols()]).tanh()).collect(),
        );
        let y = h.matmul(store.get(self.w2));
        let b2 = store.get(self.b2);
        Mat::from_vec(y.rows(), y.cols(), y.data().iter().enumerate().map(|(i, v)| v + b2.data()[i % b2.cols()]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_memory_token_gets_full_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::new(&mut store, "att", ParamGroup::Fusion, 4, 1.0, &mut rng);
        let e = Mat::row_vector(vec![0.3, -1.0, 2.0, 0.5]);
        let queries = Mat::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 0.0]]);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let q = f.tape.constant(queries);
        let mem = Tokens { values: f.tape.constant(e.clone()), mask: vec![true] };
        let out = att.forward(&mut f, q, None, &mem).unwrap();
        let expected = e.matmul(store.get(att.wv)).matmul(store.get(att.wo));
        for i in 0..2 {
            for (a, b) in f.tape.value(out).row(i).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let masked = Tokens { values: mem.values, mask: vec![false] };
        assert!(att.forward(&mut f, q, None, &masked).is_none());
    }

    #[test]
    fn mlp_eval_matches_tape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Scorer, 3, 5, 2, 1.0, &mut rng);
        *store.get_mut(mlp.b1) = Mat::row_vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let x = Mat::from_rows(&[vec![1.0, -1.0, 0.5], vec![0.0, 2.0, 1.0]]);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let xv = f.tape.constant(x.clone());
        let y = mlp.forward(&mut f, xv);
        let direct = mlp.eval(&store, &x);
        assert!(f.tape.value(y).zip_map(&direct, |a, b| (a - b).abs()).max_abs() < 1e-12);
    }
}

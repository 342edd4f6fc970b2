//! Named parameter tensors and their binding onto a [`Tape`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse grouping used for gradient-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoders,
    Head,
    Fusion,
    Hsg,
    Scorer,
    ThetaGamma,
    ThetaRho,
    ThetaM,
    ThetaOmega,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoders => "encoders",
            ParamGroup::Head => "head",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Hsg => "hsg",
            ParamGroup::Scorer => "scorer",
            ParamGroup::ThetaGamma => "theta_gamma",
            ParamGroup::ThetaRho => "theta_rho",
            ParamGroup::ThetaM => "theta_m",
            ParamGroup::ThetaOmega => "theta_omega",
        }
    }

    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Encoders,
        ParamGroup::Head,
        ParamGroup::Fusion,
        ParamGroup::Hsg,
        ParamGroup::Scorer,
        ParamGroup::ThetaGamma,
        ParamGroup::ThetaRho,
        ParamGroup::ThetaM,
        ParamGroup::ThetaOmega,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian init with standard deviation `gain / sqrt(rows)`.
    pub fn add_random(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = gain / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, group, Mat::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.entries.iter().map(|e| Mat::zeros(e.value.rows(), e.value.cols())).collect()
    }
}

/// Lazily places parameters onto a tape, at most once per forward pass.
#[derive(Debug)]
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    /// `trainable = false` binds parameters as constants (no backward work).
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self { vars: vec![None; store.len()], trainable }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = store.get(id).clone();
        let v = if self.trainable { tape.param(value) } else { tape.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter; unbound or unreached ones are zero.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Mat> {
        store
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                self.vars[i]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Mat::zeros(e.value.rows(), e.value.cols()))
            })
            .collect()
    }
}

/// A forward pass in progress: the tape plus the parameter binding.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub binder: Binder,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        let binder = Binder::new(store, trainable);
        Self { tape, store, binder }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.binder.bind(self.tape, self.store, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binding_is_idempotent_and_collects_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = store.add_random("a", ParamGroup::Head, 2, 2, 1.0, &mut rng);
        let b = store.add("b", ParamGroup::Head, Mat::scalar(3.0));
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, true);
        let va = f.p(a);
        assert_eq!(va, f.p(a));
        let s = f.tape.sum_all(va);
        let mut g = f.tape.backward(s);
        let grads = f.binder.collect(&store, &mut g);
        assert_eq!(grads[0], Mat::filled(2, 2, 1.0));
        assert_eq!(grads[1], Mat::zeros(1, 1));
        assert_eq!(store.find("b"), Some(b));
    }
}

//! The full decision model: backbone, expansion, selection and regularizer
//! terms for one navigation step, plus checkpoint IO.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::error::{Result, SdbError};
use crate::expansion::{expand, noise_expand, Fusion, HypothesisBank, Hsg};
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::regularizer::{components, Components, Lambdas};
use crate::selection::{cosine_rows, rho, ControllerState, Scorer, MIN_NORM};
use crate::tape::Var;
use crate::tensor::{dot, entropy, sigmoid, softmax, softplus, softplus_inverse, Mat};
use crate::types::{DemMode, ModelConfig, SsmMode, Tokens};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters that exist only when the operator is enabled.
#[derive(Debug, Clone, Copy)]
pub struct OperatorParts {
    pub hsg: Hsg,
    pub scorer: Scorer,
    pub theta_rho: ParamId,
    pub theta_m: ParamId,
    pub theta_omega: ParamId,
}

/// Non-trainable running statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub shift_norm_sum: f64,
    pub shift_norm_count: u64,
}

impl Buffers {
    pub fn mean_shift_norm(&self) -> Option<f64> {
        (self.shift_norm_count > 0).then(|| self.shift_norm_sum / self.shift_norm_count as f64)
    }

    pub fn record(&mut self, norm: f64) {
        self.shift_norm_sum += norm;
        self.shift_norm_count += 1;
    }
}

/// Values that enter the graph as constants although they depend on parameters.
///
/// A recorded pass can be replayed so that finite differences see the same
/// constants as the analytic gradient.
#[derive(Debug, Clone, Default)]
pub struct Detached {
    values: Vec<Mat>,
    cursor: usize,
    replay: bool,
}

impl Detached {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Switch to replaying the recorded values from the start.
    pub fn into_replay(mut self) -> Self {
        self.cursor = 0;
        self.replay = true;
        self
    }

    pub fn pass(&mut self, fresh: Mat) -> Mat {
        if self.replay {
            let v = self.values[self.cursor].clone();
            self.cursor += 1;
            v
        } else {
            self.values.push(fresh.clone());
            fresh
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Soft consolidation feeds the head; regularizer terms are produced.
    Train,
    /// One hypothesis is committed per step.
    Execute,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `1 × n` candidate logits.
    pub logits: Var,
    pub probabilities: Vec<f64>,
    pub components: Option<Components>,
    /// Reliability weights `w_t` (empty when the operator is bypassed).
    pub weights: Vec<f64>,
    pub ema_weights: Vec<f64>,
    /// Committed slot, if any.
    pub slot: Option<usize>,
    /// Mean HSG shift norm observed at this step.
    pub shift_norm: Option<f64>,
    pub gating: Vec<f64>,
    /// `K × 3` reliability cues (alignment, confidence, stability) after masking.
    pub cues: Mat,
}

#[derive(Debug, Clone)]
pub struct SdbModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub operator: Option<OperatorParts>,
    pub buffers: Buffers,
}

impl SdbModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_1417);
        let mut store = ParamStore::new();
        // shared parts first so that models differing only in the operator share them exactly
        let backbone = Backbone::new(&mut store, cfg, &mut rng);
        let fusion = Fusion::new(&mut store, cfg, &mut rng);
        let operator = cfg.sdb_enabled().then(|| {
            let hsg = Hsg::new(&mut store, cfg, &mut rng);
            let scorer = Scorer::new(&mut store, cfg, &mut rng);
            OperatorParts {
                hsg,
                scorer,
                theta_rho: store.add("theta_rho", ParamGroup::ThetaRho, Mat::scalar(0.0)),
                theta_m: store.add("theta_m", ParamGroup::ThetaM, Mat::scalar(softplus_inverse(0.1))),
                theta_omega: store.add("theta_omega", ParamGroup::ThetaOmega, Mat::scalar(softplus_inverse(0.1))),
            }
        });
        Ok(Self { cfg: cfg.clone(), store, backbone, fusion, operator, buffers: Buffers::default() })
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas { agr: self.cfg.lambda_agr, sm: self.cfg.lambda_sm, div: self.cfg.lambda_div }
    }

    fn scalar(&self, f: impl Fn(&OperatorParts) -> ParamId, map: fn(f64) -> f64) -> Option<f64> {
        self.operator.as_ref().map(|o| map(self.store.get(f(o)).item()))
    }

    pub fn gamma(&self) -> Option<f64> {
        self.scalar(|o| o.hsg.theta_gamma, sigmoid)
    }

    pub fn rho(&self) -> Option<f64> {
        self.operator.as_ref().map(|o| rho(&self.store, o.theta_rho))
    }

    pub fn margin(&self) -> Option<f64> {
        self.scalar(|o| o.theta_m, softplus)
    }

    pub fn omega(&self) -> Option<f64> {
        self.scalar(|o| o.theta_omega, softplus)
    }

    /// One decision at 1-based step `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        f: &mut Fwd,
        instruction: &Tokens,
        evidence_inputs: &Mat,
        t: usize,
        state: &mut ControllerState,
        phase: Phase,
        rng: &mut impl Rng,
        detached: &mut Detached,
    ) -> Result<StepOutput> {
        if t == 0 || t > self.cfg.max_episode_len {
            return Err(SdbError::Config(format!("step {t} outside 1..={}", self.cfg.max_episode_len)));
        }
        let evidence = self.backbone.encode_environment(f, evidence_inputs);
        let Some(op) = self.operator else {
            let ctx = self.fusion.forward(f, instruction, &evidence, None);
            let logits = self.backbone.action_logits(f, &ctx, &evidence)?;
            let probabilities = softmax(f.tape.value(logits).data());
            return Ok(StepOutput {
                logits,
                probabilities,
                components: None,
                weights: Vec::new(),
                ema_weights: Vec::new(),
                slot: None,
                shift_norm: None,
                gating: Vec::new(),
                cues: Mat::zeros(0, 3),
            });
        };

        let (bank, shift_norm) = self.expand_bank(f, &op, instruction, &evidence, t, rng, detached)?;
        let k = bank.len();
        let descriptors: Vec<Var> = bank.contexts.iter().map(|c| c.pool(f.tape)).collect::<Result<_>>()?;
        let d = f.tape.concat_rows(&descriptors);
        let dv = f.tape.value(d).clone();
        for i in 0..k {
            let n = dot(dv.row(i), dv.row(i)).sqrt();
            if n < MIN_NORM {
                return Err(SdbError::ZeroVector(n));
            }
        }

        // cues
        let drop = self.cfg.drop_cues;
        let zeros = || Mat::zeros(k, 1);
        let a = if drop.alignment { f.tape.constant(zeros()) } else { cosine_rows(f, d, descriptors[0]) };
        let c = if drop.confidence {
            f.tape.constant(zeros())
        } else {
            let ev = f.tape.value(evidence.values).clone();
            let conf: Vec<f64> = (0..k)
                .map(|i| -entropy(&self.backbone.probabilities_value(&self.store, dv.row(i), &ev)))
                .collect();
            let conf = detached.pass(Mat::from_vec(k, 1, conf));
            f.tape.constant(conf)
        };
        let s = if drop.stability {
            f.tape.constant(zeros())
        } else {
            let prev = state.prev_descriptor.clone().unwrap_or_else(|| dv.row(0).to_vec());
            let prev = detached.pass(Mat::row_vector(prev));
            if dot(prev.data(), prev.data()).sqrt() < MIN_NORM {
                return Err(SdbError::ZeroVector(prev.frobenius_norm()));
            }
            let prev = f.tape.constant(prev);
            cosine_rows(f, d, prev)
        };
        let cues = f.tape.concat_cols(&[a, c, s]);
        let cue_values = f.tape.value(cues).clone();
        let w = op.scorer.weights(f, cues);
        let weights = f.tape.value(w).data().to_vec();
        let rho = rho(&self.store, op.theta_rho);
        let gating = bank.gating.map(|g| f.tape.value(g).data().to_vec()).unwrap_or_default();

        match phase {
            Phase::Train => {
                // training is the same for both selection modes; they differ only when committing
                let acs = crate::selection::soft_consolidate_tape(f, &bank.contexts, w);
                let h_acs = acs.pool(f.tape)?;
                let logits = self.backbone.logits_from_pooled(f, h_acs, &evidence);
                let theta_m = f.p(op.theta_m);
                let comps = components(f, d, w, h_acs, theta_m);
                let k_star = state.update(&weights, rho, t)?;
                state.prev_descriptor = Some(f.tape.value(h_acs).data().to_vec());
                let probabilities = softmax(f.tape.value(logits).data());
                Ok(StepOutput {
                    logits,
                    probabilities,
                    components: Some(comps),
                    weights,
                    ema_weights: state.ema_weights.clone(),
                    slot: Some(k_star),
                    shift_norm,
                    gating,
                    cues: cue_values.clone(),
                })
            }
            Phase::Execute => {
                let k_star = state.update(&weights, rho, t)?;
                let chosen = match self.cfg.ssm_mode {
                    SsmMode::Stable => k_star,
                    SsmMode::Rand => rng.random_range(0..k),
                };
                state.prev_descriptor = Some(dv.row(chosen).to_vec());
                let logits = self.backbone.logits_from_pooled(f, descriptors[chosen], &evidence);
                let probabilities = softmax(f.tape.value(logits).data());
                Ok(StepOutput {
                    logits,
                    probabilities,
                    components: None,
                    weights,
                    ema_weights: state.ema_weights.clone(),
                    slot: Some(chosen),
                    shift_norm,
                    gating,
                    cues: cue_values.clone(),
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn expand_bank(
        &self,
        f: &mut Fwd,
        op: &OperatorParts,
        instruction: &Tokens,
        evidence: &Tokens,
        t: usize,
        rng: &mut impl Rng,
        detached: &mut Detached,
    ) -> Result<(HypothesisBank, Option<f64>)> {
        match self.cfg.dem_mode {
            DemMode::Hsg => {
                let bank = expand(&op.hsg, &self.fusion, f, instruction, evidence, t - 1)?;
                let norm = bank.mean_shift_norm;
                Ok((bank, norm))
            }
            DemMode::Noise => {
                // the HSG shift is still evaluated so its magnitude can be matched
                let s = op.hsg.state_summary(f, instruction, evidence, t - 1)?;
                let hyp = op.hsg.generate_hypotheses(f, instruction, evidence, s);
                let reference = self.buffers.mean_shift_norm().unwrap_or(hyp.mean_shift_norm);
                let scale = detached.pass(Mat::scalar(self.cfg.noise_sigma * reference)).item();
                let mut bank = noise_expand(&op.hsg, &self.fusion, f, instruction, evidence, scale, rng);
                bank.gating = Some(hyp.gating);
                Ok((bank, Some(hyp.mean_shift_norm)))
            }
        }
    }

    pub fn encode_instruction(&self, f: &mut Fwd, tokens: &[usize]) -> Result<Tokens> {
        self.backbone.encode_instruction(f, tokens, self.cfg.max_instruction_len)
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let body = CheckpointBody {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            buffers: self.buffers.clone(),
            tensors: self
                .store
                .entries()
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    data: e.value.data().to_vec(),
                })
                .collect(),
        };
        let checksum = body.checksum()?;
        Ok(serde_json::to_string(&CheckpointFile { body, checksum })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        let computed = file.body.checksum()?;
        if computed != file.checksum {
            return Err(SdbError::ChecksumMismatch { stored: file.checksum, computed });
        }
        let body = file.body;
        if body.version != CHECKPOINT_VERSION {
            return Err(SdbError::Config(format!("unsupported checkpoint version {}", body.version)));
        }
        let mut model = Self::new(&body.config)?;
        if body.tensors.len() != model.store.len() {
            return Err(SdbError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                body.tensors.len(),
                model.store.len()
            )));
        }
        for rec in body.tensors {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| SdbError::Config(format!("unknown tensor `{}`", rec.name)))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
                return Err(SdbError::Config(format!("tensor `{}` has the wrong shape", rec.name)));
            }
            *slot = Mat::from_vec(rec.rows, rec.cols, rec.data);
        }
        model.buffers = body.buffers;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointBody {
    version: u32,
    config: ModelConfig,
    buffers: Buffers,
    tensors: Vec<TensorRecord>,
}

impl CheckpointBody {
    fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(flatten)]
    body: CheckpointBody,
    checksum: String,
}

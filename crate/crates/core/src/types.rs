//! Shared value types, model configuration and masked pooling.
//!
//! Masks use `true` for a valid token everywhere in the crate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdbError};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::{flat_config, string_config_value};

/// Token embeddings `[num_tokens × H]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub values: Mat,
    pub mask: Vec<bool>,
}

impl TokenMatrix {
    pub fn new(values: Mat, mask: Vec<bool>) -> Self {
        assert_eq!(values.rows(), mask.len(), "mask length must equal the token count");
        Self { values, mask }
    }

    /// All tokens valid.
    pub fn dense(values: Mat) -> Self {
        let n = values.rows();
        Self::new(values, vec![true; n])
    }

    pub fn num_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One decision step's encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionContext {
    pub instruction: TokenMatrix,
    pub evidence: TokenMatrix,
    pub step: usize,
}

/// A probability vector over the candidate set; STOP is always the last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(SdbError::Config("action distribution must cover at least STOP".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(SdbError::NonFinite("action distribution"));
        }
        Ok(Self { probabilities })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(crate::tensor::softmax(logits))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        crate::tensor::entropy(&self.probabilities)
    }

    /// Index of the most probable action, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.probabilities)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// How the 1→K stage produces its shifted hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemMode {
    /// Evidence-conditioned low-rank shifts.
    Hsg,
    /// Norm-matched Gaussian shifts.
    Noise,
}

/// How the K→1 stage picks a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SsmMode {
    /// Reliability weights (soft for training, EMA argmax for execution).
    Stable,
    /// Uniformly random slot.
    Rand,
}

impl fmt::Display for DemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DemMode::Hsg => "hsg",
            DemMode::Noise => "noise",
        })
    }
}

impl FromStr for DemMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "hsg" => Ok(DemMode::Hsg),
            "noise" => Ok(DemMode::Noise),
            _ => Err(format!("unknown expansion mode `{s}` (expected hsg or noise)")),
        }
    }
}

impl fmt::Display for SsmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsmMode::Stable => "stable",
            SsmMode::Rand => "rand",
        })
    }
}

impl FromStr for SsmMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "stable" => Ok(SsmMode::Stable),
            "rand" | "random" => Ok(SsmMode::Rand),
            _ => Err(format!("unknown selection mode `{s}` (expected stable or rand)")),
        }
    }
}

/// Subset of the reliability cues {A, C, S} that are zeroed before scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueMask {
    pub alignment: bool,
    pub confidence: bool,
    pub stability: bool,
}

impl CueMask {
    pub fn is_empty(&self) -> bool {
        !(self.alignment || self.confidence || self.stability)
    }
}

impl fmt::Display for CueMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.alignment {
            f.write_str("A")?;
        }
        if self.confidence {
            f.write_str("C")?;
        }
        if self.stability {
            f.write_str("S")?;
        }
        Ok(())
    }
}

impl FromStr for CueMask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut m = CueMask::default();
        for c in s.chars().filter(|c| !matches!(c, ',' | ' ' | '{' | '}')) {
            match c.to_ascii_uppercase() {
                'A' => m.alignment = true,
                'C' => m.confidence = true,
                'S' => m.stability = true,
                _ => return Err(format!("unknown cue `{c}` (expected A, C or S)")),
            }
        }
        Ok(m)
    }
}

string_config_value!(DemMode);
string_config_value!(SsmMode);
string_config_value!(CueMask);

flat_config! {
    /// Shapes, loss weights and operator variant of one model instance.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ModelConfig {
        /// hypothesis count including the anchor; 0 bypasses the expand/select operator entirely
        k: usize = 3; "hypotheses",
        /// width of the low-rank shift subspace (1 <= rank <= hidden_dim)
        rank: usize = 4; "dimensions",
        /// hidden width H of every token embedding
        hidden_dim: usize = 16; "dimensions",
        /// maximum instruction length L
        max_instruction_len: usize = 12; "tokens",
        /// maximum episode length T
        max_episode_len: usize = 15; "steps",
        /// success threshold on the stop-to-goal graph distance
        success_threshold: f64 = 0.0; "edge-length units",
        /// weight of the agreement loss
        lambda_agr: f64 = 0.1; "dimensionless",
        /// weight of the slot-smoothness loss
        lambda_sm: f64 = 0.01; "dimensionless",
        /// weight of the diversity-floor loss
        lambda_div: f64 = 0.01; "dimensionless",
        /// seed for parameter initialisation and all derived random streams
        seed: u64 = 0; "seed",
        /// width of the node feature vectors supplied by the environment
        env_dim: usize = 16; "dimensions",
        /// token vocabulary size (landmarks followed by distractors)
        vocab_size: usize = 80; "tokens",
        /// hidden width of the reliability scorer
        scorer_hidden: usize = 8; "units",
        /// hidden width of the state-summary and fusion feed-forward layers
        ffn_hidden: usize = 32; "units",
        /// standard deviation of the Gaussian weight initialisation, scaled by 1/sqrt(fan_in)
        init_gain: f64 = 1.0; "dimensionless",
        /// hypothesis expansion mode (hsg or noise)
        dem_mode: DemMode = DemMode::Hsg; "enum",
        /// hypothesis selection mode (stable or rand)
        ssm_mode: SsmMode = SsmMode::Stable; "enum",
        /// reliability cues zeroed before scoring, any of A, C, S
        drop_cues: CueMask = CueMask::default(); "cue set",
        /// noise expansion magnitude relative to the recorded mean shift norm
        noise_sigma: f64 = 1.0; "multiple of mean shift norm",
    }
}

impl ModelConfig {
    /// Whether the expand/select operator is active.
    pub fn sdb_enabled(&self) -> bool {
        self.k >= 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SdbError::Config(m.to_owned()));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if self.rank == 0 || self.rank > self.hidden_dim {
            return bad("rank must satisfy 1 <= rank <= hidden_dim");
        }
        if self.max_instruction_len == 0 || self.max_episode_len == 0 {
            return bad("max_instruction_len and max_episode_len must be positive");
        }
        if [self.lambda_agr, self.lambda_sm, self.lambda_div].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.success_threshold >= 0.0) {
            return bad("success_threshold must be non-negative");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if self.env_dim == 0 || self.vocab_size == 0 || self.scorer_hidden == 0 || self.ffn_hidden == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Small dimensions used by gradient checks.
    pub fn toy() -> Self {
        Self {
            k: 3,
            rank: 2,
            hidden_dim: 8,
            max_instruction_len: 4,
            env_dim: 6,
            vocab_size: 12,
            scorer_hidden: 4,
            ffn_hidden: 8,
            ..Self::default()
        }
    }
}

/// Row weights of the masked mean: `1/n` on valid rows, 0 elsewhere.
pub fn pool_weights(mask: &[bool]) -> Result<Mat> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(SdbError::AllMasked);
    }
    let w = 1.0 / n as f64;
    Ok(Mat::row_vector(mask.iter().map(|&m| if m { w } else { 0.0 }).collect()))
}

/// Arithmetic mean of the valid rows.
pub fn masked_pool(tokens: &TokenMatrix) -> Result<Vec<f64>> {
    Ok(pool_weights(&tokens.mask)?.matmul(&tokens.values).into_vec())
}

/// Token matrix living on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Tokens {
    pub values: Var,
    pub mask: Vec<bool>,
}

impl Tokens {
    pub fn constant(tape: &mut Tape, m: &TokenMatrix) -> Self {
        Self { values: tape.constant(m.values.clone()), mask: m.mask.clone() }
    }

    pub fn to_matrix(&self, tape: &Tape) -> TokenMatrix {
        TokenMatrix::new(tape.value(self.values).clone(), self.mask.clone())
    }

    /// Masked mean pooling as a `1 × H` node.
    pub fn pool(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.constant(pool_weights(&self.mask)?);
        Ok(tape.matmul(w, self.values))
    }

    /// Column of 1.0 / 0.0 marking valid rows, for zeroing masked outputs.
    pub fn mask_column(&self, tape: &mut Tape) -> Var {
        let col = Mat::from_vec(self.mask.len(), 1, self.mask.iter().map(|&m| f64::from(u8::from(m))).collect());
        tape.constant(col)
    }
}

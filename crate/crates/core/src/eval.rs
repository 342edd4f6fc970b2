//! Greedy evaluation rollouts, per-episode JSONL records and plan strings.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::evidence_inputs;
use crate::error::Result;
use crate::model::{Detached, Phase, SdbModel};
use crate::params::Fwd;
use crate::selection::ControllerState;
use crate::tape::Tape;
use crate::types::argmax_lowest;
use crate::world::{compute_metrics, derived_rng, episode_metrics, Action, CandidateSet, Episode, EpisodeMetrics, MetricsTable, NavGraph};

pub const EPISODE_SCHEMA: u32 = 1;

/// One line of the evaluation JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema: u32,
    pub graph_seed: u64,
    pub start: usize,
    pub goal: usize,
    pub instruction: Vec<usize>,
    pub trajectory: Vec<usize>,
    pub stopped: bool,
    /// Committed hypothesis slot per step (`null` when the operator is bypassed).
    pub k_star: Vec<Option<usize>>,
    pub w: Vec<Vec<f64>>,
    pub w_bar: Vec<Vec<f64>>,
    pub plans: Vec<String>,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricsTable,
    pub episodes: Vec<Episode>,
    pub records: Vec<EpisodeRecord>,
}

fn describe(graph: &NavGraph, a: Action) -> String {
    match a {
        Action::Move(n) => format!("goto lm{}", graph.landmarks[n]),
        Action::Stop => "stop".to_owned(),
    }
}

/// `"<chosen> alt <runner-up>"`, or just the chosen action with a single candidate.
pub fn plan_string(graph: &NavGraph, candidates: &CandidateSet, probs: &[f64], chosen: usize) -> String {
    let chosen_text = describe(graph, candidates.actions()[chosen]);
    let alt = (0..probs.len())
        .filter(|&i| i != chosen)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if probs[b] >= probs[i] => Some(b),
            _ => Some(i),
        });
    match alt {
        Some(i) => format!("{chosen_text} alt {}", describe(graph, candidates.actions()[i])),
        None => chosen_text,
    }
}

/// Greedy rollout committing one hypothesis per step.
pub fn rollout(model: &SdbModel, episode: &mut Episode, index: u64) -> Result<EpisodeRecord> {
    episode.reset();
    let mut rng = derived_rng(model.cfg.seed, &[0xe7a1, index]);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &model.store, false);
    let instruction = model.encode_instruction(&mut f, &episode.instruction)?;
    let mut state = ControllerState::new();
    let (mut k_star, mut w, mut w_bar, mut plans) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut detached = Detached::recording();
    for t in 1..=model.cfg.max_episode_len {
        let current = episode.current();
        let candidates = episode.graph.candidate_actions(current);
        let inputs = evidence_inputs(&episode.graph, current, &candidates, &episode.history_summary());
        let out = model.step(&mut f, &instruction, &inputs, t, &mut state, Phase::Execute, &mut rng, &mut detached)?;
        let choice = argmax_lowest(&out.probabilities);
        plans.push(plan_string(&episode.graph, &candidates, &out.probabilities, choice));
        k_star.push(out.slot);
        w.push(out.weights);
        w_bar.push(out.ema_weights);
        let action = candidates.actions()[choice];
        episode.apply(action);
        if action == Action::Stop {
            break;
        }
    }
    Ok(EpisodeRecord {
        schema: EPISODE_SCHEMA,
        graph_seed: episode.graph.seed,
        start: episode.graph.start,
        goal: episode.graph.goal,
        instruction: episode.instruction.clone(),
        trajectory: episode.trajectory.clone(),
        stopped: episode.stopped,
        k_star,
        w,
        w_bar,
        plans,
        metrics: episode_metrics(episode, model.cfg.success_threshold),
    })
}

/// Evaluate on a fixed episode set; the model is only read.
pub fn evaluate(model: &SdbModel, episodes: &[Episode]) -> Result<EvalReport> {
    let mut eps = episodes.to_vec();
    let records = eps
        .iter_mut()
        .enumerate()
        .map(|(i, ep)| rollout(model, ep, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let metrics = compute_metrics(&eps, model.cfg.success_threshold)?;
    Ok(EvalReport { metrics, episodes: eps, records })
}

pub fn write_jsonl(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

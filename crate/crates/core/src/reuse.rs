//! When to reuse the cached block-external partial and when to recompute it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::AttnPartial;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{cosine_similarity, Scalar};
use crate::sim::{self, AttnCall, RunConfig, StepObserver, SyntheticModel, TokenId};

pub const DEFAULT_TAU: usize = 2;
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReuseMode {
    /// Reuse while fewer than `tau` block tokens changed since the previous step.
    TokenThreshold,
    /// Token threshold plus the per-head similarity gate.
    HeadGated,
    /// Dense baseline.
    AlwaysRecompute,
    /// Reuse whenever a cache entry exists, regardless of token updates.
    AlwaysReuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseConfig {
    tau: usize,
    gamma: f64,
    mode: ReuseMode,
}

impl Default for ReuseConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            gamma: DEFAULT_GAMMA,
            mode: ReuseMode::TokenThreshold,
        }
    }
}

impl ReuseConfig {
    pub fn new(tau: usize, gamma: f64, mode: ReuseMode) -> Result<Self> {
        if tau < 1 {
            return Err(Error::Config(format!("tau must be at least 1, got {tau}")));
        }
        check_gamma(gamma)?;
        Ok(Self { tau, gamma, mode })
    }

    pub fn token_threshold(tau: usize) -> Result<Self> {
        Self::new(tau, DEFAULT_GAMMA, ReuseMode::TokenThreshold)
    }

    pub fn always_recompute() -> Self {
        Self {
            mode: ReuseMode::AlwaysRecompute,
            ..Self::default()
        }
    }

    pub fn always_reuse() -> Self {
        Self {
            mode: ReuseMode::AlwaysReuse,
            ..Self::default()
        }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mode(&self) -> ReuseMode {
        self.mode
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reuse,
    Recompute,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Reuse => "reuse",
            Decision::Recompute => "recompute",
        })
    }
}

/// Reuse or recompute for one (layer, head) at one step. Pure.
///
/// A missing or invalid cache always forces a recompute, including under
/// [`ReuseMode::AlwaysReuse`]: there is nothing to reuse yet.
pub fn decide(
    config: &ReuseConfig,
    cache_valid: bool,
    first_visit: bool,
    updated_tokens: usize,
    head_gate: bool,
) -> Decision {
    match config.mode {
        ReuseMode::AlwaysRecompute => Decision::Recompute,
        _ if first_visit || !cache_valid => Decision::Recompute,
        ReuseMode::AlwaysReuse => Decision::Reuse,
        ReuseMode::TokenThreshold if updated_tokens >= config.tau => Decision::Recompute,
        ReuseMode::HeadGated if updated_tokens >= config.tau || !head_gate => Decision::Recompute,
        ReuseMode::TokenThreshold | ReuseMode::HeadGated => Decision::Reuse,
    }
}

/// Number of positions whose token id differs between two steps of the same block.
pub fn count_updated_tokens(prev: &[TokenId], curr: &[TokenId]) -> Result<usize> {
    if prev.len() != curr.len() {
        return Err(shape_err!(
            "token vectors of lengths {} and {}",
            prev.len(),
            curr.len()
        ));
    }
    Ok(prev.iter().zip(curr).filter(|(a, b)| a != b).count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGate {
    pub layer: usize,
    pub head: usize,
    /// Mean adjacent-step cosine similarity of the external partial.
    pub similarity: f64,
    /// Worst adjacent-step pair, kept as an alternative gating metric.
    pub min_similarity: f64,
    pub enabled: bool,
}

/// Per-(layer, head) reuse switches calibrated offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGateTable {
    pub gamma: f64,
    pub heads: Vec<HeadGate>,
}

impl HeadGateTable {
    /// Builds the table from `(layer, head, mean, min)` similarities; a head is enabled
    /// when its mean similarity exceeds `gamma`.
    pub fn from_similarities(
        gamma: f64,
        entries: impl IntoIterator<Item = (usize, usize, f64, f64)>,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        let heads = entries
            .into_iter()
            .map(|(layer, head, similarity, min_similarity)| HeadGate {
                layer,
                head,
                similarity,
                min_similarity,
                enabled: similarity > gamma,
            })
            .collect();
        Ok(Self { gamma, heads })
    }

    /// Heads missing from the table are treated as disabled.
    pub fn is_enabled(&self, layer: usize, head: usize) -> bool {
        self.heads
            .iter()
            .find(|g| g.layer == layer && g.head == head)
            .is_some_and(|g| g.enabled)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        check_gamma(table.gamma)?;
        if let Some(g) = table
            .heads
            .iter()
            .find(|g| g.enabled != (g.similarity > table.gamma))
        {
            return Err(Error::Config(format!(
                "head ({}, {}) has enabled={} but similarity {} against gamma {}",
                g.layer, g.head, g.enabled, g.similarity, table.gamma
            )));
        }
        Ok(table)
    }
}

/// Collects the external partial of every (layer, head) at every step of a rollout.
struct ExternalRecorder<T> {
    num_heads: usize,
    // per (layer, head): previous step's external partial, then per-pair similarities
    previous: Vec<Option<(usize, usize, AttnPartial<T>)>>,
    pair_means: Vec<Vec<f64>>,
    nonzero_rows: usize,
}

impl<T: Scalar> StepObserver<T> for ExternalRecorder<T> {
    fn on_attention(&mut self, call: &AttnCall<'_, T>) -> Result<()> {
        let Some(external) = call.external else {
            return Ok(());
        };
        let slot = call.layer * self.num_heads + call.head;
        let out = external.out();
        self.nonzero_rows += (0..out.rows())
            .filter(|&i| out.row(i).iter().any(|x| x.to_f64().abs() > 1e-12))
            .count();
        if let Some((block, step, prev)) = &self.previous[slot] {
            if *block == call.block_id && *step + 1 == call.step {
                let mut total = 0.0;
                for i in 0..out.rows() {
                    total += cosine_similarity(prev.out().row(i), out.row(i))?;
                }
                self.pair_means[slot].push(total / out.rows().max(1) as f64);
            }
        }
        self.previous[slot] = Some((call.block_id, call.step, external.clone()));
        Ok(())
    }
}

/// Estimates per-head cross-step stability of the external partial from `samples`
/// always-recompute rollouts (seeds `run.seed .. run.seed + samples`) and thresholds it
/// at `gamma`.
pub fn calibrate_head_gates<T: Scalar>(
    model: &SyntheticModel<T>,
    run: &RunConfig,
    samples: usize,
    gamma: f64,
) -> Result<HeadGateTable> {
    check_gamma(gamma)?;
    if samples == 0 {
        return Err(Error::Config(
            "calibration needs at least one sample".into(),
        ));
    }
    let (layers, heads) = (model.config().num_layers, model.config().num_heads);
    let mut recorder = ExternalRecorder {
        num_heads: heads,
        previous: vec![None; layers * heads],
        pair_means: vec![Vec::new(); layers * heads],
        nonzero_rows: 0,
    };
    let policy = ReuseConfig::always_recompute();
    for s in 0..samples as u64 {
        let cfg = RunConfig {
            seed: run.seed + s,
            verify: false,
            ..run.clone()
        };
        recorder.previous.iter_mut().for_each(|p| *p = None);
        sim::run_sequence(model, &cfg, &policy, None, &mut recorder)?;
    }
    if recorder.nonzero_rows == 0 {
        return Err(Error::Calibration(
            "every recorded external attention output is zero".into(),
        ));
    }
    if recorder.pair_means.iter().all(Vec::is_empty) {
        return Err(Error::Calibration(
            "rollouts produced no adjacent step pairs; use at least two steps per block".into(),
        ));
    }
    let entries = (0..layers)
        .flat_map(|l| (0..heads).map(move |h| (l, h)))
        .map(|(l, h)| {
            let pairs = &recorder.pair_means[l * heads + h];
            let mean = if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().sum::<f64>() / pairs.len() as f64
            };
            let min = pairs.iter().copied().fold(f64::INFINITY, f64::min);
            (l, h, mean, if min.is_finite() { min } else { 0.0 })
        });
    HeadGateTable::from_similarities(gamma, entries)
}

//! Context-length sweeps over counted attention work, plus the small statistics used
//! to read them.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::reuse::ReuseConfig;
use crate::sim::{
    prompt_ids, RunConfig, Sequence, StepDecision, StepObserver, StepTrace, SyntheticModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepPolicy {
    Reuse,
    Dense,
}

impl fmt::Display for SweepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepPolicy::Reuse => "reuse",
            SweepPolicy::Dense => "dense",
        })
    }
}

impl std::str::FromStr for SweepPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse" => Ok(SweepPolicy::Reuse),
            "dense" => Ok(SweepPolicy::Dense),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub context: usize,
    pub tau: usize,
    pub policy: SweepPolicy,
    pub step: usize,
    pub decision: StepDecision,
    pub keys_attended: u64,
    pub kv_rows_read: u64,
    pub wall_ns: u64,
}

pub const SWEEP_CSV_HEADER: &str = "context,tau,policy,step,keys_attended,kv_rows_read,wall_ns";

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.context, r.tau, r.policy, r.step, r.keys_attended, r.kv_rows_read, r.wall_ns
        ));
    }
    s
}

struct StepClock {
    last: Instant,
    wall_ns: Vec<u64>,
}

impl<T> StepObserver<T> for StepClock {
    fn on_step(&mut self, _trace: &StepTrace) {
        let now = Instant::now();
        self.wall_ns
            .push(now.duration_since(self.last).as_nanos() as u64);
        self.last = now;
    }
}

/// For every context length, prefills a prompt of that length once, then denoises one
/// block under each (tau, policy). Rows come out ordered by context, tau, policy, step.
/// The dense policy ignores tau and recomputes every step.
pub fn sweep_context<T: Scalar>(
    model: &SyntheticModel<T>,
    run: &RunConfig,
    contexts: &[usize],
    taus: &[usize],
    policies: &[SweepPolicy],
) -> Result<Vec<SweepRow>> {
    if contexts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "contexts must be strictly increasing, got {contexts:?}"
        )));
    }
    let mut policies = policies.to_vec();
    policies.sort();
    policies.dedup();
    let mut rows = Vec::new();
    for &context in contexts {
        let cfg = RunConfig {
            prompt_len: context,
            num_blocks: 1,
            verify: false,
            ..run.clone()
        };
        let prompt = prompt_ids(model.config(), &cfg);
        let base = Sequence::prefill(model, &prompt, &cfg)?;
        for &tau in taus {
            for &policy in &policies {
                let reuse = match policy {
                    SweepPolicy::Reuse => ReuseConfig::token_threshold(tau)?,
                    SweepPolicy::Dense => ReuseConfig::always_recompute(),
                };
                let mut seq = base.clone();
                let mut clock = StepClock {
                    last: Instant::now(),
                    wall_ns: Vec::new(),
                };
                let traces = seq.generate_block(&reuse, None, &cfg, &mut clock)?;
                for (t, wall_ns) in traces.iter().zip(clock.wall_ns) {
                    rows.push(SweepRow {
                        context,
                        tau,
                        policy,
                        step: t.step,
                        decision: t.decision,
                        keys_attended: t.keys_attended,
                        kv_rows_read: t.kv_rows_read,
                        wall_ns,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Sum of per-step `kv_rows_read` for each context under one (tau, policy).
pub fn total_work(rows: &[SweepRow], tau: usize, policy: SweepPolicy) -> BTreeMap<usize, u64> {
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.tau == tau && r.policy == policy) {
        *out.entry(r.context).or_insert(0) += r.kv_rows_read;
    }
    out
}

/// Work at the largest context over work at the smallest.
pub fn growth_ratio(work: &BTreeMap<usize, u64>) -> Option<f64> {
    let (_, &lo) = work.first_key_value()?;
    let (_, &hi) = work.last_key_value()?;
    (lo > 0).then(|| hi as f64 / lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!(
            "fit needs two or more paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

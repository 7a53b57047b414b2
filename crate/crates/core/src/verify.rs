//! Randomized invariant suite: every cached path is checked against the dense oracle.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{
    attention_dense, attention_partial, attention_streamed, default_scale, merge_partials,
    StreamConfig,
};
use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, KvView};
use crate::linalg::Tensor2D;
use crate::reuse::ReuseConfig;
use crate::sim::{
    run_sequence, AttentionRoute, ModelConfig, RunConfig, StepDecision, SyntheticModel,
};

pub const EXACT_TOL_F64: f64 = 1e-10;
pub const EXACT_TOL_F32: f64 = 1e-3;
pub const SHIFT_TOL_F32: f64 = 1e-6;
pub const BASELINE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub tau: usize,
    pub trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 2,
            heads: 2,
            dim: 16,
            blocks: 2,
            block_size: 8,
            tau: 2,
            trials: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: Option<f64>,
    pub note: String,
}

impl std::fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name
        )?;
        if let Some(e) = self.max_error {
            write!(f, " max_error={e:.3e}")?;
        }
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

fn normal(rows: usize, cols: usize, sd: f64, rng: &mut impl Rng) -> Tensor2D<f64> {
    Tensor2D::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

fn log_uniform(lo: usize, hi: usize, rng: &mut impl Rng) -> usize {
    let x = rng.gen_range((lo as f64).ln()..=(hi as f64).ln()).exp();
    (x.round() as usize).clamp(lo, hi)
}

/// Max errors `(f64, f32)` of the streamed split merged back, against the dense oracle,
/// for queries `q` over a KV view at `boundary`.
pub fn decomposition_error(
    q: &Tensor2D<f64>,
    view: &KvView<'_, f64>,
    boundary: usize,
    tile_size: usize,
) -> Result<(f64, f64)> {
    let scale = default_scale(q.cols());
    let cfg = StreamConfig { tile_size };
    let (k, v) = view.to_tensors();
    let oracle = attention_dense(q, &k, &v, scale)?;

    let (ext, int) = attention_streamed(q, view, scale, boundary, cfg)?;
    let e64 = merge_partials(&ext, &int)?.max_abs_diff(&oracle)?;

    let (q32, k32, v32) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
    let view32 = KvView::from_tensors(&k32, &v32)?;
    let (ext, int) = attention_streamed(&q32, &view32, scale, boundary, cfg)?;
    let e32 = merge_partials(&ext, &int)?.max_abs_diff(&oracle)?;
    Ok((e64, e32))
}

fn decomposition(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let (mut max64, mut max32) = (0.0f64, 0.0f64);
    let heads = cfg.layers * cfg.heads;
    for _ in 0..cfg.trials {
        let n = log_uniform(8, 512, rng);
        let b = rng.gen_range(1..=cfg.block_size.max(1));
        let mut cache = KvCache::new(cfg.layers, cfg.heads, cfg.dim);
        let mut blocks = Vec::with_capacity(heads);
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let sd = rng.gen_range(0.5..3.0);
                cache.commit_block(
                    l,
                    h,
                    &normal(n, cfg.dim, sd, rng),
                    &normal(n, cfg.dim, 1.0, rng),
                )?;
                blocks.push((normal(b, cfg.dim, sd, rng), normal(b, cfg.dim, 1.0, rng)));
            }
        }
        let slot = rng.gen_range(0..heads);
        let (bk, bv) = &blocks[slot];
        let view = cache.view_uncounted(slot / cfg.heads, slot % cfg.heads, Some((bk, bv)))?;
        let q = normal(b, cfg.dim, 1.0, rng);
        let boundary = rng.gen_range(0..=n + b);
        let tile = [1, 7, 16, 64][rng.gen_range(0..4)];
        let (e64, e32) = decomposition_error(&q, &view, boundary, tile)?;
        max64 = max64.max(e64);
        max32 = max32.max(e32);
    }
    Ok(PropertyReport {
        name: "decomposition_exactness",
        passed: max64 < EXACT_TOL_F64 && max32 < EXACT_TOL_F32,
        max_error: Some(max64),
        note: format!("{} trials, f32 max_error={max32:.3e}", cfg.trials),
    })
}

/// Max disagreement between the two association orders of a three-way key split, and
/// between either order and the dense oracle.
pub fn associativity_error(
    q: &Tensor2D<f64>,
    k: &Tensor2D<f64>,
    v: &Tensor2D<f64>,
    cuts: (usize, usize),
) -> Result<f64> {
    let scale = default_scale(q.cols());
    let cfg = StreamConfig::default();
    let view = KvView::from_tensors(k, v)?;
    let ranges: [Range<usize>; 3] = [0..cuts.0, cuts.0..cuts.1, cuts.1..k.rows()];
    let [a, b, c] = ranges.map(|r| attention_partial(q, &view, r, scale, cfg));
    let (a, b, c) = (a?, b?, c?);
    let left = a.combine(&b)?.combine(&c)?.into_out();
    let right = a.combine(&b.combine(&c)?)?.into_out();
    let oracle = attention_dense(q, k, v, scale)?;
    Ok(left
        .max_abs_diff(&right)?
        .max(left.max_abs_diff(&oracle)?)
        .max(right.max_abs_diff(&oracle)?))
}

fn associativity(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials {
        let n = log_uniform(3, 512, rng);
        let q = normal(rng.gen_range(1..=8), cfg.dim, 1.0, rng);
        let k = normal(n, cfg.dim, rng.gen_range(0.5..3.0), rng);
        let v = normal(n, cfg.dim, 1.0, rng);
        let c0 = rng.gen_range(1..n - 1);
        let c1 = rng.gen_range(c0 + 1..n);
        worst = worst.max(associativity_error(&q, &k, &v, (c0, c1))?);
    }
    Ok(PropertyReport {
        name: "merge_associativity",
        passed: worst < EXACT_TOL_F64,
        max_error: Some(worst),
        note: format!("{} three-way splits", cfg.trials),
    })
}

/// Change in the `f32` output when every score is raised by `shift`, realized through
/// one extra key dimension. Inputs on a dyadic grid keep the shifted scores exact, so
/// any change comes from the kernel itself.
pub fn shift_change_f32(
    rows: usize,
    keys: usize,
    dim: usize,
    shift: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let grid = |rng: &mut dyn rand::RngCore| f64::from(rng.gen_range(-8i32..=8)) / 8.0;
    let scale = 0.25;
    let q = Tensor2D::from_fn(rows, dim + 1, |_, c| if c == dim { 0.0 } else { grid(rng) });
    let k = Tensor2D::from_fn(keys, dim + 1, |_, c| if c == dim { 1.0 } else { grid(rng) });
    let v = normal(keys, dim + 1, 1.0, rng).cast::<f32>();
    let mut q_shift = q.clone();
    for i in 0..rows {
        q_shift.set(i, dim, shift / scale);
    }
    let (q, q_shift, k) = (q.cast::<f32>(), q_shift.cast::<f32>(), k.cast::<f32>());
    let view = KvView::from_tensors(&k, &v)?;
    let cfg = StreamConfig::default();
    let base = attention_partial(&q, &view, 0..keys, scale, cfg)?;
    let shifted = attention_partial(&q_shift, &view, 0..keys, scale, cfg)?;
    if shifted.out().data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("shifted scores overflowed".into()));
    }
    base.out().max_abs_diff(shifted.out())
}

fn shift_stability(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials.clamp(1, 50) {
        let keys = log_uniform(8, 512, rng);
        worst = worst.max(shift_change_f32(
            rng.gen_range(1..=8),
            keys,
            cfg.dim,
            80.0,
            rng,
        )?);
    }
    Ok(PropertyReport {
        name: "shift_stability",
        passed: worst < SHIFT_TOL_F32,
        max_error: Some(worst),
        note: "scores +80 in f32".into(),
    })
}

fn model_and_run(cfg: &VerifyConfig) -> Result<(SyntheticModel<f64>, RunConfig)> {
    let model = SyntheticModel::new(ModelConfig {
        num_layers: cfg.layers,
        num_heads: cfg.heads,
        head_dim: cfg.dim,
        seed: cfg.seed,
        ..ModelConfig::default()
    })?;
    let run = RunConfig {
        prompt_len: 4 * cfg.block_size,
        num_blocks: cfg.blocks,
        block_size: cfg.block_size,
        steps_per_block: cfg.block_size,
        seed: cfg.seed,
        ..RunConfig::default()
    };
    Ok((model, run))
}

fn no_kv_touch(cfg: &VerifyConfig) -> Result<PropertyReport> {
    let (model, run) = model_and_run(cfg)?;
    let traces = run_sequence(
        &model,
        &run,
        &ReuseConfig::token_threshold(cfg.tau)?,
        None,
        &mut (),
    )?
    .traces;
    let reuse: Vec<_> = traces
        .iter()
        .filter(|t| t.decision == StepDecision::Reuse)
        .collect();
    let bad = reuse
        .iter()
        .filter(|t| t.access.committed_rows_read != 0 || t.keys_attended != cfg.block_size as u64)
        .count();
    let note = if traces.is_empty() {
        "empty trace".to_string()
    } else {
        format!("{} reuse steps of {}", reuse.len(), traces.len())
    };
    Ok(PropertyReport {
        name: "no_kv_touch_on_reuse",
        passed: bad == 0,
        max_error: None,
        note,
    })
}

fn baseline_equivalence(cfg: &VerifyConfig) -> Result<PropertyReport> {
    let (model, run) = model_and_run(cfg)?;
    if cfg.blocks == 0 {
        return Ok(PropertyReport {
            name: "baseline_equivalence",
            passed: true,
            max_error: None,
            note: "empty trace".into(),
        });
    }
    let dense = RunConfig {
        route: AttentionRoute::DenseReference,
        ..run.clone()
    };
    let reference = run_sequence(
        &model,
        &dense,
        &ReuseConfig::always_recompute(),
        None,
        &mut (),
    )?;
    let checked = RunConfig {
        verify: true,
        ..run
    };
    let recompute = run_sequence(
        &model,
        &checked,
        &ReuseConfig::always_recompute(),
        None,
        &mut (),
    )?;
    let policy = run_sequence(
        &model,
        &checked,
        &ReuseConfig::token_threshold(cfg.tau)?,
        None,
        &mut (),
    )?;

    let mut worst = 0.0f64;
    let full_recompute = recompute.traces.iter().chain(
        policy
            .traces
            .iter()
            .filter(|t| t.decision != StepDecision::Reuse && t.heads_reused == 0),
    );
    for t in full_recompute {
        worst = worst.max(t.linf_gap_vs_dense.unwrap_or(f64::INFINITY));
    }
    let mut passed = worst < BASELINE_TOL && recompute.final_ids == reference.final_ids;
    let mut note = "always-recompute matches dense".to_string();
    if cfg.tau == 1 {
        passed &= policy.final_ids == reference.final_ids;
        note.push_str("; tau=1 trajectory matches dense");
    } else {
        let same = policy.final_ids == reference.final_ids;
        note.push_str(&format!(
            "; tau={} trajectory {}",
            cfg.tau,
            if same {
                "matches"
            } else {
                "diverges (allowed)"
            }
        ));
    }
    Ok(PropertyReport {
        name: "baseline_equivalence",
        passed,
        max_error: Some(worst),
        note,
    })
}

/// Runs every property. Deterministic in `cfg`.
pub fn run_verify(cfg: &VerifyConfig) -> Result<Vec<PropertyReport>> {
    if cfg.layers == 0 || cfg.heads == 0 || cfg.dim == 0 || cfg.block_size == 0 || cfg.tau == 0 {
        return Err(Error::Config(format!(
            "layers, heads, dim, block size and tau must be positive: {cfg:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(vec![
        decomposition(cfg, &mut rng)?,
        associativity(cfg, &mut rng)?,
        shift_stability(cfg, &mut rng)?,
        no_kv_touch(cfg)?,
        baseline_equivalence(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let reports = run_verify(&VerifyConfig {
            trials: 30,
            ..VerifyConfig::default()
        })
        .unwrap();
        assert_eq!(reports.len(), 5);
        for r in &reports {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn zero_blocks_is_trivial() {
        let reports = run_verify(&VerifyConfig {
            blocks: 0,
            trials: 5,
            ..VerifyConfig::default()
        })
        .unwrap();
        assert!(reports.iter().all(|r| r.passed));
        assert!(reports.iter().any(|r| r.note == "empty trace"));
    }

    #[test]
    fn shifted_scores_stay_finite_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let change = shift_change_f32(4, 512, 16, 80.0, &mut rng).unwrap();
        assert!(change < SHIFT_TOL_F32, "{change}");
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = VerifyConfig {
            tau: 0,
            ..VerifyConfig::default()
        };
        assert!(run_verify(&cfg).is_err());
    }
}

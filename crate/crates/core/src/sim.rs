//! A deterministic toy block-diffusion model and the step driver around the attention
//! kernels.
//!
//! The model is a small pre-norm transformer (attention + residual, no MLP) over discrete
//! tokens with a reserved mask id. All weights come from a counter-based generator keyed
//! by the model seed, so a seed and a config pin every weight bit. Generation commits the
//! prompt as prefilled blocks, then denoises one block at a time: each step embeds the
//! block's current ids, runs every layer with the reuse policy deciding per (layer, head)
//! whether to recompute the block-external partial or reuse the cached one, and unmasks
//! the most confident positions. A finished block is re-encoded once and its K/V committed.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_dense_source, attention_streamed, attention_with_reuse, default_scale,
    merge_partials, AttnPartial, ExternalAttnCache, StreamConfig,
};
use crate::error::{Error, Result};
use crate::kv_cache::{AccessCounters, KvCache, KvSource, KvView};
use crate::linalg::{matmul, Scalar, Tensor2D};
use crate::reuse::{count_updated_tokens, decide, Decision, HeadGateTable, ReuseConfig};

pub type TokenId = u32;

// PRNG stream ids; each weight tensor and each random input gets its own stream.
const STREAM_EMBED: u64 = 1;
const STREAM_UNEMBED: u64 = 2;
const STREAM_LAYER_BASE: u64 = 16;
const STREAM_PROMPT: u64 = 1 << 40;
const STREAM_NOISE: u64 = 1 << 41;

/// Forces a specific attention behaviour on one head, for constructed fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadOverride {
    /// Zero query projection: uniform attention over whatever keys are visible.
    ZeroQuery,
    /// Multiplies the query projection, sharpening the attention distribution.
    QueryGain(f64),
    /// Zero value projection: the head outputs zeros.
    ZeroValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    /// Add sinusoidal position codes to the token embeddings.
    pub positional: bool,
    pub head_overrides: Vec<(usize, usize, HeadOverride)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            seed: 0,
            positional: true,
            head_overrides: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0
        {
            return Err(Error::Config(format!(
                "model needs vocab >= 2 and nonzero layers/heads/head_dim, got {self:?}"
            )));
        }
        if self.vocab_size >= TokenId::MAX as usize {
            return Err(Error::Config("vocab too large for token ids".into()));
        }
        for &(l, h, _) in &self.head_overrides {
            if l >= self.num_layers || h >= self.num_heads {
                return Err(Error::Bounds(format!(
                    "override for missing head ({l}, {h})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerWeights<T> {
    wq: Tensor2D<T>,
    wk: Tensor2D<T>,
    wv: Tensor2D<T>,
    wo: Tensor2D<T>,
}

/// Seeded synthetic transformer. Identical seed and config give bitwise-identical weights.
#[derive(Clone, Debug)]
pub struct SyntheticModel<T = f64> {
    config: ModelConfig,
    embed: Tensor2D<T>,
    layers: Vec<LayerWeights<T>>,
    unembed: Tensor2D<T>,
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64, stream: u64) -> Tensor2D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor2D::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

impl<T: Scalar> SyntheticModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let proj_std = 1.0 / (d as f64).sqrt();
        let embed = gaussian(config.vocab_size + 1, d, 1.0, config.seed, STREAM_EMBED);
        let unembed = gaussian(d, config.vocab_size, proj_std, config.seed, STREAM_UNEMBED);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let stream = STREAM_LAYER_BASE + 4 * l as u64;
            let mut wq = gaussian(d, d, proj_std, config.seed, stream);
            let wk = gaussian(d, d, proj_std, config.seed, stream + 1);
            let mut wv = gaussian(d, d, proj_std, config.seed, stream + 2);
            let wo = gaussian(d, d, proj_std, config.seed, stream + 3);
            for &(ol, oh, kind) in &config.head_overrides {
                if ol != l {
                    continue;
                }
                let cols = oh * config.head_dim..(oh + 1) * config.head_dim;
                let apply = |w: &mut Tensor2D<f64>, f: &dyn Fn(f64) -> f64| {
                    for r in 0..d {
                        for c in cols.clone() {
                            w.set(r, c, f(w.get(r, c)));
                        }
                    }
                };
                match kind {
                    HeadOverride::ZeroQuery => apply(&mut wq, &|_| 0.0),
                    HeadOverride::QueryGain(g) => apply(&mut wq, &|x| g * x),
                    HeadOverride::ZeroValue => apply(&mut wv, &|_| 0.0),
                }
            }
            layers.push(LayerWeights {
                wq: wq.cast(),
                wk: wk.cast(),
                wv: wv.cast(),
                wo: wo.cast(),
            });
        }
        Ok(Self {
            embed: embed.cast(),
            unembed: unembed.cast(),
            layers,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mask_token(&self) -> TokenId {
        self.config.vocab_size as TokenId
    }

    /// Embeddings plus position codes for `ids` placed at `start..start + ids.len()`.
    fn embed_tokens(&self, ids: &[TokenId], start: usize) -> Tensor2D<T> {
        let d = self.config.d_model();
        let mut x = Tensor2D::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let pos = (start + i) as f64;
            let row = x.row_mut(i);
            row.copy_from_slice(self.embed.row(id as usize));
            if self.config.positional {
                for (c, v) in row.iter_mut().enumerate() {
                    let freq = 1.0 / 10000f64.powf((c / 2 * 2) as f64 / d as f64);
                    let code = if c % 2 == 0 {
                        (pos * freq).sin()
                    } else {
                        (pos * freq).cos()
                    };
                    *v += T::from_f64(code);
                }
            }
        }
        x
    }
}

fn rms_norm<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = x.clone();
    let eps = T::from_f64(1e-6);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(T::ZERO, |a, &v| a + v * v) / T::from_f64(row.len() as f64);
        let inv = T::ONE / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn head_slice<T: Scalar>(x: &Tensor2D<T>, head: usize, head_dim: usize) -> Tensor2D<T> {
    x.slice_cols(head * head_dim, (head + 1) * head_dim)
        .expect("head within model width")
}

/// Per-layer, per-head K/V of one block, in head-major order within each layer.
type BlockKv<T> = Vec<Vec<(Tensor2D<T>, Tensor2D<T>)>>;

/// How tokens get unmasked over a block's steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnmaskSchedule {
    /// The `k` most confident masked positions per step.
    PerStep(usize),
    /// Spread the block evenly over `steps_per_block` steps; some steps may unmask
    /// nothing when there are more steps than positions.
    Linear,
}

impl Default for UnmaskSchedule {
    fn default() -> Self {
        UnmaskSchedule::PerStep(1)
    }
}

impl UnmaskSchedule {
    fn count(
        &self,
        step: usize,
        steps_per_block: usize,
        block_size: usize,
        remaining: usize,
    ) -> usize {
        if step + 1 >= steps_per_block {
            return remaining;
        }
        let n = match *self {
            UnmaskSchedule::PerStep(k) => k,
            UnmaskSchedule::Linear => {
                let target = block_size * (step + 1) / steps_per_block;
                target.saturating_sub(block_size - remaining)
            }
        };
        n.min(remaining)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    /// Uniform random ids drawn from the run seed.
    Random,
    /// Every prompt position holds the same id.
    Constant(TokenId),
}

/// Which attention implementation the forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionRoute {
    /// Streamed external/internal split with policy-driven reuse.
    Cached,
    /// Direct `attention_dense` on every call, ignoring the policy. Baseline reference.
    DenseReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompt_len: usize,
    pub num_blocks: usize,
    pub block_size: usize,
    pub steps_per_block: usize,
    pub unmask: UnmaskSchedule,
    pub seed: u64,
    /// Also run the dense oracle on every attention call and record the L-inf gap.
    pub verify: bool,
    /// Std of Gaussian noise added to the block's input embeddings at every step.
    pub inblock_noise: f64,
    pub prompt: PromptKind,
    pub route: AttentionRoute,
    pub tile_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt_len: 32,
            num_blocks: 2,
            block_size: 8,
            steps_per_block: 8,
            unmask: UnmaskSchedule::default(),
            seed: 0,
            verify: false,
            inblock_noise: 0.0,
            prompt: PromptKind::Random,
            route: AttentionRoute::Cached,
            tile_size: crate::attention::DEFAULT_TILE_SIZE,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        if self.steps_per_block == 0 {
            return Err(Error::Config("steps per block must be at least 1".into()));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile size must be at least 1".into()));
        }
        if let UnmaskSchedule::PerStep(0) = self.unmask {
            return Err(Error::Config(
                "per-step unmask count must be at least 1".into(),
            ));
        }
        if self.inblock_noise.is_nan() || self.inblock_noise < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }

    fn stream(&self) -> StreamConfig {
        StreamConfig {
            tile_size: self.tile_size,
        }
    }
}

/// Step-level classification in traces. Per-head decisions are summarized by
/// [`StepTrace::heads_reused`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDecision {
    FirstVisit,
    /// Every (layer, head) reused its cached external partial.
    Reuse,
    /// At least one (layer, head) recomputed.
    Recompute,
}

impl fmt::Display for StepDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepDecision::FirstVisit => "first_visit",
            StepDecision::Reuse => "reuse",
            StepDecision::Recompute => "recompute",
        })
    }
}

/// Record of one denoising step.
///
/// `keys_attended`, `kv_rows_read` and `external_rows_read` are per attention head:
/// totals over all (layer, head) pairs divided by their count (floor). With a uniform
/// decision across heads they are exact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepTrace {
    pub block_id: usize,
    pub step: usize,
    pub decision: StepDecision,
    pub updated_tokens: usize,
    pub keys_attended: u64,
    pub kv_rows_read: u64,
    /// Rows read from committed KV storage.
    pub external_rows_read: u64,
    pub heads_reused: usize,
    pub heads_total: usize,
    pub context_len: usize,
    pub output_checksum: f64,
    pub linf_gap_vs_dense: Option<f64>,
    /// Raw counter delta of the step, summed over all heads.
    pub access: AccessCounters,
}

pub const TRACE_CSV_HEADER: &str =
    "block_id,step,decision,M,keys_attended,kv_rows_read,checksum,linf_gap";

impl StepTrace {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.12e},{}",
            self.block_id,
            self.step,
            self.decision,
            self.updated_tokens,
            self.keys_attended,
            self.kv_rows_read,
            self.output_checksum,
            self.linf_gap_vs_dense
                .map(|g| format!("{g:.6e}"))
                .unwrap_or_default()
        )
    }
}

pub fn traces_to_csv(traces: &[StepTrace]) -> String {
    let mut s = String::from(TRACE_CSV_HEADER);
    s.push('\n');
    for t in traces {
        s.push_str(&t.csv_row());
        s.push('\n');
    }
    s
}

/// Everything an observer gets to see about one (layer, head) attention call.
pub struct AttnCall<'a, T> {
    pub block_id: usize,
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub decision: Decision,
    pub scale: f64,
    pub queries: &'a Tensor2D<T>,
    /// Committed context followed by the block's current K/V. Reads are not counted.
    pub kv: KvView<'a, T>,
    /// External partial used for this call: fresh on recompute, cached on reuse.
    pub external: Option<&'a AttnPartial<T>>,
    pub internal: Option<&'a AttnPartial<T>>,
    pub output: &'a Tensor2D<T>,
}

pub trait StepObserver<T> {
    fn on_attention(&mut self, _call: &AttnCall<'_, T>) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _trace: &StepTrace) {}
}

impl<T> StepObserver<T> for () {}

/// The block being denoised.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub block_id: usize,
    /// Absolute position of the first block token.
    pub start: usize,
    pub token_ids: Vec<TokenId>,
    pub step_index: usize,
    /// Ids that were fed to the previous step, `None` before the first step.
    pub previous_input: Option<Vec<TokenId>>,
    pub mask_token: TokenId,
}

impl BlockState {
    pub fn new(block_id: usize, start: usize, block_size: usize, mask_token: TokenId) -> Self {
        Self {
            block_id,
            start,
            token_ids: vec![mask_token; block_size],
            step_index: 0,
            previous_input: None,
            mask_token,
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.token_ids.len())
            .filter(|&i| self.token_ids[i] == self.mask_token)
            .collect()
    }

    pub fn is_finished(&self, steps_per_block: usize) -> bool {
        self.masked_positions().is_empty() || self.step_index >= steps_per_block
    }
}

struct StepOutput<T> {
    hidden: Tensor2D<T>,
    kv: BlockKv<T>,
    decisions: Vec<Decision>,
    keys_attended: u64,
    linf_gap: Option<f64>,
}

/// Runs the layers over the block rows `x` (already embedded). With `policy = None` every
/// head does a full dense-equivalent pass and nothing is cached.
#[allow(clippy::too_many_arguments)]
fn forward_block<T: Scalar>(
    model: &SyntheticModel<T>,
    mut x: Tensor2D<T>,
    kv: &KvCache<T>,
    mut ext: Option<&mut ExternalAttnCache<T>>,
    policy: Option<(&ReuseConfig, Option<&HeadGateTable>, bool, usize)>,
    block: (usize, usize),
    run: &RunConfig,
    observer: &mut dyn StepObserver<T>,
) -> Result<StepOutput<T>> {
    let cfg = model.config();
    let (hd, scale) = (cfg.head_dim, default_scale(cfg.head_dim));
    let (block_id, step) = block;
    let mut kv_out: BlockKv<T> = Vec::with_capacity(cfg.num_layers);
    let mut decisions = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
    let mut keys_attended = 0u64;
    let mut linf_gap: Option<f64> = run.verify.then_some(0.0);

    for (l, w) in model.layers.iter().enumerate() {
        let h = rms_norm(&x);
        let q_all = matmul(&h, &w.wq)?;
        let k_all = matmul(&h, &w.wk)?;
        let v_all = matmul(&h, &w.wv)?;
        let mut attn = Tensor2D::<T>::zeros(x.rows(), cfg.d_model());
        let mut layer_kv = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let q = head_slice(&q_all, head, hd);
            let k = head_slice(&k_all, head, hd);
            let v = head_slice(&v_all, head, hd);
            let view = kv.view(l, head, Some((&k, &v)))?;
            let boundary = view.committed_rows();

            let (decision, out, external, internal) = match (run.route, policy, ext.as_deref_mut())
            {
                (
                    AttentionRoute::Cached,
                    Some((reuse, gates, first_visit, updated)),
                    Some(cache),
                ) => {
                    let gate = gates.is_none_or(|g| g.is_enabled(l, head));
                    let entry = cache.valid_entry(l, head, block_id);
                    match decide(reuse, entry.is_some(), first_visit, updated, gate) {
                        Decision::Reuse => {
                            let entry = entry.expect("decide() only reuses a valid entry");
                            let (out, refreshed) = attention_with_reuse(
                                &q,
                                entry,
                                &view.block_only(),
                                scale,
                                run.stream(),
                            )?;
                            (
                                Decision::Reuse,
                                out,
                                Some(entry.partial.clone()),
                                Some(refreshed),
                            )
                        }
                        Decision::Recompute => {
                            let (e, i) =
                                attention_streamed(&q, &view, scale, boundary, run.stream())?;
                            let out = merge_partials(&e, &i)?;
                            cache.store(l, head, block_id, step, e.clone())?;
                            (Decision::Recompute, out, Some(e), Some(i))
                        }
                    }
                }
                (AttentionRoute::Cached, _, _) => {
                    let (e, i) = attention_streamed(&q, &view, scale, boundary, run.stream())?;
                    (
                        Decision::Recompute,
                        merge_partials(&e, &i)?,
                        Some(e),
                        Some(i),
                    )
                }
                (AttentionRoute::DenseReference, _, _) => {
                    let out = attention_dense_source(&q, &view, scale)?.cast::<T>();
                    (Decision::Recompute, out, None, None)
                }
            };
            keys_attended += match decision {
                Decision::Reuse => view.block_rows() as u64,
                Decision::Recompute => view.len() as u64,
            };
            if let Some(gap) = linf_gap.as_mut() {
                let oracle = attention_dense_source(&q, &view.uncounted(), scale)?;
                *gap = gap.max(out.max_abs_diff(&oracle)?);
            }
            observer.on_attention(&AttnCall {
                block_id,
                step,
                layer: l,
                head,
                decision,
                scale,
                queries: &q,
                kv: view.uncounted(),
                external: external.as_ref(),
                internal: internal.as_ref(),
                output: &out,
            })?;
            for i in 0..out.rows() {
                attn.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(out.row(i));
            }
            decisions.push(decision);
            layer_kv.push((k, v));
        }
        let proj = matmul(&attn, &w.wo)?;
        for (a, &b) in x.data_mut().iter_mut().zip(proj.data()) {
            *a += b;
        }
        kv_out.push(layer_kv);
    }
    Ok(StepOutput {
        hidden: rms_norm(&x),
        kv: kv_out,
        decisions,
        keys_attended,
        linf_gap,
    })
}

fn commit_kv<T: Scalar>(kv: &mut KvCache<T>, block: BlockKv<T>) -> Result<()> {
    for (l, heads) in block.into_iter().enumerate() {
        for (h, (k, v)) in heads.into_iter().enumerate() {
            kv.commit_block(l, h, &k, &v)?;
        }
    }
    Ok(())
}

/// Encodes a finished run of tokens against the committed context and appends its K/V.
fn encode_and_commit<T: Scalar>(
    model: &SyntheticModel<T>,
    kv: &mut KvCache<T>,
    ids: &[TokenId],
    start: usize,
    run: &RunConfig,
) -> Result<()> {
    let x = model.embed_tokens(ids, start);
    let no_verify = RunConfig {
        verify: false,
        route: AttentionRoute::Cached,
        ..run.clone()
    };
    let out = forward_block(
        model,
        x,
        kv,
        None,
        None,
        (usize::MAX, 0),
        &no_verify,
        &mut (),
    )?;
    commit_kv(kv, out.kv)
}

/// Picks the `n` most confident masked positions (ties to the lower index) and writes their
/// argmax ids.
fn unmask<T: Scalar>(
    model: &SyntheticModel<T>,
    hidden: &Tensor2D<T>,
    ids: &mut [TokenId],
    mask: TokenId,
    n: usize,
) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let logits = matmul(hidden, &model.unembed)?;
    let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != mask {
            continue;
        }
        let row = logits.row(i);
        let (best, max) =
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    let v = v.to_f64();
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                });
        let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        candidates.push((1.0 / z, i, best as TokenId));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i, tok) in candidates.iter().take(n) {
        ids[i] = tok;
    }
    Ok(())
}

fn block_noise(
    run: &RunConfig,
    block_id: usize,
    step: usize,
    rows: usize,
    cols: usize,
) -> Tensor2D<f64> {
    let stream = STREAM_NOISE | ((block_id as u64) << 20) | step as u64;
    gaussian(rows, cols, run.inblock_noise, run.seed, stream)
}

/// Generates the prompt ids for a run.
pub fn prompt_ids(model: &ModelConfig, run: &RunConfig) -> Vec<TokenId> {
    match run.prompt {
        PromptKind::Constant(id) => vec![id; run.prompt_len],
        PromptKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            rng.set_stream(STREAM_PROMPT);
            (0..run.prompt_len)
                .map(|_| rng.gen_range(0..model.vocab_size as TokenId))
                .collect()
        }
    }
}

/// One denoising step of the current block.
///
/// Returns the advanced block state and the step's trace. The external cache is
/// refreshed on every (layer, head) that recomputes.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<T: Scalar>(
    model: &SyntheticModel<T>,
    state: &BlockState,
    kv: &KvCache<T>,
    ext_cache: &mut ExternalAttnCache<T>,
    policy: &ReuseConfig,
    gates: Option<&HeadGateTable>,
    run: &RunConfig,
    observer: &mut dyn StepObserver<T>,
) -> Result<(BlockState, StepTrace)> {
    run.validate()?;
    let masked = state.masked_positions();
    if masked.is_empty() && state.step_index >= run.steps_per_block {
        return Err(Error::Config(format!(
            "block {} has no masked positions and no step budget left",
            state.block_id
        )));
    }
    let cfg = model.config();
    let first_visit = state.step_index == 0;
    let updated = match &state.previous_input {
        Some(prev) => count_updated_tokens(prev, &state.token_ids)?,
        None => 0,
    };

    let mut x = model.embed_tokens(&state.token_ids, state.start);
    if run.inblock_noise > 0.0 {
        let noise = block_noise(run, state.block_id, state.step_index, x.rows(), x.cols());
        for (a, n) in x.data_mut().iter_mut().zip(noise.data()) {
            *a += T::from_f64(*n);
        }
    }

    let before = kv.snapshot_counters();
    let out = forward_block(
        model,
        x,
        kv,
        Some(ext_cache),
        Some((policy, gates, first_visit, updated)),
        (state.block_id, state.step_index),
        run,
        observer,
    )?;
    let delta: AccessCounters = kv.snapshot_counters().since(&before);

    let mut next = state.clone();
    let n = run.unmask.count(
        state.step_index,
        run.steps_per_block,
        state.token_ids.len(),
        masked.len(),
    );
    unmask(model, &out.hidden, &mut next.token_ids, state.mask_token, n)?;
    next.previous_input = Some(state.token_ids.clone());
    next.step_index += 1;

    let heads_total = cfg.num_layers * cfg.num_heads;
    let heads_reused = out
        .decisions
        .iter()
        .filter(|d| **d == Decision::Reuse)
        .count();
    let decision = if first_visit {
        StepDecision::FirstVisit
    } else if heads_reused == heads_total {
        StepDecision::Reuse
    } else {
        StepDecision::Recompute
    };
    let per_head = heads_total as u64;
    let trace = StepTrace {
        block_id: state.block_id,
        step: state.step_index,
        decision,
        updated_tokens: updated,
        keys_attended: out.keys_attended / per_head,
        kv_rows_read: delta.key_rows_read / per_head,
        external_rows_read: delta.committed_rows_read / per_head,
        heads_reused,
        heads_total,
        context_len: kv.committed_len(0, 0)?,
        output_checksum: out.hidden.sum_f64(),
        linf_gap_vs_dense: out.linf_gap,
        access: delta,
    };
    observer.on_step(&trace);
    Ok((next, trace))
}

/// A sequence in progress: committed tokens, their KV, and the external cache.
#[derive(Clone, Debug)]
pub struct Sequence<'m, T: Scalar = f64> {
    model: &'m SyntheticModel<T>,
    kv: KvCache<T>,
    ext: ExternalAttnCache<T>,
    tokens: Vec<TokenId>,
    blocks_generated: usize,
}

impl<'m, T: Scalar> Sequence<'m, T> {
    /// Commits `prompt` as prefilled blocks of `run.block_size` tokens (the last may be
    /// shorter).
    pub fn prefill(
        model: &'m SyntheticModel<T>,
        prompt: &[TokenId],
        run: &RunConfig,
    ) -> Result<Self> {
        run.validate()?;
        let cfg = model.config();
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Config(format!(
                "prompt token {bad} outside the vocabulary"
            )));
        }
        let mut kv = KvCache::new(cfg.num_layers, cfg.num_heads, cfg.head_dim);
        for (b, chunk) in prompt.chunks(run.block_size).enumerate() {
            encode_and_commit(model, &mut kv, chunk, b * run.block_size, run)?;
        }
        Ok(Self {
            model,
            kv,
            ext: ExternalAttnCache::new(cfg.num_layers, cfg.num_heads),
            tokens: prompt.to_vec(),
            blocks_generated: 0,
        })
    }

    pub fn kv(&self) -> &KvCache<T> {
        &self.kv
    }

    pub fn external_cache(&self) -> &ExternalAttnCache<T> {
        &self.ext
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn context_len(&self) -> usize {
        self.tokens.len()
    }

    /// Denoises one block to completion, commits it and returns its step traces.
    pub fn generate_block(
        &mut self,
        policy: &ReuseConfig,
        gates: Option<&HeadGateTable>,
        run: &RunConfig,
        observer: &mut dyn StepObserver<T>,
    ) -> Result<Vec<StepTrace>> {
        let mut state = BlockState::new(
            self.blocks_generated,
            self.tokens.len(),
            run.block_size,
            self.model.mask_token(),
        );
        let mut traces = Vec::new();
        while !state.is_finished(run.steps_per_block) {
            let (next, trace) = denoise_step(
                self.model,
                &state,
                &self.kv,
                &mut self.ext,
                policy,
                gates,
                run,
                observer,
            )?;
            state = next;
            traces.push(trace);
        }
        self.ext.invalidate_all();
        encode_and_commit(self.model, &mut self.kv, &state.token_ids, state.start, run)?;
        self.tokens.extend_from_slice(&state.token_ids);
        self.blocks_generated += 1;
        Ok(traces)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRun {
    pub traces: Vec<StepTrace>,
    pub final_ids: Vec<TokenId>,
}

/// Prefills the prompt and generates `run.num_blocks` blocks. Deterministic in
/// (model, run, policy, gates).
pub fn run_sequence<T: Scalar>(
    model: &SyntheticModel<T>,
    run: &RunConfig,
    policy: &ReuseConfig,
    gates: Option<&HeadGateTable>,
    observer: &mut dyn StepObserver<T>,
) -> Result<SequenceRun> {
    let prompt = prompt_ids(model.config(), run);
    let mut seq = Sequence::prefill(model, &prompt, run)?;
    let mut traces = Vec::new();
    for _ in 0..run.num_blocks {
        traces.extend(seq.generate_block(policy, gates, run, observer)?);
    }
    Ok(SequenceRun {
        traces,
        final_ids: seq.tokens,
    })
}

/// Paired-run comparison of two policies over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub seeds: usize,
    pub exact_matches: usize,
    pub match_rate: f64,
    /// Mean over steps of policy B's per-step attention L-inf gap against the dense oracle.
    pub mean_linf_gap: f64,
    /// Histogram of updated-token counts over policy B's non-first steps.
    pub updated_histogram: BTreeMap<usize, usize>,
}

/// Runs `policy_a` and `policy_b` (the latter in verify mode) on seeds
/// `run.seed .. run.seed + num_seeds` and compares final token ids.
pub fn quality_probe<T: Scalar>(
    model: &SyntheticModel<T>,
    policy_a: &ReuseConfig,
    policy_b: &ReuseConfig,
    num_seeds: usize,
    run: &RunConfig,
) -> Result<DivergenceReport> {
    use rayon::prelude::*;

    if num_seeds == 0 {
        return Err(Error::Config(
            "quality probe needs at least one seed".into(),
        ));
    }
    let per_seed: Vec<Result<(bool, Vec<StepTrace>)>> = (0..num_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let base = RunConfig {
                seed: run.seed + s,
                verify: false,
                ..run.clone()
            };
            let a = run_sequence(model, &base, policy_a, None, &mut ())?;
            let verify = RunConfig {
                verify: true,
                ..base
            };
            let b = run_sequence(model, &verify, policy_b, None, &mut ())?;
            Ok((a.final_ids == b.final_ids, b.traces))
        })
        .collect();

    let mut exact_matches = 0;
    let mut gaps = Vec::new();
    let mut updated_histogram = BTreeMap::new();
    for r in per_seed {
        let (matched, traces) = r?;
        exact_matches += usize::from(matched);
        for t in &traces {
            gaps.extend(t.linf_gap_vs_dense);
            if t.decision != StepDecision::FirstVisit {
                *updated_histogram.entry(t.updated_tokens).or_insert(0) += 1;
            }
        }
    }
    Ok(DivergenceReport {
        seeds: num_seeds,
        exact_matches,
        match_rate: exact_matches as f64 / num_seeds as f64,
        mean_linf_gap: if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        },
        updated_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> SyntheticModel<f64> {
        SyntheticModel::new(ModelConfig {
            vocab_size: 64,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn weights_are_seed_deterministic() {
        let a = small_model();
        let b = small_model();
        assert_eq!(a.embed, b.embed);
        assert_eq!(a.layers[1].wo, b.layers[1].wo);
        let c = SyntheticModel::<f64>::new(ModelConfig {
            seed: 1,
            ..a.config().clone()
        })
        .unwrap();
        assert_ne!(a.embed, c.embed);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            num_heads: 0,
            ..ModelConfig::default()
        };
        assert!(SyntheticModel::<f64>::new(bad).is_err());
        let bad = ModelConfig {
            head_overrides: vec![(9, 0, HeadOverride::ZeroQuery)],
            ..ModelConfig::default()
        };
        assert!(SyntheticModel::<f64>::new(bad).is_err());
        let model = small_model();
        let run = RunConfig {
            block_size: 0,
            ..RunConfig::default()
        };
        assert!(run_sequence(&model, &run, &ReuseConfig::default(), None, &mut ()).is_err());
    }

    #[test]
    fn linear_schedule_spreads_unmasking() {
        let s = UnmaskSchedule::Linear;
        let mut remaining = 8;
        let mut counts = Vec::new();
        for step in 0..32 {
            let n = s.count(step, 32, 8, remaining);
            remaining -= n;
            counts.push(n);
        }
        assert_eq!(remaining, 0);
        assert_eq!(counts.iter().filter(|&&n| n == 1).count(), 8);
        assert_eq!(counts[3], 1);
        assert_eq!(counts[0], 0);
        assert_eq!(UnmaskSchedule::PerStep(3).count(0, 8, 8, 2), 2);
        assert_eq!(
            UnmaskSchedule::PerStep(1).count(3, 4, 8, 5),
            5,
            "last step flushes"
        );
    }

    #[test]
    fn empty_generation_returns_prompt() {
        let model = small_model();
        let run = RunConfig {
            num_blocks: 0,
            ..RunConfig::default()
        };
        let out = run_sequence(&model, &run, &ReuseConfig::default(), None, &mut ()).unwrap();
        assert!(out.traces.is_empty());
        assert_eq!(out.final_ids, prompt_ids(model.config(), &run));
    }

    #[test]
    fn first_then_reuse_steps() {
        let model = small_model();
        let run = RunConfig {
            prompt_len: 24,
            num_blocks: 1,
            block_size: 4,
            steps_per_block: 4,
            ..RunConfig::default()
        };
        let out = run_sequence(&model, &run, &ReuseConfig::default(), None, &mut ()).unwrap();
        assert_eq!(out.traces.len(), 4);
        let first = &out.traces[0];
        assert_eq!(first.decision, StepDecision::FirstVisit);
        assert_eq!(first.keys_attended, 24 + 4);
        assert_eq!(first.kv_rows_read, 28);
        let second = &out.traces[1];
        assert_eq!(second.updated_tokens, 1);
        assert_eq!(second.decision, StepDecision::Reuse);
        assert_eq!(second.keys_attended, 4);
        assert_eq!(second.kv_rows_read, 4);
        assert_eq!(second.external_rows_read, 0);
        assert_eq!(out.final_ids.len(), 28);
        assert!(out.final_ids.iter().all(|&t| t < 64));
    }

    #[test]
    fn always_recompute_matches_oracle_each_step() {
        let model = small_model();
        let run = RunConfig {
            prompt_len: 20,
            num_blocks: 2,
            block_size: 4,
            steps_per_block: 4,
            verify: true,
            ..RunConfig::default()
        };
        let out = run_sequence(
            &model,
            &run,
            &ReuseConfig::always_recompute(),
            None,
            &mut (),
        )
        .unwrap();
        for t in &out.traces {
            assert!(t.linf_gap_vs_dense.unwrap() < 1e-9, "{t:?}");
            assert_ne!(t.decision, StepDecision::Reuse);
        }
    }

    #[test]
    fn tau_one_recomputes_after_any_change() {
        let model = small_model();
        let run = RunConfig {
            prompt_len: 16,
            num_blocks: 1,
            block_size: 4,
            steps_per_block: 4,
            ..RunConfig::default()
        };
        let dense = run_sequence(
            &model,
            &run,
            &ReuseConfig::always_recompute(),
            None,
            &mut (),
        )
        .unwrap();
        let tau1 = run_sequence(
            &model,
            &run,
            &ReuseConfig::token_threshold(1).unwrap(),
            None,
            &mut (),
        )
        .unwrap();
        assert_eq!(dense.final_ids, tau1.final_ids);
        for (a, b) in dense.traces.iter().zip(&tau1.traces) {
            assert_eq!(a.output_checksum, b.output_checksum);
        }
    }

    #[test]
    fn same_seed_same_everything() {
        let model = small_model();
        let run = RunConfig {
            seed: 5,
            inblock_noise: 0.3,
            ..RunConfig::default()
        };
        let a = run_sequence(&model, &run, &ReuseConfig::default(), None, &mut ()).unwrap();
        let b = run_sequence(&model, &run, &ReuseConfig::default(), None, &mut ()).unwrap();
        assert_eq!(a, b);
        assert_eq!(traces_to_csv(&a.traces), traces_to_csv(&b.traces));
    }

    #[test]
    fn committed_kv_matches_encoded_tokens() {
        let model = small_model();
        let run = RunConfig {
            prompt_len: 10,
            num_blocks: 1,
            block_size: 4,
            ..RunConfig::default()
        };
        let prompt = prompt_ids(model.config(), &run);
        let mut seq = Sequence::prefill(&model, &prompt, &run).unwrap();
        assert_eq!(seq.kv().block_boundaries(1, 1).unwrap(), &[4, 8, 10]);
        seq.generate_block(&ReuseConfig::default(), None, &run, &mut ())
            .unwrap();
        assert_eq!(seq.kv().block_boundaries(0, 0).unwrap(), &[4, 8, 10, 14]);
        assert_eq!(seq.external_cache().resident_bytes(), 0);
        assert_eq!(seq.context_len(), 14);
    }

    #[test]
    fn csv_layout() {
        let t = StepTrace {
            block_id: 1,
            step: 2,
            decision: StepDecision::Reuse,
            updated_tokens: 1,
            keys_attended: 8,
            kv_rows_read: 8,
            external_rows_read: 0,
            heads_reused: 4,
            heads_total: 4,
            context_len: 64,
            output_checksum: 1.5,
            linf_gap_vs_dense: None,
            access: AccessCounters::default(),
        };
        assert_eq!(t.csv_row(), "1,2,reuse,1,8,8,1.500000000000e0,");
        assert!(traces_to_csv(&[t]).starts_with(TRACE_CSV_HEADER));
    }
}

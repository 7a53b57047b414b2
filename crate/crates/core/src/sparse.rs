//! Per-block sparse key selection with residual caching of the unselected keys.
//!
//! At the first step of a block, dense attention probabilities rank the committed
//! context in fixed-size key blocks by the attention mass they receive; the heaviest
//! blocks (plus the block's own keys) are selected until the density budget is met.
//! That same pass also yields the partial over the unselected keys, which is cached.
//! Later steps of the block attend only to the selected keys and merge the cached
//! residual back in log space.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{
    attention_dense_source, attention_over_ranges, attention_partitioned, merge_partials,
    AttnPartial, StreamConfig,
};
use crate::error::{Error, Result};
use crate::kv_cache::KvView;
use crate::linalg::{Scalar, Tensor2D};
use crate::reuse::ReuseConfig;
use crate::sim::{run_sequence, AttnCall, RunConfig, StepObserver, SyntheticModel};

pub const DEFAULT_KEY_BLOCK_SIZE: usize = 16;

/// Key selection of one (layer, head) for one block.
///
/// Context keys `[0, context_len)` are grouped into key blocks of `key_block_size`
/// (the last one may be short). The block's own keys `[context_len, context_len +
/// block_rows)` are always selected.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparseMask {
    pub block_id: usize,
    pub context_len: usize,
    pub block_rows: usize,
    pub key_block_size: usize,
    pub density: f64,
    /// Sorted indices of the selected context key blocks.
    pub selected_blocks: Vec<usize>,
}

impl SparseMask {
    pub fn total_keys(&self) -> usize {
        self.context_len + self.block_rows
    }

    pub fn num_key_blocks(&self) -> usize {
        self.context_len.div_ceil(self.key_block_size)
    }

    fn key_block_range(&self, b: usize) -> Range<usize> {
        b * self.key_block_size..((b + 1) * self.key_block_size).min(self.context_len)
    }

    /// Selected key ranges in stream order, adjacent ranges coalesced.
    pub fn selected_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        let all = self
            .selected_blocks
            .iter()
            .map(|&b| self.key_block_range(b))
            .chain(std::iter::once(self.context_len..self.total_keys()));
        for r in all.filter(|r| !r.is_empty()) {
            match ranges.last_mut() {
                Some(last) if last.end == r.start => last.end = r.end,
                _ => ranges.push(r),
            }
        }
        ranges
    }

    pub fn selected_keys(&self) -> usize {
        self.selected_ranges().iter().map(|r| r.len()).sum()
    }

    pub fn realized_density(&self) -> f64 {
        self.selected_keys() as f64 / self.total_keys().max(1) as f64
    }

    pub fn membership(&self) -> Vec<bool> {
        let mut member = vec![false; self.total_keys()];
        for r in self.selected_ranges() {
            member[r].iter_mut().for_each(|m| *m = true);
        }
        member
    }

    fn check_current(&self, kv: &KvView<'_, impl Scalar>, block_id: usize) -> Result<()> {
        if self.block_id != block_id
            || self.context_len != kv.committed_rows()
            || self.block_rows != kv.block_rows()
        {
            return Err(Error::StaleMask(format!(
                "mask for block {} over {}+{} keys used on block {block_id} over {}+{} keys",
                self.block_id,
                self.context_len,
                self.block_rows,
                kv.committed_rows(),
                kv.block_rows()
            )));
        }
        Ok(())
    }
}

/// Ranks context key blocks by the dense attention mass `q` puts on them and keeps the
/// heaviest until `density` of all keys is covered. Ties go to the lower block index.
pub fn build_sparse_mask<T: Scalar>(
    block_id: usize,
    q: &Tensor2D<T>,
    kv: &KvView<'_, T>,
    density: f64,
    key_block_size: usize,
    scale: f64,
) -> Result<SparseMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if key_block_size == 0 {
        return Err(Error::Config("key block size must be at least 1".into()));
    }
    let mut mask = SparseMask {
        block_id,
        context_len: kv.committed_rows(),
        block_rows: kv.block_rows(),
        key_block_size,
        density,
        selected_blocks: Vec::new(),
    };
    let uncounted = kv.uncounted();
    let (keys, _) = uncounted.to_tensors();
    let mut mass = vec![0.0f64; mask.num_key_blocks()];
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..keys.rows())
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(keys.row(j))
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for (j, s) in scores.iter().enumerate().take(mask.context_len) {
            mass[j / key_block_size] += (s - m).exp() / z;
        }
    }
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));

    let budget = density * mask.total_keys() as f64;
    let mut selected = mask.block_rows;
    for b in order {
        if selected as f64 >= budget {
            break;
        }
        selected += mask.key_block_range(b).len();
        mask.selected_blocks.push(b);
    }
    mask.selected_blocks.sort_unstable();
    Ok(mask)
}

/// Sparse attention over the selected keys merged with the residual partial of the
/// unselected ones.
///
/// Without a cached residual (first step of the block) all keys are streamed once and
/// split by membership; the exact output and the fresh residual are returned. With a
/// cached residual only selected keys are read. Returns `(output, residual)`.
pub fn sparse_attention_with_residual<T: Scalar>(
    q: &Tensor2D<T>,
    mask: &SparseMask,
    kv: &KvView<'_, T>,
    residual: Option<&AttnPartial<T>>,
    block_id: usize,
    scale: f64,
    cfg: StreamConfig,
) -> Result<(Tensor2D<T>, AttnPartial<T>)> {
    mask.check_current(kv, block_id)?;
    match residual {
        None => {
            let (selected, residual) =
                attention_partitioned(q, kv, &mask.membership(), scale, cfg)?;
            Ok((merge_partials(&residual, &selected)?, residual))
        }
        Some(res) => {
            let selected = attention_over_ranges(q, kv, &mask.selected_ranges(), scale, cfg)?;
            Ok((merge_partials(res, &selected)?, res.clone()))
        }
    }
}

/// Standard sparse attention: softmax renormalized over the selected keys only.
pub fn sparse_attention_only<T: Scalar>(
    q: &Tensor2D<T>,
    mask: &SparseMask,
    kv: &KvView<'_, T>,
    block_id: usize,
    scale: f64,
    cfg: StreamConfig,
) -> Result<Tensor2D<T>> {
    mask.check_current(kv, block_id)?;
    Ok(attention_over_ranges(q, kv, &mask.selected_ranges(), scale, cfg)?.into_out())
}

/// One row of the sparse gap table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub density: f64,
    pub l1_sparse_only: f64,
    pub l1_with_residual: f64,
    pub seed: u64,
}

pub const GAP_CSV_HEADER: &str = "density,l1_sparse_only,l1_with_residual,seed";

/// Gap table as CSV. L1 is the mean absolute difference per output element.
pub fn gap_rows_to_csv(rows: &[GapRow]) -> String {
    let mut s = String::from(
        "# l1 = mean absolute difference per attention output element vs dense oracle\n",
    );
    s.push_str(GAP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{}\n",
            r.density, r.l1_sparse_only, r.l1_with_residual, r.seed
        ));
    }
    s
}

struct GapProbe<T> {
    layer: usize,
    densities: Vec<f64>,
    key_block_size: usize,
    cfg: StreamConfig,
    // per head, per density: mask and cached residual from the block's first step
    state: Vec<Vec<(SparseMask, AttnPartial<T>)>>,
    // per density: (sum sparse-only, sum with-residual, count)
    sums: Vec<(f64, f64, usize)>,
}

impl<T: Scalar> StepObserver<T> for GapProbe<T> {
    fn on_attention(&mut self, call: &AttnCall<'_, T>) -> Result<()> {
        if call.layer != self.layer {
            return Ok(());
        }
        if self.state.len() <= call.head {
            self.state.resize_with(call.head + 1, Vec::new);
        }
        if call.step == 0 {
            let mut per_density = Vec::with_capacity(self.densities.len());
            for &d in &self.densities {
                let mask = build_sparse_mask(
                    call.block_id,
                    call.queries,
                    &call.kv,
                    d,
                    self.key_block_size,
                    call.scale,
                )?;
                let (_, residual) = sparse_attention_with_residual(
                    call.queries,
                    &mask,
                    &call.kv,
                    None,
                    call.block_id,
                    call.scale,
                    self.cfg,
                )?;
                per_density.push((mask, residual));
            }
            self.state[call.head] = per_density;
            return Ok(());
        }
        let oracle = attention_dense_source(call.queries, &call.kv, call.scale)?;
        for (k, (mask, residual)) in self.state[call.head].iter().enumerate() {
            let only = sparse_attention_only(
                call.queries,
                mask,
                &call.kv,
                call.block_id,
                call.scale,
                self.cfg,
            )?;
            let (with, _) = sparse_attention_with_residual(
                call.queries,
                mask,
                &call.kv,
                Some(residual),
                call.block_id,
                call.scale,
                self.cfg,
            )?;
            let s = &mut self.sums[k];
            s.0 += only.mean_abs_diff(&oracle)?;
            s.1 += with.mean_abs_diff(&oracle)?;
            s.2 += 1;
        }
        Ok(())
    }
}

/// Runs one block per seed along the dense trajectory and, at `layer`, compares
/// sparse-only and sparse-plus-residual attention against the dense oracle on every
/// step after the mask-building one. One row per (seed, density), seeds outermost.
pub fn measure_sparse_gap<T: Scalar>(
    model: &SyntheticModel<T>,
    run: &RunConfig,
    densities: &[f64],
    layer: usize,
    key_block_size: usize,
    seeds: usize,
) -> Result<Vec<GapRow>> {
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {d}"
        )));
    }
    if layer >= model.config().num_layers {
        return Err(Error::Bounds(format!(
            "layer {layer} of {}",
            model.config().num_layers
        )));
    }
    if run.steps_per_block < 2 {
        return Err(Error::Config(
            "gap measurement needs at least two steps per block".into(),
        ));
    }
    let per_seed: Vec<Result<Vec<GapRow>>> = (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let cfg = RunConfig {
                seed: run.seed + s,
                num_blocks: 1,
                verify: false,
                ..run.clone()
            };
            let mut probe = GapProbe {
                layer,
                densities: densities.to_vec(),
                key_block_size,
                cfg: StreamConfig {
                    tile_size: run.tile_size,
                },
                state: Vec::new(),
                sums: vec![(0.0, 0.0, 0); densities.len()],
            };
            run_sequence(
                model,
                &cfg,
                &ReuseConfig::always_recompute(),
                None,
                &mut probe,
            )?;
            Ok(densities
                .iter()
                .zip(&probe.sums)
                .map(|(&density, &(only, with, n))| {
                    let n = n.max(1) as f64;
                    GapRow {
                        density,
                        l1_sparse_only: only / n,
                        l1_with_residual: with / n,
                        seed: cfg.seed,
                    }
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_dense, default_scale};
    use crate::kv_cache::KvCache;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D<f64> {
        Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    struct Fixture {
        cache: KvCache<f64>,
        bk: Tensor2D<f64>,
        bv: Tensor2D<f64>,
        q: Tensor2D<f64>,
    }

    fn fixture(ctx: usize, b: usize, d: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = KvCache::new(1, 1, d);
        let ck = random(ctx, d, &mut rng).map(|x| 2.0 * x);
        let cv = random(ctx, d, &mut rng);
        cache.commit_block(0, 0, &ck, &cv).unwrap();
        Fixture {
            cache,
            bk: random(b, d, &mut rng),
            bv: random(b, d, &mut rng),
            q: random(b, d, &mut rng),
        }
    }

    fn dense(f: &Fixture, q: &Tensor2D<f64>, scale: f64) -> Tensor2D<f64> {
        let view = f.cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let (k, v) = view.to_tensors();
        attention_dense(q, &k, &v, scale).unwrap()
    }

    #[test]
    fn full_density_selects_everything() {
        let f = fixture(70, 4, 8, 1);
        let view = f.cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let scale = default_scale(8);
        let mask = build_sparse_mask(0, &f.q, &view, 1.0, 16, scale).unwrap();
        assert_eq!(mask.selected_blocks, vec![0, 1, 2, 3, 4]);
        assert_eq!(mask.selected_ranges(), vec![0..74]);
        let (out, res) = sparse_attention_with_residual(
            &f.q,
            &mask,
            &view,
            None,
            0,
            scale,
            StreamConfig::default(),
        )
        .unwrap();
        assert!(res.is_empty());
        assert!(out.max_abs_diff(&dense(&f, &f.q, scale)).unwrap() < 1e-10);
    }

    #[test]
    fn dominant_block_is_selected() {
        let mut f = fixture(64, 4, 8, 2);
        let scale = default_scale(8);
        // key 37 aligned with every query and very large
        let mut ck = f.cache.read_range(0, 0, 0, 64).unwrap();
        for c in 0..8 {
            ck.0.set(37, c, 0.0);
        }
        for i in 0..4 {
            for c in 0..8 {
                f.q.set(i, c, if c == 0 { 1.0 } else { 0.0 });
            }
        }
        ck.0.set(37, 0, 60.0);
        let mut cache = KvCache::new(1, 1, 8);
        cache.commit_block(0, 0, &ck.0, &ck.1).unwrap();
        let view = cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let mask = build_sparse_mask(0, &f.q, &view, 0.2, 16, scale).unwrap();
        assert!(
            mask.selected_blocks.contains(&2),
            "{:?}",
            mask.selected_blocks
        );

        // budget just under one key block beyond the in-block keys: only the top block
        let density = (4.0 + 15.0) / 68.0;
        let mask = build_sparse_mask(0, &f.q, &view, density, 16, scale).unwrap();
        assert_eq!(mask.selected_blocks, vec![2]);
        assert_eq!(mask.selected_ranges(), vec![32..48, 64..68]);
        assert!(mask.realized_density() <= density + 16.0 / 68.0);
    }

    #[test]
    fn first_step_partition_is_exact() {
        let f = fixture(100, 6, 8, 3);
        let view = f.cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let scale = default_scale(8);
        let oracle = dense(&f, &f.q, scale);
        for density in [0.1, 0.3, 0.55, 0.9] {
            let mask = build_sparse_mask(0, &f.q, &view, density, 16, scale).unwrap();
            let (out, _) = sparse_attention_with_residual(
                &f.q,
                &mask,
                &view,
                None,
                0,
                scale,
                StreamConfig { tile_size: 7 },
            )
            .unwrap();
            assert!(out.max_abs_diff(&oracle).unwrap() < 1e-10);
        }
    }

    #[test]
    fn later_step_reads_only_selected_keys_and_residual_helps() {
        let f = fixture(96, 4, 8, 4);
        let scale = default_scale(8);
        let cfg = StreamConfig::default();
        let view = f.cache.view(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let mask = build_sparse_mask(0, &f.q, &view, 0.3, 16, scale).unwrap();
        let (_, residual) =
            sparse_attention_with_residual(&f.q, &mask, &view, None, 0, scale, cfg).unwrap();

        // the block's tokens move at the next step
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let bk2 = Tensor2D::from_fn(4, 8, |i, c| f.bk.get(i, c) + rng.gen_range(-0.5..0.5));
        let q2 = f.q.map(|x| x + 0.2);
        let view2 = f.cache.view(0, 0, Some((&bk2, &f.bv))).unwrap();
        let before = f.cache.snapshot_counters();
        let (with, _) =
            sparse_attention_with_residual(&q2, &mask, &view2, Some(&residual), 0, scale, cfg)
                .unwrap();
        let delta = f.cache.snapshot_counters().since(&before);
        assert_eq!(delta.key_rows_read as usize, mask.selected_keys());

        let only = sparse_attention_only(&q2, &mask, &view2.uncounted(), 0, scale, cfg).unwrap();
        let oracle = {
            let (k, v) = view2.to_tensors();
            attention_dense(&q2, &k, &v, scale).unwrap()
        };
        let (gap_only, gap_with) = (
            only.mean_abs_diff(&oracle).unwrap(),
            with.mean_abs_diff(&oracle).unwrap(),
        );
        assert!(gap_with <= gap_only, "{gap_with} > {gap_only}");
    }

    #[test]
    fn stale_mask_is_rejected() {
        let f = fixture(32, 4, 8, 5);
        let view = f.cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        let mask = build_sparse_mask(3, &f.q, &view, 0.5, 16, 0.3).unwrap();
        let err = sparse_attention_with_residual(
            &f.q,
            &mask,
            &view,
            None,
            4,
            0.3,
            StreamConfig::default(),
        );
        assert!(matches!(err, Err(Error::StaleMask(_))));
        let shorter = f.cache.view_uncounted(0, 0, None).unwrap();
        let err = sparse_attention_only(&f.q, &mask, &shorter, 3, 0.3, StreamConfig::default());
        assert!(matches!(err, Err(Error::StaleMask(_))));
    }

    #[test]
    fn density_must_be_positive() {
        let f = fixture(16, 2, 4, 6);
        let view = f.cache.view_uncounted(0, 0, Some((&f.bk, &f.bv))).unwrap();
        assert!(build_sparse_mask(0, &f.q, &view, 0.0, 16, 1.0).is_err());
        assert!(build_sparse_mask(0, &f.q, &view, 1.5, 16, 1.0).is_err());
        assert!(build_sparse_mask(0, &f.q, &view, 0.5, 0, 1.0).is_err());
    }
}

//! Block-causal attention split into block-external and block-internal partials.
//!
//! A partial over a key subset `J` stores, per query row, the normalized output
//! `A = U / Z` and the log-normalizer `L = log Z`, where `Z = sum_j exp(s_j)` and
//! `U = sum_j exp(s_j) v_j`. Two partials over disjoint key sets combine exactly:
//!
//! ```text
//! m = max(L_a, L_b)
//! A = (exp(L_a - m) A_a + exp(L_b - m) A_b) / (exp(L_a - m) + exp(L_b - m))
//! L = m + log(exp(L_a - m) + exp(L_b - m))
//! ```
//!
//! Empty key sets are represented by `L = -inf` and short-circuit the merge.

use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::kv_cache::KvSource;
use crate::linalg::{axpy, dot, Scalar, Tensor2D};

pub const DEFAULT_TILE_SIZE: usize = 64;

/// `1 / sqrt(head_dim)`.
pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Normalized attention output and per-row log-normalizer over one key subset.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPartial<T = f64> {
    out: Tensor2D<T>,
    lognorm: Vec<T>,
}

impl<T: Scalar> AttnPartial<T> {
    pub fn new(out: Tensor2D<T>, lognorm: Vec<T>) -> Result<Self> {
        if out.rows() != lognorm.len() {
            return Err(shape_err!(
                "{} output rows but {} log-normalizers",
                out.rows(),
                lognorm.len()
            ));
        }
        Ok(Self { out, lognorm })
    }

    /// Partial over the empty key set: zero output, `-inf` log-normalizer.
    pub fn empty(rows: usize, head_dim: usize) -> Self {
        Self {
            out: Tensor2D::zeros(rows, head_dim),
            lognorm: vec![T::NEG_INFINITY; rows],
        }
    }

    pub fn out(&self) -> &Tensor2D<T> {
        &self.out
    }

    pub fn lognorm(&self) -> &[T] {
        &self.lognorm
    }

    pub fn rows(&self) -> usize {
        self.out.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.out.cols()
    }

    pub fn is_row_empty(&self, row: usize) -> bool {
        self.lognorm[row] == T::NEG_INFINITY
    }

    pub fn is_empty(&self) -> bool {
        self.lognorm.iter().all(|&l| l == T::NEG_INFINITY)
    }

    pub fn into_out(self) -> Tensor2D<T> {
        self.out
    }

    /// Storage for one cached partial: `rows * (head_dim + 1)` scalars.
    pub fn resident_bytes(&self) -> usize {
        self.out.size_bytes() + self.lognorm.len() * T::BYTES
    }

    pub fn cast<U: Scalar>(&self) -> AttnPartial<U> {
        AttnPartial {
            out: self.out.cast(),
            lognorm: self
                .lognorm
                .iter()
                .map(|l| U::from_f64(l.to_f64()))
                .collect(),
        }
    }

    /// Adds `c` to every log-normalizer, as if every score had been shifted by `c`.
    pub fn shift_lognorm(&self, c: T) -> Self {
        Self {
            out: self.out.clone(),
            lognorm: self.lognorm.iter().map(|&l| l + c).collect(),
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.rows() != other.rows() || self.head_dim() != other.head_dim() {
            return Err(shape_err!(
                "partials {}x{} and {}x{}",
                self.rows(),
                self.head_dim(),
                other.rows(),
                other.head_dim()
            ));
        }
        Ok(())
    }

    /// Log-space union of two partials over disjoint key sets. Rows empty on both sides
    /// stay empty.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut combined = Self::empty(self.rows(), self.head_dim());
        for i in 0..self.rows() {
            combined.lognorm[i] = combine_row(
                (self.lognorm[i], self.out.row(i)),
                (other.lognorm[i], other.out.row(i)),
                combined.out.row_mut(i),
            );
        }
        Ok(combined)
    }
}

/// Writes the merged row into `dst` and returns the merged log-normalizer.
fn combine_row<T: Scalar>(a: (T, &[T]), b: (T, &[T]), dst: &mut [T]) -> T {
    let (la, ra) = a;
    let (lb, rb) = b;
    if lb == T::NEG_INFINITY {
        dst.copy_from_slice(ra);
        return la;
    }
    if la == T::NEG_INFINITY {
        dst.copy_from_slice(rb);
        return lb;
    }
    let m = la.max(lb);
    let wa = (la - m).exp();
    let wb = (lb - m).exp();
    let denom = wa + wb;
    for ((d, &x), &y) in dst.iter_mut().zip(ra).zip(rb) {
        *d = (wa * x + wb * y) / denom;
    }
    m + denom.ln()
}

/// Merges an external and an internal partial into the full attention output.
///
/// Fails with [`Error::Degenerate`] if some query row has no keys on either side.
pub fn merge_partials<T: Scalar>(
    external: &AttnPartial<T>,
    internal: &AttnPartial<T>,
) -> Result<Tensor2D<T>> {
    external.check_compatible(internal)?;
    if let Some(i) =
        (0..external.rows()).find(|&i| external.is_row_empty(i) && internal.is_row_empty(i))
    {
        return Err(Error::Degenerate(format!(
            "query row {i} has no keys in either partial"
        )));
    }
    Ok(external.combine(internal)?.into_out())
}

/// Streaming knobs for the tiled kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamConfig {
    pub tile_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

/// Running online-softmax state for one query row.
#[derive(Clone, Debug)]
struct RowAccumulator<T> {
    max: T,
    sum: T,
    acc: Vec<T>,
}

impl<T: Scalar> RowAccumulator<T> {
    fn new(head_dim: usize) -> Self {
        Self {
            max: T::NEG_INFINITY,
            sum: T::ZERO,
            acc: vec![T::ZERO; head_dim],
        }
    }

    fn absorb(&mut self, scores: &[T], values: &[T], keep: impl Fn(usize) -> bool) {
        let d = self.acc.len();
        let tile_max = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .fold(T::NEG_INFINITY, |m, (_, &s)| m.max(s));
        if tile_max == T::NEG_INFINITY {
            return;
        }
        let new_max = self.max.max(tile_max);
        if self.max != T::NEG_INFINITY && new_max > self.max {
            let correction = (self.max - new_max).exp();
            self.sum *= correction;
            for a in &mut self.acc {
                *a *= correction;
            }
        }
        self.max = new_max;
        for (j, &s) in scores.iter().enumerate() {
            if !keep(j) {
                continue;
            }
            let w = (s - new_max).exp();
            self.sum += w;
            axpy(&mut self.acc, w, &values[j * d..(j + 1) * d]);
        }
    }

    fn finalize_into(&self, out: &mut [T]) -> T {
        if self.sum == T::ZERO {
            out.iter_mut().for_each(|o| *o = T::ZERO);
            return T::NEG_INFINITY;
        }
        for (o, &a) in out.iter_mut().zip(&self.acc) {
            *o = a / self.sum;
        }
        self.max + self.sum.ln()
    }

    fn reset(&mut self) {
        self.max = T::NEG_INFINITY;
        self.sum = T::ZERO;
        self.acc.iter_mut().for_each(|a| *a = T::ZERO);
    }
}

fn finalize<T: Scalar>(rows: &[RowAccumulator<T>], head_dim: usize) -> AttnPartial<T> {
    let mut partial = AttnPartial::empty(rows.len(), head_dim);
    for (i, r) in rows.iter().enumerate() {
        partial.lognorm[i] = r.finalize_into(partial.out.row_mut(i));
    }
    partial
}

fn check_query<T: Scalar>(q: &Tensor2D<T>, src: &impl KvSource<T>) -> Result<()> {
    if q.cols() != src.head_dim() {
        return Err(shape_err!(
            "query width {} against key width {}",
            q.cols(),
            src.head_dim()
        ));
    }
    Ok(())
}

fn check_tile(cfg: StreamConfig) -> Result<()> {
    if cfg.tile_size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    Ok(())
}

/// Streams keys `[range)` tile by tile into the per-row accumulators. Each tile is read
/// from the source once and shared by every query row.
fn stream_range<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    range: Range<usize>,
    scale: T,
    cfg: StreamConfig,
    rows: &mut [RowAccumulator<T>],
) -> Result<()> {
    let d = q.cols();
    let mut scores = Vec::with_capacity(cfg.tile_size);
    let mut start = range.start;
    while start < range.end {
        let end = (start + cfg.tile_size).min(range.end);
        let (keys, values) = src.read(start, end)?;
        for (i, row) in rows.iter_mut().enumerate() {
            let qi = q.row(i);
            scores.clear();
            scores.extend(keys.chunks_exact(d).map(|k| dot(qi, k) * scale));
            row.absorb(&scores, &values, |_| true);
        }
        start = end;
    }
    Ok(())
}

/// Attention partial of `q` over the keys in `range`.
pub fn attention_partial<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    range: Range<usize>,
    scale: f64,
    cfg: StreamConfig,
) -> Result<AttnPartial<T>> {
    attention_over_ranges(q, src, std::slice::from_ref(&range), scale, cfg)
}

/// Attention partial of `q` over the union of disjoint key `ranges`. Only rows inside
/// the ranges are read from `src`.
pub fn attention_over_ranges<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    ranges: &[Range<usize>],
    scale: f64,
    cfg: StreamConfig,
) -> Result<AttnPartial<T>> {
    check_query(q, src)?;
    check_tile(cfg)?;
    let mut rows = vec![RowAccumulator::new(q.cols()); q.rows()];
    for r in ranges {
        if r.start > r.end || r.end > src.len() {
            return Err(Error::Bounds(format!(
                "key range {}..{} outside a stream of {}",
                r.start,
                r.end,
                src.len()
            )));
        }
        stream_range(q, src, r.clone(), T::from_f64(scale), cfg, &mut rows)?;
    }
    Ok(finalize(&rows, q.cols()))
}

/// One pass over the key stream producing the external partial (keys before `boundary`)
/// and the internal partial (keys from `boundary` on).
///
/// The accumulators are snapshotted into the external partial the moment the stream
/// reaches `boundary`, then reset for the internal keys; tiles never straddle it.
pub fn attention_streamed<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    scale: f64,
    boundary: usize,
    cfg: StreamConfig,
) -> Result<(AttnPartial<T>, AttnPartial<T>)> {
    check_query(q, src)?;
    check_tile(cfg)?;
    if boundary > src.len() {
        return Err(Error::Bounds(format!(
            "boundary {boundary} beyond a stream of {} keys",
            src.len()
        )));
    }
    let scale = T::from_f64(scale);
    let mut rows = vec![RowAccumulator::new(q.cols()); q.rows()];
    stream_range(q, src, 0..boundary, scale, cfg, &mut rows)?;
    let external = finalize(&rows, q.cols());
    rows.iter_mut().for_each(RowAccumulator::reset);
    stream_range(q, src, boundary..src.len(), scale, cfg, &mut rows)?;
    let internal = finalize(&rows, q.cols());
    Ok((external, internal))
}

/// One pass over all keys, splitting them by membership: `(selected, unselected)`.
pub fn attention_partitioned<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    selected: &[bool],
    scale: f64,
    cfg: StreamConfig,
) -> Result<(AttnPartial<T>, AttnPartial<T>)> {
    check_query(q, src)?;
    check_tile(cfg)?;
    if selected.len() != src.len() {
        return Err(shape_err!(
            "membership mask of {} entries for {} keys",
            selected.len(),
            src.len()
        ));
    }
    let d = q.cols();
    let scale = T::from_f64(scale);
    let mut sel_rows = vec![RowAccumulator::new(d); q.rows()];
    let mut res_rows = vec![RowAccumulator::new(d); q.rows()];
    let mut scores = Vec::with_capacity(cfg.tile_size);
    let mut start = 0;
    while start < src.len() {
        let end = (start + cfg.tile_size).min(src.len());
        let (keys, values) = src.read(start, end)?;
        let member = &selected[start..end];
        for i in 0..q.rows() {
            let qi = q.row(i);
            scores.clear();
            scores.extend(keys.chunks_exact(d).map(|k| dot(qi, k) * scale));
            sel_rows[i].absorb(&scores, &values, |j| member[j]);
            res_rows[i].absorb(&scores, &values, |j| !member[j]);
        }
        start = end;
    }
    Ok((finalize(&sel_rows, d), finalize(&res_rows, d)))
}

/// Exact softmax attention in `f64` with max subtraction. The reference every other
/// path is checked against.
pub fn attention_dense<T: Scalar>(
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    scale: f64,
) -> Result<Tensor2D<f64>> {
    if q.cols() != k.cols() {
        return Err(shape_err!(
            "query width {} against key width {}",
            q.cols(),
            k.cols()
        ));
    }
    if k.rows() != v.rows() {
        return Err(shape_err!("{} keys but {} values", k.rows(), v.rows()));
    }
    let mut out = Tensor2D::<f64>::zeros(q.rows(), v.cols());
    let mut weights = vec![0.0f64; k.rows()];
    for i in 0..q.rows() {
        let qi: Vec<f64> = q.row(i).iter().map(|x| x.to_f64()).collect();
        for (j, w) in weights.iter_mut().enumerate() {
            let kj = k.row(j);
            *w = qi.iter().zip(kj).map(|(a, b)| a * b.to_f64()).sum::<f64>() * scale;
        }
        let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for w in &mut weights {
            *w = (*w - m).exp();
            z += *w;
        }
        let row = out.row_mut(i);
        for (j, &w) in weights.iter().enumerate() {
            for (o, x) in row.iter_mut().zip(v.row(j)) {
                *o += w * x.to_f64();
            }
        }
        row.iter_mut().for_each(|o| *o /= z);
    }
    Ok(out)
}

/// Dense oracle over everything a key source holds. Pass an uncounted source if the
/// read should not show up in access counters.
pub fn attention_dense_source<T: Scalar>(
    q: &Tensor2D<T>,
    src: &impl KvSource<T>,
    scale: f64,
) -> Result<Tensor2D<f64>> {
    let n = src.len();
    let (k, v) = src.read(0, n)?;
    let k = Tensor2D::from_vec(n, src.head_dim(), k.into_owned())?;
    let v = Tensor2D::from_vec(n, src.head_dim(), v.into_owned())?;
    attention_dense(q, &k, &v, scale)
}

/// Cached block-external partial for one (layer, head).
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry<T = f64> {
    pub partial: AttnPartial<T>,
    pub valid: bool,
    pub block_id: usize,
    pub step_created: usize,
}

/// Per-(layer, head) cache of the block-external partial for the block in progress.
#[derive(Clone, Debug)]
pub struct ExternalAttnCache<T = f64> {
    num_layers: usize,
    num_heads: usize,
    entries: Vec<Option<CacheEntry<T>>>,
}

impl<T: Scalar> ExternalAttnCache<T> {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            entries: vec![None; num_layers * num_heads],
        }
    }

    fn slot(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.num_layers || head >= self.num_heads {
            return Err(Error::Bounds(format!(
                "(layer {layer}, head {head}) outside {}x{}",
                self.num_layers, self.num_heads
            )));
        }
        Ok(layer * self.num_heads + head)
    }

    /// Replaces the entry for (layer, head). Entries from another block are refused
    /// until [`ExternalAttnCache::invalidate_all`] has run.
    pub fn store(
        &mut self,
        layer: usize,
        head: usize,
        block_id: usize,
        step: usize,
        partial: AttnPartial<T>,
    ) -> Result<()> {
        let slot = self.slot(layer, head)?;
        if let Some(other) = self.entries.iter().flatten().find(|e| e.valid) {
            if other.block_id != block_id {
                return Err(Error::ReusePrecondition(format!(
                    "cache holds block {} while storing block {block_id}",
                    other.block_id
                )));
            }
            if other.partial.rows() != partial.rows() {
                return Err(shape_err!(
                    "cached partials have {} query rows, new one has {}",
                    other.partial.rows(),
                    partial.rows()
                ));
            }
        }
        self.entries[slot] = Some(CacheEntry {
            partial,
            valid: true,
            block_id,
            step_created: step,
        });
        Ok(())
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&CacheEntry<T>> {
        self.slot(layer, head)
            .ok()
            .and_then(|s| self.entries[s].as_ref())
    }

    /// The entry for (layer, head) if it exists and is valid for `block_id`.
    pub fn valid_entry(
        &self,
        layer: usize,
        head: usize,
        block_id: usize,
    ) -> Option<&CacheEntry<T>> {
        self.get(layer, head)
            .filter(|e| e.valid && e.block_id == block_id)
    }

    /// Drops every entry; called when the block commits.
    pub fn invalidate_all(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    pub fn resident_bytes_for(&self, layer: usize, head: usize) -> usize {
        self.get(layer, head)
            .map_or(0, |e| e.partial.resident_bytes())
    }

    pub fn resident_bytes(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .map(|e| e.partial.resident_bytes())
            .sum()
    }
}

/// Recomputes only the block-internal partial and merges it with the cached external one.
///
/// `internal` must hold exactly the current block's keys and values. Nothing outside of
/// it is read, so committed KV rows are never touched.
pub fn attention_with_reuse<T: Scalar>(
    q: &Tensor2D<T>,
    entry: &CacheEntry<T>,
    internal: &impl KvSource<T>,
    scale: f64,
    cfg: StreamConfig,
) -> Result<(Tensor2D<T>, AttnPartial<T>)> {
    if !entry.valid {
        return Err(Error::ReusePrecondition("cache entry is invalid".into()));
    }
    if entry.partial.rows() != q.rows() || entry.partial.head_dim() != q.cols() {
        return Err(Error::ReusePrecondition(format!(
            "cached partial is {}x{}, queries are {}x{}",
            entry.partial.rows(),
            entry.partial.head_dim(),
            q.rows(),
            q.cols()
        )));
    }
    let refreshed = attention_partial(q, internal, 0..internal.len(), scale, cfg)?;
    let output = merge_partials(&entry.partial, &refreshed)?;
    Ok((output, refreshed))
}

//! Append-only key/value storage for committed blocks, with read/append counters.
//!
//! Rows of the block currently being denoised are not stored here. They live in
//! step-local buffers and are only committed once the block is finished. A [`KvView`]
//! stitches committed rows and the in-progress block into one key stream and charges
//! every row it hands out to the cache's counters, so a step's counter delta is the
//! number of key rows its attention actually touched.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Scalar, Tensor2D};

/// Snapshot of the cache's access counters.
///
/// `key_rows_read` and `value_rows_read` count every row streamed through a counted
/// [`KvView`], including rows of the in-progress block. `committed_rows_read` counts
/// only rows served from committed storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccessCounters {
    pub key_rows_read: u64,
    pub value_rows_read: u64,
    pub committed_rows_read: u64,
    pub rows_appended: u64,
    pub cache_bytes_resident: u64,
}

impl AccessCounters {
    /// Counter increase since `earlier`.
    pub fn since(&self, earlier: &AccessCounters) -> AccessCounters {
        AccessCounters {
            key_rows_read: self.key_rows_read - earlier.key_rows_read,
            value_rows_read: self.value_rows_read - earlier.value_rows_read,
            committed_rows_read: self.committed_rows_read - earlier.committed_rows_read,
            rows_appended: self.rows_appended - earlier.rows_appended,
            cache_bytes_resident: self.cache_bytes_resident - earlier.cache_bytes_resident,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    key_rows_read: AtomicU64,
    value_rows_read: AtomicU64,
    committed_rows_read: AtomicU64,
    rows_appended: AtomicU64,
    cache_bytes_resident: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> AccessCounters {
        AccessCounters {
            key_rows_read: self.key_rows_read.load(Ordering::Acquire),
            value_rows_read: self.value_rows_read.load(Ordering::Acquire),
            committed_rows_read: self.committed_rows_read.load(Ordering::Acquire),
            rows_appended: self.rows_appended.load(Ordering::Acquire),
            cache_bytes_resident: self.cache_bytes_resident.load(Ordering::Acquire),
        }
    }

    fn restore(snapshot: AccessCounters) -> Self {
        Self {
            key_rows_read: AtomicU64::new(snapshot.key_rows_read),
            value_rows_read: AtomicU64::new(snapshot.value_rows_read),
            committed_rows_read: AtomicU64::new(snapshot.committed_rows_read),
            rows_appended: AtomicU64::new(snapshot.rows_appended),
            cache_bytes_resident: AtomicU64::new(snapshot.cache_bytes_resident),
        }
    }

    fn record_read(&self, committed: usize, in_block: usize) {
        let total = (committed + in_block) as u64;
        if total == 0 {
            return;
        }
        self.key_rows_read.fetch_add(total, Ordering::AcqRel);
        self.value_rows_read.fetch_add(total, Ordering::AcqRel);
        if committed > 0 {
            self.committed_rows_read
                .fetch_add(committed as u64, Ordering::AcqRel);
        }
    }
}

#[derive(Clone, Debug, Default)]
struct HeadStore<T> {
    keys: Vec<T>,
    values: Vec<T>,
    rows: usize,
    boundaries: Vec<usize>,
}

#[derive(Debug)]
pub struct KvCache<T = f64> {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    heads: Vec<HeadStore<T>>,
    counters: Counters,
}

impl<T: Scalar> Clone for KvCache<T> {
    fn clone(&self) -> Self {
        Self {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            heads: self.heads.clone(),
            counters: Counters::restore(self.counters.snapshot()),
        }
    }
}

impl<T: Scalar> KvCache<T> {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            heads: vec![HeadStore::default(); num_layers * num_heads],
            counters: Counters::default(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
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

    /// Appends a finished block for one (layer, head) and returns the new committed length.
    pub fn commit_block(
        &mut self,
        layer: usize,
        head: usize,
        keys: &Tensor2D<T>,
        values: &Tensor2D<T>,
    ) -> Result<usize> {
        let slot = self.slot(layer, head)?;
        if keys.rows() != values.rows() {
            return Err(shape_err!(
                "commit with {} key rows but {} value rows",
                keys.rows(),
                values.rows()
            ));
        }
        if keys.cols() != self.head_dim || values.cols() != self.head_dim {
            return Err(shape_err!(
                "commit with widths {}/{}, cache head_dim is {}",
                keys.cols(),
                values.cols(),
                self.head_dim
            ));
        }
        if keys.rows() == 0 {
            return Err(shape_err!("cannot commit an empty block"));
        }
        let store = &mut self.heads[slot];
        store.keys.extend_from_slice(keys.data());
        store.values.extend_from_slice(values.data());
        store.rows += keys.rows();
        store.boundaries.push(store.rows);

        let rows = keys.rows() as u64;
        self.counters
            .rows_appended
            .fetch_add(rows, Ordering::AcqRel);
        self.counters.cache_bytes_resident.fetch_add(
            2 * rows * (self.head_dim * T::BYTES) as u64,
            Ordering::AcqRel,
        );
        Ok(store.rows)
    }

    pub fn committed_len(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.heads[self.slot(layer, head)?].rows)
    }

    pub fn block_boundaries(&self, layer: usize, head: usize) -> Result<&[usize]> {
        Ok(&self.heads[self.slot(layer, head)?].boundaries)
    }

    /// Copies committed rows `[from, to)` and charges them to the read counters.
    pub fn read_range(
        &self,
        layer: usize,
        head: usize,
        from: usize,
        to: usize,
    ) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
        let store = &self.heads[self.slot(layer, head)?];
        if from > to || to > store.rows {
            return Err(Error::Bounds(format!(
                "read {from}..{to} with {} committed rows",
                store.rows
            )));
        }
        let d = self.head_dim;
        let keys = Tensor2D::from_vec(to - from, d, store.keys[from * d..to * d].to_vec())?;
        let values = Tensor2D::from_vec(to - from, d, store.values[from * d..to * d].to_vec())?;
        self.counters.record_read(to - from, 0);
        Ok((keys, values))
    }

    pub fn snapshot_counters(&self) -> AccessCounters {
        self.counters.snapshot()
    }

    /// Counted key stream over the committed rows of (layer, head) followed by `block`.
    pub fn view<'a>(
        &'a self,
        layer: usize,
        head: usize,
        block: Option<(&'a Tensor2D<T>, &'a Tensor2D<T>)>,
    ) -> Result<KvView<'a, T>> {
        let mut view = self.view_uncounted(layer, head, block)?;
        view.counters = Some(&self.counters);
        Ok(view)
    }

    /// Same as [`KvCache::view`] but leaves the counters alone. Used by oracles and probes.
    pub fn view_uncounted<'a>(
        &'a self,
        layer: usize,
        head: usize,
        block: Option<(&'a Tensor2D<T>, &'a Tensor2D<T>)>,
    ) -> Result<KvView<'a, T>> {
        let store = &self.heads[self.slot(layer, head)?];
        let (block_keys, block_values, block_rows): (&[T], &[T], usize) = match block {
            Some((k, v)) => {
                if k.rows() != v.rows() || k.cols() != self.head_dim || v.cols() != self.head_dim {
                    return Err(shape_err!(
                        "block K {}x{} / V {}x{} against head_dim {}",
                        k.rows(),
                        k.cols(),
                        v.rows(),
                        v.cols(),
                        self.head_dim
                    ));
                }
                (k.data(), v.data(), k.rows())
            }
            None => (&[], &[], 0),
        };
        Ok(KvView {
            head_dim: self.head_dim,
            committed: (&store.keys, &store.values),
            committed_rows: store.rows,
            block: (block_keys, block_values),
            block_rows,
            counters: None,
        })
    }
}

/// A key/value stream the attention kernels can read tile by tile.
pub trait KvSource<T: Scalar> {
    /// Total number of key rows.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn head_dim(&self) -> usize;

    /// Key and value rows `[from, to)`, flattened row-major.
    #[allow(clippy::type_complexity)]
    fn read(&self, from: usize, to: usize) -> Result<(Cow<'_, [T]>, Cow<'_, [T]>)>;
}

/// Committed rows followed by the rows of the block being denoised.
#[derive(Clone, Copy, Debug)]
pub struct KvView<'a, T> {
    head_dim: usize,
    committed: (&'a [T], &'a [T]),
    committed_rows: usize,
    block: (&'a [T], &'a [T]),
    block_rows: usize,
    counters: Option<&'a Counters>,
}

impl<'a, T: Scalar> KvView<'a, T> {
    /// Uncounted view over a plain key/value pair, treated as committed rows.
    pub fn from_tensors(keys: &'a Tensor2D<T>, values: &'a Tensor2D<T>) -> Result<Self> {
        if keys.rows() != values.rows() || keys.cols() != values.cols() {
            return Err(shape_err!(
                "K {}x{} vs V {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            ));
        }
        Ok(Self {
            head_dim: keys.cols(),
            committed: (keys.data(), values.data()),
            committed_rows: keys.rows(),
            block: (&[], &[]),
            block_rows: 0,
            counters: None,
        })
    }

    /// Number of committed (block-external) rows; block rows start here.
    pub fn committed_rows(&self) -> usize {
        self.committed_rows
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn is_counted(&self) -> bool {
        self.counters.is_some()
    }

    /// Only the in-progress block rows, keeping the counter attachment. Committed rows
    /// are unreachable through the returned view.
    pub fn block_only(&self) -> Self {
        Self {
            committed: (&[], &[]),
            committed_rows: 0,
            ..*self
        }
    }

    /// Same rows without counting.
    pub fn uncounted(&self) -> Self {
        Self {
            counters: None,
            ..*self
        }
    }

    /// Materializes all keys and values.
    pub fn to_tensors(&self) -> (Tensor2D<T>, Tensor2D<T>) {
        let view = self.uncounted();
        let (k, v) = view.read(0, self.len()).expect("full range is in bounds");
        let n = self.len();
        (
            Tensor2D::from_vec(n, self.head_dim, k.into_owned()).expect("consistent length"),
            Tensor2D::from_vec(n, self.head_dim, v.into_owned()).expect("consistent length"),
        )
    }
}

impl<'a, T: Scalar> KvSource<T> for KvView<'a, T> {
    fn len(&self) -> usize {
        self.committed_rows + self.block_rows
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn read(&self, from: usize, to: usize) -> Result<(Cow<'_, [T]>, Cow<'_, [T]>)> {
        if from > to || to > self.len() {
            return Err(Error::Bounds(format!(
                "read {from}..{to} from a stream of {} rows",
                self.len()
            )));
        }
        let d = self.head_dim;
        let split = self.committed_rows;
        let committed = to.min(split).saturating_sub(from);
        let in_block = (to - from) - committed;
        if let Some(c) = self.counters {
            c.record_read(committed, in_block);
        }
        let rows =
            |(k, v): (&'a [T], &'a [T]), a: usize, b: usize| (&k[a * d..b * d], &v[a * d..b * d]);
        if to <= split {
            let (k, v) = rows(self.committed, from, to);
            Ok((Cow::Borrowed(k), Cow::Borrowed(v)))
        } else if from >= split {
            let (k, v) = rows(self.block, from - split, to - split);
            Ok((Cow::Borrowed(k), Cow::Borrowed(v)))
        } else {
            let (k0, v0) = rows(self.committed, from, split);
            let (k1, v1) = rows(self.block, 0, to - split);
            Ok((Cow::Owned([k0, k1].concat()), Cow::Owned([v0, v1].concat())))
        }
    }
}

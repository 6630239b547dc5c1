//! Per-task FIFO image pools that emit task-homogeneous batches.

use std::collections::{BTreeMap, VecDeque};

use crate::datamodel::Sample;
use crate::error::{Error, Result};

pub const DEFAULT_POOL_CAPACITY: usize = 8;

/// Anything that can be routed to a pool.
pub trait Tasked {
    fn task_id(&self) -> usize;
}

impl Tasked for Sample {
    fn task_id(&self) -> usize {
        self.task_id
    }
}

/// A dataset index tagged with its task, used by the trainer so pools hold
/// cheap handles rather than pixel data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskedIndex {
    pub task_id: usize,
    pub index: usize,
}

impl Tasked for TaskedIndex {
    fn task_id(&self) -> usize {
        self.task_id
    }
}

#[derive(Clone, Debug)]
pub struct ImagePool<T> {
    task_id: usize,
    capacity: usize,
    buffer: VecDeque<T>,
}

impl<T> ImagePool<T> {
    pub fn new(task_id: usize, capacity: usize) -> Self {
        Self {
            task_id,
            capacity,
            buffer: VecDeque::with_capacity(capacity),
        }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }
}

/// Counters for the conservation invariant `fed = emitted + discarded`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub fed: usize,
    pub emitted: usize,
    pub discarded: usize,
}

/// One pool per task id.
#[derive(Clone, Debug)]
pub struct PoolSet<T> {
    pools: BTreeMap<usize, ImagePool<T>>,
    batch_size: usize,
    auto_flush: bool,
    stats: PoolStats,
}

impl<T: Tasked> PoolSet<T> {
    pub fn new(task_ids: impl IntoIterator<Item = usize>, batch_size: usize, capacity: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > capacity {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={capacity} (pool capacity)"
            )));
        }
        let pools = task_ids
            .into_iter()
            .map(|t| (t, ImagePool::new(t, capacity)))
            .collect();
        Ok(Self {
            pools,
            batch_size,
            auto_flush: true,
            stats: PoolStats::default(),
        })
    }

    /// With flushing disabled, pools only accumulate; feeding past capacity
    /// is an error.
    pub fn with_auto_flush(mut self, auto_flush: bool) -> Self {
        self.auto_flush = auto_flush;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn pool(&self, task_id: usize) -> Option<&ImagePool<T>> {
        self.pools.get(&task_id)
    }

    /// Appends `item` to its task pool; once the pool holds a full batch, the
    /// oldest `batch_size` items are dequeued and returned.
    pub fn feed(&mut self, item: T) -> Result<Option<Vec<T>>> {
        let task_id = item.task_id();
        let batch_size = self.batch_size;
        let pool = self.pools.get_mut(&task_id).ok_or_else(|| {
            Error::Registry(format!("no image pool for task id {task_id}"))
        })?;
        if pool.buffer.len() >= pool.capacity {
            return Err(Error::PoolOverflow {
                task_id,
                capacity: pool.capacity,
            });
        }
        pool.buffer.push_back(item);
        self.stats.fed += 1;
        if self.auto_flush && pool.buffer.len() >= batch_size {
            let batch: Vec<T> = pool.buffer.drain(..batch_size).collect();
            debug_assert!(batch.iter().all(|s| s.task_id() == task_id));
            self.stats.emitted += batch.len();
            return Ok(Some(batch));
        }
        Ok(None)
    }

    /// Empties every pool, returning the discarded partial batches.
    pub fn discard_partial(&mut self) -> Vec<T> {
        let mut dropped = Vec::new();
        for pool in self.pools.values_mut() {
            dropped.extend(pool.buffer.drain(..));
        }
        self.stats.discarded += dropped.len();
        dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(task_id: usize, index: usize) -> TaskedIndex {
        TaskedIndex { task_id, index }
    }

    #[test]
    fn fourth_feed_emits_batch() {
        let mut pools = PoolSet::new(0..7, 4, 8).unwrap();
        for i in 0..3 {
            assert!(pools.feed(item(0, i)).unwrap().is_none());
        }
        let batch = pools.feed(item(0, 3)).unwrap().unwrap();
        assert_eq!(batch.iter().map(|b| b.index).collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert!(pools.pool(0).unwrap().is_empty());
    }

    #[test]
    fn interleaved_tasks_stay_homogeneous() {
        let mut pools = PoolSet::new(0..2, 4, 8).unwrap();
        let mut batches = Vec::new();
        for i in 0..16 {
            if let Some(b) = pools.feed(item(i % 2, i)).unwrap() {
                batches.push(b);
            }
        }
        assert_eq!(batches.len(), 4);
        for b in batches {
            assert!(b.iter().all(|s| s.task_id == b[0].task_id));
        }
    }

    #[test]
    fn capacity_guard_without_flush() {
        let mut pools = PoolSet::new([0], 4, 8).unwrap().with_auto_flush(false);
        for i in 0..8 {
            assert!(pools.feed(item(0, i)).unwrap().is_none());
        }
        assert!(matches!(
            pools.feed(item(0, 8)),
            Err(Error::PoolOverflow { task_id: 0, capacity: 8 })
        ));
    }

    #[test]
    fn unknown_task_and_bad_batch_size() {
        let mut pools = PoolSet::new(0..2, 4, 8).unwrap();
        assert!(matches!(pools.feed(item(5, 0)), Err(Error::Registry(_))));
        assert!(PoolSet::<TaskedIndex>::new(0..2, 9, 8).is_err());
    }

    #[test]
    fn discard_counts_are_conserved() {
        let mut pools = PoolSet::new(0..3, 4, 8).unwrap();
        for i in 0..11 {
            let _ = pools.feed(item(i % 3, i)).unwrap();
        }
        let dropped = pools.discard_partial();
        let s = pools.stats();
        assert_eq!(s.fed, s.emitted + s.discarded);
        assert_eq!(dropped.len(), s.discarded);
    }
}

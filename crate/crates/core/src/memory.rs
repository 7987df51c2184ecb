//! Episodic memory: one FIFO ring buffer per task, uniform replay sampling.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::container::{to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{CONTAINER_MAGIC, CONTAINER_VERSION};
use crate::numerics::Matrix;
use crate::TaskId;

const KIND_MEMORY: u32 = 2;

/// One stored example. `id` is the example's stream identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
    pub task: TaskId,
}

#[derive(Debug, Clone, PartialEq)]
struct TaskBuffer {
    classes: Range<usize>,
    items: VecDeque<MemoryItem>,
    written: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    capacity: usize,
    tasks: BTreeMap<TaskId, TaskBuffer>,
}

impl EpisodicMemory {
    /// `capacity` is the per-task budget.
    pub fn new(capacity: usize) -> Self {
        Self { capacity, tasks: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Declares a task and its global class range.
    pub fn register_task(&mut self, task: TaskId, classes: Range<usize>) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        self.tasks.insert(task, TaskBuffer { classes, items: VecDeque::new(), written: 0 });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(|b| b.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_len(&self, task: TaskId) -> usize {
        self.tasks.get(&task).map_or(0, |b| b.items.len())
    }

    /// Total items ever written for a task, evicted ones included.
    pub fn written(&self, task: TaskId) -> u64 {
        self.tasks.get(&task).map_or(0, |b| b.written)
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Appends items to their tasks' buffers, evicting the oldest on overflow.
    /// Nothing is written if any item is invalid.
    pub fn write_batch(&mut self, items: impl IntoIterator<Item = MemoryItem>) -> Result<()> {
        let items: Vec<MemoryItem> = items.into_iter().collect();
        for item in &items {
            let buf = self.tasks.get(&item.task).ok_or(Error::UnknownTask(item.task))?;
            if !buf.classes.contains(&item.y) {
                return Err(Error::LabelOutOfRange { label: item.y, classes: buf.classes.end });
            }
        }
        for item in items {
            let buf = self.tasks.get_mut(&item.task).expect("validated above");
            buf.written += 1;
            if self.capacity == 0 {
                continue;
            }
            if buf.items.len() == self.capacity {
                buf.items.pop_front();
            }
            buf.items.push_back(item);
        }
        Ok(())
    }

    /// Up to `k` distinct items drawn uniformly from all buffers.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<MemoryItem>> {
        if k == 0 {
            return Err(Error::InvalidArgument("replay sample size must be at least 1".into()));
        }
        let total = self.len();
        if total == 0 {
            return Ok(Vec::new());
        }
        let picks = rand::seq::index::sample(rng, total, k.min(total));
        let flat: Vec<&MemoryItem> = self.iter().collect();
        Ok(picks.into_iter().map(|i| flat[i].clone()).collect())
    }

    /// Items in write order per task, tasks in id order.
    pub fn iter(&self) -> impl Iterator<Item = &MemoryItem> {
        self.tasks.values().flat_map(|b| b.items.iter())
    }

    pub fn all_items(&self) -> Vec<MemoryItem> {
        self.iter().cloned().collect()
    }

    /// Stacks item inputs into a matrix, in the given order.
    pub fn stack_inputs(items: &[MemoryItem]) -> Result<Matrix> {
        Matrix::from_rows(&items.iter().map(|i| i.x.as_slice()).collect::<Vec<_>>())
    }

    /// Dumps the buffers in the shared binary container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d_in = self.iter().next().map_or(0, |i| i.x.len());
        let mut w = ByteWriter::new();
        w.bytes(&CONTAINER_MAGIC).u32(CONTAINER_VERSION).u32(KIND_MEMORY);
        w.u32(to_u32(self.capacity, "capacity")?).u32(to_u32(d_in, "input width")?);
        w.u32(to_u32(self.tasks.len(), "task count")?);
        for (&task, buf) in &self.tasks {
            w.u32(task)
                .u32(to_u32(buf.classes.start, "class")?)
                .u32(to_u32(buf.classes.end, "class")?)
                .u64(buf.written)
                .u32(to_u32(buf.items.len(), "item count")?);
            for item in &buf.items {
                if item.x.len() != d_in {
                    return Err(Error::shape("memory dump", (1, d_in), (1, item.x.len())));
                }
                w.u64(item.id).u32(to_u32(item.y, "label")?).f64s(&item.x);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CONTAINER_MAGIC)?;
        r.version(CONTAINER_VERSION)?;
        let kind = r.u32()?;
        if kind != KIND_MEMORY {
            return Err(Error::Malformed(format!("container kind {kind} is not a memory dump")));
        }
        let capacity = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let mut mem = EpisodicMemory::new(capacity);
        for _ in 0..r.u32()? {
            let task = r.u32()?;
            let classes = r.u32()? as usize..r.u32()? as usize;
            let written = r.u64()?;
            let count = r.u32()? as usize;
            if count > capacity {
                return Err(Error::Malformed(format!("task {task} holds {count} > {capacity} items")));
            }
            mem.register_task(task, classes.clone())?;
            let mut items = VecDeque::with_capacity(count);
            for _ in 0..count {
                let id = r.u64()?;
                let y = r.u32()? as usize;
                if !classes.contains(&y) {
                    return Err(Error::LabelOutOfRange { label: y, classes: classes.end });
                }
                items.push_back(MemoryItem { id, x: r.f64s(d_in)?, y, task });
            }
            let buf = mem.tasks.get_mut(&task).expect("just registered");
            buf.items = items;
            buf.written = written;
        }
        r.finish()?;
        Ok(mem)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

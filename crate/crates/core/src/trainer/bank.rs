use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::encoder::VideoDescriptor;
use crate::error::{Error, Result};
use crate::matrix::norm;

/// Fixed-capacity FIFO of video descriptors used as constant negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    store: VecDeque<VideoDescriptor>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("memory bank capacity must be positive".into()));
        }
        Ok(Self { capacity, store: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &VideoDescriptor> {
        self.store.iter()
    }

    /// Appends descriptors, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, descriptors: impl IntoIterator<Item = VideoDescriptor>) -> Result<()> {
        for d in descriptors {
            if (norm(d.as_slice()) - 1.0).abs() > 1e-6 {
                return Err(Error::MalformedInput(format!(
                    "bank entries must be unit norm, got norm {}",
                    norm(d.as_slice())
                )));
            }
            if self.store.len() == self.capacity {
                self.store.pop_front();
            }
            self.store.push_back(d);
        }
        Ok(())
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.store.iter().map(|d| d.as_slice().to_vec()).collect()
    }
}

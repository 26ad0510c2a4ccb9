use std::sync::{Arc, Mutex, MutexGuard};

use crate::protocol::ClientId;

#[derive(Debug)]
struct Inner {
    data: Vec<f32>,
    resizes: u64,
}

/// A client's preallocated exchange area, shared with an in-process executor.
///
/// The client writes request rows at the front; the executor reads them and
/// writes its output rows back in their place. Capacity only grows.
#[derive(Debug, Clone)]
pub struct SharedBuffer {
    owner: ClientId,
    inner: Arc<Mutex<Inner>>,
}

impl SharedBuffer {
    /// `capacity` in floats; a client sizes it as
    /// `batch × seq × max(d_in, d_out)` over all base layers.
    pub fn new(owner: ClientId, capacity: usize) -> Self {
        Self {
            owner,
            inner: Arc::new(Mutex::new(Inner {
                data: vec![0.0; capacity],
                resizes: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn owner(&self) -> ClientId {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.lock().data.len()
    }

    pub fn resizes(&self) -> u64 {
        self.lock().resizes
    }

    pub fn nbytes(&self) -> u64 {
        (self.capacity() * 4) as u64
    }

    /// Grows to exactly `required` floats if the current capacity is smaller.
    /// Returns whether a resize happened.
    pub fn ensure(&self, required: usize) -> bool {
        let mut g = self.lock();
        if g.data.len() >= required {
            return false;
        }
        g.data.resize(required, 0.0);
        g.resizes += 1;
        true
    }

    /// Writes `src` at the front. Panics if it does not fit; callers size the
    /// buffer with [`SharedBuffer::ensure`] first.
    pub fn write(&self, src: &[f32]) {
        let mut g = self.lock();
        assert!(src.len() <= g.data.len(), "shared buffer overflow");
        g.data[..src.len()].copy_from_slice(src);
    }

    pub fn with_slice<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.lock().data)
    }

    pub fn read(&self, len: usize) -> Vec<f32> {
        self.lock().data[..len].to_vec()
    }

    pub fn same_buffer(&self, other: &SharedBuffer) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grows_exactly_and_never_shrinks() {
        let b = SharedBuffer::new(1, 8);
        assert!(!b.ensure(4));
        assert_eq!(b.capacity(), 8);
        assert!(b.ensure(13));
        assert_eq!(b.capacity(), 13);
        assert!(!b.ensure(13));
        assert!(!b.ensure(2));
        assert_eq!(b.capacity(), 13);
        assert_eq!(b.resizes(), 1);
    }

    #[test]
    fn clones_share_storage() {
        let a = SharedBuffer::new(1, 4);
        let b = a.clone();
        a.write(&[1.0, 2.0]);
        assert_eq!(b.read(2), vec![1.0, 2.0]);
        assert!(a.same_buffer(&b));
        assert!(!a.same_buffer(&SharedBuffer::new(1, 4)));
    }
}

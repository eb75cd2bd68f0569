//! Fixed-capacity rehearsal memory maintained by reservoir sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, StreamBatch};
use crate::error::{CvtError, Result};

/// Raw images and labels replayed from memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBatch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    /// Buffer slots the rows were drawn from.
    pub slots: Vec<usize>,
}

impl MemoryBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    images: ImageBatch,
    labels: Vec<usize>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            capacity,
            images: ImageBatch::new(channels, height, width),
            labels: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of stream examples offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    /// Offers one example: stored while there is room, afterwards it replaces
    /// a uniformly chosen slot with probability `capacity / seen`.
    pub fn offer(&mut self, image: &[u8], label: usize) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.labels.len() < self.capacity {
            self.images.push(image);
            self.labels.push(label);
            return;
        }
        let j = self.rng.random_range(0..self.seen);
        if j < self.capacity as u64 {
            let slot = j as usize;
            self.images.set(slot, image);
            self.labels[slot] = label;
        }
    }

    /// Offers every example of a stream batch in order.
    pub fn reservoir_update(&mut self, batch: &StreamBatch) {
        for (i, &label) in batch.labels.iter().enumerate() {
            self.offer(batch.images.image(i), label);
        }
    }

    /// Uniform sample without replacement of `min(size, len)` stored items.
    pub fn sample(&mut self, size: usize) -> MemoryBatch {
        let k = size.min(self.len());
        let slots: Vec<usize> = if k == 0 {
            Vec::new()
        } else {
            rand::seq::index::sample(&mut self.rng, self.labels.len(), k).into_vec()
        };
        let mut images = ImageBatch::new(self.images.channels, self.images.height, self.images.width);
        let mut labels = Vec::with_capacity(k);
        for &s in &slots {
            images.push(self.images.image(s));
            labels.push(self.labels[s]);
        }
        MemoryBatch { images, labels, slots }
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            seen: self.seen,
            channels: self.images.channels,
            height: self.images.height,
            width: self.images.width,
            labels: self.labels.clone(),
            pixels: self.images.pixels().to_vec(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(s: &BufferSnapshot) -> Result<Self> {
        let mut images = ImageBatch::new(s.channels, s.height, s.width);
        let per = images.image_len();
        if per == 0 || s.pixels.len() != per * s.labels.len() || s.labels.len() > s.capacity {
            return Err(CvtError::Checkpoint("inconsistent buffer snapshot".into()));
        }
        for chunk in s.pixels.chunks(per) {
            images.push(chunk);
        }
        let mut rng = ChaCha8Rng::from_seed(s.rng_seed);
        rng.set_stream(s.rng_stream);
        rng.set_word_pos(s.rng_word_pos);
        Ok(Self {
            capacity: s.capacity,
            images,
            labels: s.labels.clone(),
            seen: s.seen,
            rng,
        })
    }
}

/// Everything needed to resume a buffer exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub seen: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    #[serde(skip)]
    pub pixels: Vec<u8>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offer_ids(buf: &mut MemoryBuffer, ids: std::ops::Range<u8>) {
        for id in ids {
            buf.offer(&[id], id as usize);
        }
    }

    #[test]
    fn fill_phase_stores_everything() {
        let mut buf = MemoryBuffer::new(5, 1, 1, 1, 0);
        offer_ids(&mut buf, 0..5);
        assert_eq!(buf.labels(), &[0, 1, 2, 3, 4]);
        assert_eq!(buf.seen(), 5);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut buf = MemoryBuffer::new(0, 1, 1, 1, 0);
        offer_ids(&mut buf, 0..100);
        assert!(buf.is_empty());
        assert_eq!(buf.seen(), 100);
        assert!(buf.sample(10).is_empty());
    }

    #[test]
    fn size_tracks_min_of_seen_and_capacity() {
        let mut buf = MemoryBuffer::new(7, 1, 1, 1, 3);
        for n in 1..=40u8 {
            buf.offer(&[n], n as usize);
            assert_eq!(buf.len(), (n as usize).min(7));
        }
    }

    #[test]
    fn oversized_sample_returns_every_item_once() {
        let mut buf = MemoryBuffer::new(6, 1, 1, 1, 1);
        offer_ids(&mut buf, 0..6);
        let mut got = buf.sample(50).labels;
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn snapshot_resumes_identically() {
        let mut a = MemoryBuffer::new(4, 1, 1, 1, 11);
        offer_ids(&mut a, 0..30);
        let mut b = MemoryBuffer::restore(&a.snapshot()).unwrap();
        offer_ids(&mut a, 30..60);
        offer_ids(&mut b, 30..60);
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.sample(3), b.sample(3));
    }
}

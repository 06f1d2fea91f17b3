//! Paired support set: a bounded queue of frozen feature pairs with
//! nearest-neighbour and cross-modal neighbour retrieval.
//!
//! Image and text vectors enter and leave in lockstep; capacity counts pairs.
//! Retrieval scans the queue front to back, so distance ties resolve to the
//! oldest entry.

use crate::bank::{FeatureBank, Modality};
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, FeatureBatch};
use crate::seeding::seeded_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// One stored pair of frozen teacher vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub sample_id: u64,
    pub image_vector: Vec<f64>,
    pub text_vector: Vec<f64>,
}

/// Replacement policy applied by [`PairedSupportSet::update`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStrategy {
    /// Append new pairs, evict the oldest beyond capacity.
    Fifo,
    /// Once full, each new pair overwrites a uniformly chosen slot.
    Random,
}

impl UpdateStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateStrategy::Fifo => "fifo",
            UpdateStrategy::Random => "random",
        }
    }
}

impl std::str::FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(UpdateStrategy::Fifo),
            "random" => Ok(UpdateStrategy::Random),
            other => Err(Error::Parameter(format!("unknown update strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairedSupportSet {
    capacity: usize,
    image_dim: usize,
    text_dim: usize,
    strategy: UpdateStrategy,
    entries: VecDeque<SupportEntry>,
    // Contiguous copies of the two vector columns in queue order, kept in
    // sync by every mutation; scans read these instead of per-entry heap
    // allocations.
    flat_image: Vec<f64>,
    flat_text: Vec<f64>,
    rng: ChaCha8Rng,
}

impl PairedSupportSet {
    /// Seeds the set with pairs sampled uniformly without replacement from two
    /// banks that must cover identical id sets.
    ///
    /// At most `capacity` pairs are taken; if capacity covers the banks, every
    /// pair is present exactly once. The sampled order becomes queue order.
    pub fn init_from_banks(
        image_bank: &FeatureBank,
        text_bank: &FeatureBank,
        capacity: usize,
        strategy: UpdateStrategy,
        seed: u64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("support set capacity must be positive".into()));
        }
        if image_bank.is_empty() {
            return Err(Error::Empty("cannot seed a support set from empty banks".into()));
        }
        let image_ids = image_bank.ids();
        let text_ids = text_bank.ids();
        if image_ids != text_ids {
            return Err(Error::Config(format!(
                "banks cover different id sets ({} image ids vs {} text ids)",
                image_ids.len(),
                text_ids.len()
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut ids = image_ids;
        let take = capacity.min(ids.len());
        // Partial Fisher-Yates: the first `take` slots become the sample.
        for i in 0..take {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        let mut entries = VecDeque::with_capacity(capacity.min(ids.len()));
        for &id in ids.iter().take(take) {
            entries.push_back(SupportEntry {
                sample_id: id,
                image_vector: image_bank.get(id).expect("id came from this bank").to_vec(),
                text_vector: text_bank.get(id).expect("id sets match").to_vec(),
            });
        }
        let mut set = Self {
            capacity,
            image_dim: image_bank.dim(),
            text_dim: text_bank.dim(),
            strategy,
            entries,
            flat_image: Vec::new(),
            flat_text: Vec::new(),
            rng,
        };
        set.rebuild_flat();
        Ok(set)
    }

    fn rebuild_flat(&mut self) {
        self.flat_image.clear();
        self.flat_text.clear();
        for e in &self.entries {
            self.flat_image.extend_from_slice(&e.image_vector);
            self.flat_text.extend_from_slice(&e.text_vector);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> UpdateStrategy {
        self.strategy
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &SupportEntry> {
        self.entries.iter()
    }

    /// Admits a batch of pairs under the configured replacement policy.
    pub fn update(&mut self, batch: Vec<SupportEntry>) -> Result<()> {
        for e in &batch {
            if e.image_vector.len() != self.image_dim || e.text_vector.len() != self.text_dim {
                return Err(Error::Shape(format!(
                    "entry {} has dims {}x{}, set expects {}x{}",
                    e.sample_id,
                    e.image_vector.len(),
                    e.text_vector.len(),
                    self.image_dim,
                    self.text_dim
                )));
            }
        }
        match self.strategy {
            UpdateStrategy::Fifo => {
                for e in batch {
                    self.entries.push_back(e);
                }
                while self.entries.len() > self.capacity {
                    self.entries.pop_front();
                }
            }
            UpdateStrategy::Random => {
                for e in batch {
                    if self.entries.len() < self.capacity {
                        self.entries.push_back(e);
                    } else {
                        let slot = self.rng.gen_range(0..self.capacity);
                        self.entries[slot] = e;
                    }
                }
            }
        }
        self.rebuild_flat();
        Ok(())
    }

    fn flat_for(&self, modality: Modality) -> (&[f64], usize) {
        match modality {
            Modality::Image => (&self.flat_image, self.image_dim),
            Modality::Text => (&self.flat_text, self.text_dim),
        }
    }

    fn check_query(&self, query: &[f64], modality: Modality) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Empty("retrieval from an empty support set".into()));
        }
        let expected = match modality {
            Modality::Image => self.image_dim,
            Modality::Text => self.text_dim,
        };
        if query.len() != expected {
            return Err(Error::Shape(format!(
                "query has length {}, {} vectors have length {expected}",
                query.len(),
                modality.as_str()
            )));
        }
        Ok(())
    }

    /// Entry whose vector in `modality` minimizes L2 distance to `query`.
    /// Ties go to the entry that has been in the queue longest.
    pub fn nn_retrieve(&self, query: &[f64], modality: Modality) -> Result<&SupportEntry> {
        self.check_query(query, modality)?;
        let (flat, dim) = self.flat_for(modality);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (pos, row) in flat.chunks_exact(dim).enumerate() {
            let d = squared_distance(query, row);
            if d < best_dist {
                best_dist = d;
                best = pos;
            }
        }
        Ok(&self.entries[best])
    }

    /// Nearest entry for every row of `queries` at once.
    ///
    /// Bit-identical to calling [`Self::nn_retrieve`] per row (same distances,
    /// same oldest-wins tie rule); the queue is walked in cache-sized blocks
    /// shared across the whole batch instead of once per query.
    pub fn nn_retrieve_batch(
        &self,
        queries: &FeatureBatch,
        modality: Modality,
    ) -> Result<Vec<&SupportEntry>> {
        if queries.rows() == 0 {
            return Ok(Vec::new());
        }
        self.check_query(queries.row(0), modality)?;
        let (flat, dim) = self.flat_for(modality);
        let n = queries.rows();
        let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); n];
        const BLOCK: usize = 32;
        let mut base = 0usize;
        for block in flat.chunks(BLOCK * dim) {
            for (q, b) in (0..n).map(|i| queries.row(i)).zip(best.iter_mut()) {
                for (j, row) in block.chunks_exact(dim).enumerate() {
                    let d = squared_distance(q, row);
                    if d < b.0 {
                        *b = (d, base + j);
                    }
                }
            }
            base += block.len() / dim;
        }
        Ok(best.iter().map(|&(_, pos)| &self.entries[pos]).collect())
    }

    /// Uniform draw among the `k` nearest entries (fewer when the set is
    /// smaller). `k = 1` is exactly [`Self::nn_retrieve`] and consumes no
    /// randomness.
    pub fn topk_sample(
        &self,
        query: &[f64],
        modality: Modality,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<&SupportEntry> {
        if k == 0 {
            return Err(Error::Parameter("top-k sampling needs k >= 1".into()));
        }
        if k == 1 {
            return self.nn_retrieve(query, modality);
        }
        self.check_query(query, modality)?;
        let (flat, dim) = self.flat_for(modality);
        // Small sorted buffer of (distance, position); lexicographic order
        // keeps ties resolved toward older entries.
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (pos, row) in flat.chunks_exact(dim).enumerate() {
            let d = squared_distance(query, row);
            if top.len() < k || (d, pos) < *top.last().expect("non-empty") {
                let at = top.partition_point(|probe| *probe < (d, pos));
                top.insert(at, (d, pos));
                if top.len() > k {
                    top.pop();
                }
            }
        }
        let pick = rng.gen_range(0..top.len());
        Ok(&self.entries[top[pick].1])
    }

    /// Cross-modal neighbour: to guide the `target` modality of a frozen pair,
    /// the *other* modality's vector queries its own side of the queue and the
    /// matched entry is returned whole.
    pub fn xnn_retrieve(
        &self,
        frozen_image: &[f64],
        frozen_text: &[f64],
        target: Modality,
    ) -> Result<&SupportEntry> {
        match target {
            Modality::Image => self.nn_retrieve(frozen_text, Modality::Text),
            Modality::Text => self.nn_retrieve(frozen_image, Modality::Image),
        }
    }

    /// Top-k variant of [`Self::xnn_retrieve`].
    pub fn xnn_topk_sample(
        &self,
        frozen_image: &[f64],
        frozen_text: &[f64],
        target: Modality,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<&SupportEntry> {
        match target {
            Modality::Image => self.topk_sample(frozen_text, Modality::Text, k, rng),
            Modality::Text => self.topk_sample(frozen_image, Modality::Image, k, rng),
        }
    }
}

use std::collections::{BTreeSet, VecDeque};

use super::masking::TokenBatch;
use crate::error::{CalmError, Result};

/// Bounded FIFO of batches retained from earlier domains.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    batches: VecDeque<TokenBatch>,
    capacity: usize,
    source_domains: BTreeSet<String>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { batches: VecDeque::with_capacity(capacity), capacity, source_domains: BTreeSet::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn source_domains(&self) -> &BTreeSet<String> {
        &self.source_domains
    }

    /// Store the first `n` batches of `source`, evicting the oldest held
    /// batches once the buffer is full.
    pub fn fill(&mut self, source: impl IntoIterator<Item = TokenBatch>, n: usize) -> Result<()> {
        if n > self.capacity {
            return Err(CalmError::contract(format!(
                "cannot fill {n} batches into a replay buffer of capacity {}",
                self.capacity
            )));
        }
        let mut taken = 0;
        for batch in source.into_iter().take(n) {
            if self.batches.len() == self.capacity {
                self.batches.pop_front();
            }
            self.source_domains.insert(batch.domain_id.clone());
            self.batches.push_back(batch);
            taken += 1;
        }
        if taken < n {
            return Err(CalmError::InsufficientData(format!("replay source yielded {taken} of {n} batches")));
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&TokenBatch> {
        self.batches.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenBatch> {
        self.batches.iter()
    }

    /// Errors if any held batch comes from `domain_id`.
    pub fn check_disjoint_from(&self, domain_id: &str) -> Result<()> {
        if self.source_domains.contains(domain_id) {
            return Err(CalmError::contract(format!(
                "replay buffer holds batches from the current training domain `{domain_id}`"
            )));
        }
        Ok(())
    }
}

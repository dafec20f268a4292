//! Paged KV-cache block pool with all-or-nothing allocation.
//!
//! A request acquires its whole working set atomically or not at all, so a
//! saturated pool can never strand requests each holding part of what
//! another needs. Placement picks the longest free runs first (lowest start
//! index on ties) to keep block sets contiguous and coalescing-friendly.

use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("request {0} already holds blocks")]
    AlreadyAllocated(u64),
    #[error("requested {requested} blocks but the pool only has {total}")]
    ImpossibleDemand { requested: u64, total: u64 },
    #[error("allocation size must be > 0")]
    ZeroBlocks,
    #[error("request {0} holds no allocation")]
    NoAllocation(u64),
}

/// Result of a transient allocation attempt. `Unavailable` leaves the pool
/// untouched and is retryable; hard errors are not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocOutcome {
    Allocated(Allocation),
    Unavailable,
}

/// Blocks owned by one request, in allocation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub request_id: u64,
    pub block_ids: Vec<u64>,
}

/// Blocks needed to hold `token_count` tokens: ceiling division.
pub fn blocks_needed(token_count: u64, block_tokens: u64) -> u64 {
    assert!(block_tokens > 0, "block_tokens must be > 0");
    token_count.div_ceil(block_tokens)
}

/// Fixed-size pool of KV-cache blocks with per-request ownership.
#[derive(Debug, Clone)]
pub struct BlockPool {
    total_blocks: u64,
    block_tokens: u64,
    /// maximal free runs, keyed by start index
    free_runs: BTreeMap<u64, u64>,
    /// request id -> owned blocks, in allocation order
    owned: BTreeMap<u64, Vec<u64>>,
    free_count: u64,
}

impl BlockPool {
    pub fn new(total_blocks: u64, block_tokens: u64) -> Self {
        assert!(total_blocks > 0, "pool must have blocks");
        assert!(block_tokens > 0, "block_tokens must be > 0");
        let mut free_runs = BTreeMap::new();
        free_runs.insert(0, total_blocks);
        BlockPool {
            total_blocks,
            block_tokens,
            free_runs,
            owned: BTreeMap::new(),
            free_count: total_blocks,
        }
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn block_tokens(&self) -> u64 {
        self.block_tokens
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_count
    }

    pub fn owner_count(&self) -> usize {
        self.owned.len()
    }

    pub fn blocks_of(&self, request_id: u64) -> Option<&[u64]> {
        self.owned.get(&request_id).map(|v| v.as_slice())
    }

    /// Free runs ordered by preference: longest first, lowest start on ties.
    fn runs_by_preference(&self) -> Vec<(u64, u64)> {
        let mut runs: Vec<(u64, u64)> = self.free_runs.iter().map(|(&s, &l)| (s, l)).collect();
        runs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        runs
    }

    fn take_from_run(&mut self, start: u64, take: u64) {
        let len = self.free_runs.remove(&start).expect("run exists");
        debug_assert!(take <= len);
        if take < len {
            self.free_runs.insert(start + take, len - take);
        }
        self.free_count -= take;
    }

    fn insert_free_block(&mut self, block: u64) {
        // merge with the run ending at `block` and/or starting at `block+1`
        let mut start = block;
        let mut len = 1u64;
        if let Some((&prev_start, &prev_len)) = self.free_runs.range(..block).next_back() {
            if prev_start + prev_len == block {
                self.free_runs.remove(&prev_start);
                start = prev_start;
                len += prev_len;
            }
        }
        if let Some(&next_len) = self.free_runs.get(&(block + 1)) {
            self.free_runs.remove(&(block + 1));
            len += next_len;
        }
        self.free_runs.insert(start, len);
        self.free_count += 1;
    }

    /// Atomically allocate exactly `n` blocks for `request_id`, or leave the
    /// pool unchanged and report `Unavailable`.
    ///
    /// Demand exceeding the pool size is a permanent error, distinct from a
    /// transient shortage, so callers can reject instead of queueing forever.
    pub fn allocate_all_or_nothing(
        &mut self,
        request_id: u64,
        n: u64,
    ) -> Result<AllocOutcome, PoolError> {
        if n == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        if n > self.total_blocks {
            return Err(PoolError::ImpossibleDemand {
                requested: n,
                total: self.total_blocks,
            });
        }
        if self.owned.contains_key(&request_id) {
            return Err(PoolError::AlreadyAllocated(request_id));
        }
        if n > self.free_count {
            return Ok(AllocOutcome::Unavailable);
        }

        let mut chosen = Vec::with_capacity(n as usize);
        let mut remaining = n;
        for (start, len) in self.runs_by_preference() {
            if remaining == 0 {
                break;
            }
            let take = remaining.min(len);
            chosen.extend(start..start + take);
            self.take_from_run(start, take);
            remaining -= take;
        }
        debug_assert_eq!(remaining, 0);
        self.owned.insert(request_id, chosen.clone());
        Ok(AllocOutcome::Allocated(Allocation {
            request_id,
            block_ids: chosen,
        }))
    }

    /// Append one block to an existing allocation (decode-side growth).
    pub fn allocate_append(&mut self, request_id: u64) -> Result<AllocOutcome, PoolError> {
        if !self.owned.contains_key(&request_id) {
            return Err(PoolError::NoAllocation(request_id));
        }
        if self.free_count == 0 {
            return Ok(AllocOutcome::Unavailable);
        }
        let (start, _) = self.runs_by_preference()[0];
        self.take_from_run(start, 1);
        self.owned.get_mut(&request_id).unwrap().push(start);
        Ok(AllocOutcome::Allocated(Allocation {
            request_id,
            block_ids: vec![start],
        }))
    }

    /// Return every block owned by `request_id` to the free set. Unknown
    /// requests release nothing; the call is idempotent.
    pub fn release(&mut self, request_id: u64) -> u64 {
        let Some(blocks) = self.owned.remove(&request_id) else {
            return 0;
        };
        let released = blocks.len() as u64;
        for b in blocks {
            self.insert_free_block(b);
        }
        released
    }

    /// Free + owned must partition the pool; used by tests and the oracle
    /// runner after every mutation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = vec![false; self.total_blocks as usize];
        let mut free_total = 0u64;
        let mut last_end: Option<u64> = None;
        for (&start, &len) in &self.free_runs {
            if len == 0 {
                return Err(format!("empty free run at {start}"));
            }
            if let Some(end) = last_end {
                if start <= end {
                    return Err(format!("free runs overlap or touch at {start}"));
                }
                if start == end {
                    return Err(format!("unmerged adjacent free runs at {start}"));
                }
            }
            last_end = Some(start + len);
            for b in start..start + len {
                if b >= self.total_blocks {
                    return Err(format!("free block {b} out of range"));
                }
                if seen[b as usize] {
                    return Err(format!("block {b} counted twice"));
                }
                seen[b as usize] = true;
                free_total += 1;
            }
        }
        if free_total != self.free_count {
            return Err(format!(
                "free count {} != enumerated {}",
                self.free_count, free_total
            ));
        }
        for (req, blocks) in &self.owned {
            if blocks.is_empty() {
                return Err(format!("request {req} owns an empty block list"));
            }
            for &b in blocks {
                if b >= self.total_blocks {
                    return Err(format!("owned block {b} out of range"));
                }
                if seen[b as usize] {
                    return Err(format!("block {b} has two owners"));
                }
                seen[b as usize] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("some blocks are neither free nor owned".to_string());
        }
        Ok(())
    }
}

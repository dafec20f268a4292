//! Brute-force reference implementations used to cross-check the fast
//! paths: per-element offset enumeration, maximal bi-contiguous run finding,
//! a single-threaded verb-log interpreter, and a set-based allocator model.
//!
//! Everything here is deliberately written the slow, obvious way and shares
//! no code with the implementations it checks. The `oracle` CLI subcommand
//! runs these against randomized instances; unit and acceptance tests reuse
//! them directly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block_pool::{AllocOutcome, BlockPool};
use crate::layout::{ByteSpan, TensorLayout};
use crate::transport::loopback::VerbRecord;

/// Mismatch found by an oracle run, with enough context to reproduce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub oracle: &'static str,
    pub seed: u64,
    pub detail: String,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} oracle mismatch (seed {}): {}",
            self.oracle, self.seed, self.detail
        )
    }
}

// ---------------------------------------------------------------------------
// Offset enumeration
// ---------------------------------------------------------------------------

/// Every (index, byte offset) pair of a layout, enumerated one element at a
/// time with independent arithmetic (repeated addition, no dot product).
pub fn enumerate_element_offsets(layout: &TensorLayout) -> Vec<(Vec<u64>, u64)> {
    let ndims = layout.ndims();
    let mut out = Vec::new();
    let mut index = vec![0u64; ndims];
    'all: loop {
        let mut elems: u64 = 0;
        for d in 0..ndims {
            // repeated addition instead of multiplication
            for _ in 0..index[d] {
                elems += layout.stride()[d];
            }
        }
        let mut bytes: u64 = 0;
        for _ in 0..layout.element_size() {
            bytes += elems;
        }
        out.push((index.clone(), bytes));
        let mut d = ndims;
        loop {
            if d == 0 {
                break 'all;
            }
            d -= 1;
            index[d] += 1;
            if index[d] < layout.shape()[d] {
                break;
            }
            index[d] = 0;
        }
    }
    out
}

/// Check `element_offset` against the enumeration for every index.
pub fn check_offsets(layout: &TensorLayout, seed: u64) -> Result<(), Mismatch> {
    for (index, expect) in enumerate_element_offsets(layout) {
        let got = layout.element_offset(&index).map_err(|e| Mismatch {
            oracle: "offset",
            seed,
            detail: format!("element_offset({index:?}) failed: {e}"),
        })?;
        if got != expect {
            return Err(Mismatch {
                oracle: "offset",
                seed,
                detail: format!("element_offset({index:?}) = {got}, enumeration says {expect}"),
            });
        }
    }
    Ok(())
}

/// Check that the spans of every block tile the KV payload exactly once.
pub fn check_span_partition(layout: &TensorLayout, seed: u64) -> Result<(), Mismatch> {
    let fail = |detail: String| Mismatch {
        oracle: "span-partition",
        seed,
        detail,
    };
    let span = layout.block_span_bytes().map_err(|e| fail(e.to_string()))?;
    let mut covered: BTreeMap<u64, u64> = BTreeMap::new(); // offset -> end
    for b in 0..layout.block_count() {
        for s in layout.block_to_spans(b).map_err(|e| fail(e.to_string()))? {
            if s.len != span {
                return Err(fail(format!("span length {} != {span}", s.len)));
            }
            covered.insert(s.offset, s.end());
        }
    }
    let expect_spans = layout.block_count() * layout.kv_count();
    if covered.len() as u64 != expect_spans {
        return Err(fail(format!(
            "{} distinct spans, expected {expect_spans}",
            covered.len()
        )));
    }
    let mut last_end = 0u64;
    for (&off, &end) in &covered {
        if off < last_end {
            return Err(fail(format!("span at {off} overlaps previous end {last_end}")));
        }
        last_end = end;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coalescing runs
// ---------------------------------------------------------------------------

/// A read descriptor as seen by the coalescer: matching-length remote and
/// local spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanPair {
    pub remote: ByteSpan,
    pub local: ByteSpan,
}

/// Brute-force maximal bi-contiguous run finder: walk the descriptor list
/// and start a new group whenever either side fails to abut the previous
/// descriptor or the group would exceed `cap` bytes. Returns the group
/// sizes (in descriptors).
pub fn coalesced_runs_brute(pairs: &[SpanPair], cap: u64) -> Vec<Vec<SpanPair>> {
    let mut groups: Vec<Vec<SpanPair>> = Vec::new();
    for &p in pairs {
        let start_new = match groups.last() {
            None => true,
            Some(group) => {
                let last = group.last().unwrap();
                let group_len: u64 = group.iter().map(|g| g.remote.len).sum();
                last.remote.end() != p.remote.offset
                    || last.local.end() != p.local.offset
                    || group_len + p.remote.len > cap
            }
        };
        if start_new {
            groups.push(vec![p]);
        } else {
            groups.last_mut().unwrap().push(p);
        }
    }
    groups
}

/// Byte-level mapping (remote byte -> local byte) implied by descriptors.
pub fn byte_mapping(pairs: &[SpanPair]) -> BTreeMap<u64, u64> {
    let mut map = BTreeMap::new();
    for p in pairs {
        for i in 0..p.remote.len {
            map.insert(p.remote.offset + i, p.local.offset + i);
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Verb-log interpreter
// ---------------------------------------------------------------------------

/// Single-threaded interpreter replaying a verb log over plain byte arrays.
/// Regions are keyed by (endpoint address, mr id).
#[derive(Debug, Default)]
pub struct VerbInterpreter {
    regions: BTreeMap<(u64, u32), Vec<u8>>,
    stash: BTreeMap<(u64, u64), Vec<u8>>,
}

impl VerbInterpreter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load_region(&mut self, addr: u64, mr: u32, bytes: Vec<u8>) {
        self.regions.insert((addr, mr), bytes);
    }

    pub fn region(&self, addr: u64, mr: u32) -> Option<&[u8]> {
        self.regions.get(&(addr, mr)).map(|v| v.as_slice())
    }

    pub fn replay(&mut self, log: &[VerbRecord]) -> Result<(), String> {
        for record in log {
            match record {
                VerbRecord::ReadServe {
                    token,
                    src_addr,
                    src_mr,
                    src_offset,
                    len,
                } => {
                    let region = self
                        .regions
                        .get(&(*src_addr, *src_mr))
                        .ok_or_else(|| format!("read from unknown region {src_addr}/{src_mr}"))?;
                    let start = *src_offset as usize;
                    let end = start + *len as usize;
                    if end > region.len() {
                        return Err(format!("read past region end: {end} > {}", region.len()));
                    }
                    self.stash.insert(*token, region[start..end].to_vec());
                }
                VerbRecord::ReadPlace {
                    token,
                    dst_addr,
                    dst_mr,
                    dst_offset,
                } => {
                    let bytes = self
                        .stash
                        .remove(token)
                        .ok_or_else(|| format!("read place without serve: {token:?}"))?;
                    let region = self
                        .regions
                        .get_mut(&(*dst_addr, *dst_mr))
                        .ok_or_else(|| format!("place into unknown region {dst_addr}/{dst_mr}"))?;
                    let start = *dst_offset as usize;
                    region[start..start + bytes.len()].copy_from_slice(&bytes);
                }
                VerbRecord::CopyWrite {
                    dst_addr,
                    dst_mr,
                    dst_offset,
                    payload,
                }
                | VerbRecord::RecvDeliver {
                    dst_addr,
                    dst_mr,
                    dst_offset,
                    payload,
                } => {
                    let region = self
                        .regions
                        .get_mut(&(*dst_addr, *dst_mr))
                        .ok_or_else(|| format!("write into unknown region {dst_addr}/{dst_mr}"))?;
                    let start = *dst_offset as usize;
                    region[start..start + payload.len()].copy_from_slice(payload);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Allocator model
// ---------------------------------------------------------------------------

/// Run a randomized allocate/append/release sequence against [`BlockPool`],
/// checking the pool invariants and the placement policy against a
/// recomputed-from-scratch free-run model after every step.
pub fn run_allocator_check(seed: u64, steps: usize) -> Result<(), Mismatch> {
    let fail = |detail: String| Mismatch {
        oracle: "allocator",
        seed,
        detail,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.gen_range(4..64u64);
    let mut pool = BlockPool::new(total, 16);
    let mut free: Vec<bool> = vec![true; total as usize];
    let mut owned: BTreeMap<u64, Vec<u64>> = BTreeMap::new();

    // recompute the expected choice by scanning runs, longest first
    let expected_choice = |free: &[bool], n: u64| -> Option<Vec<u64>> {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        let mut i = 0usize;
        while i < free.len() {
            if free[i] {
                let start = i;
                while i < free.len() && free[i] {
                    i += 1;
                }
                runs.push((start as u64, (i - start) as u64));
            } else {
                i += 1;
            }
        }
        let total_free: u64 = runs.iter().map(|r| r.1).sum();
        if n > total_free {
            return None;
        }
        runs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen = Vec::new();
        let mut remaining = n;
        for (start, len) in runs {
            if remaining == 0 {
                break;
            }
            let take = remaining.min(len);
            chosen.extend(start..start + take);
            remaining -= take;
        }
        Some(chosen)
    };

    for step in 0..steps {
        let req = rng.gen_range(0..8u64);
        match rng.gen_range(0..3u32) {
            0 => {
                let n = rng.gen_range(1..=total.min(8));
                let got = pool.allocate_all_or_nothing(req, n);
                if owned.contains_key(&req) {
                    if got.is_ok() {
                        return Err(fail(format!("step {step}: double allocation accepted")));
                    }
                } else {
                    match got.map_err(|e| fail(format!("step {step}: {e}")))? {
                        AllocOutcome::Allocated(a) => {
                            let want = expected_choice(&free, n)
                                .ok_or_else(|| fail(format!("step {step}: alloc should fail")))?;
                            if a.block_ids != want {
                                return Err(fail(format!(
                                    "step {step}: chose {:?}, model says {want:?}",
                                    a.block_ids
                                )));
                            }
                            for &b in &a.block_ids {
                                free[b as usize] = false;
                            }
                            owned.insert(req, a.block_ids);
                        }
                        AllocOutcome::Unavailable => {
                            if expected_choice(&free, n).is_some() {
                                return Err(fail(format!(
                                    "step {step}: reported unavailable with {n} blocks free"
                                )));
                            }
                        }
                    }
                }
            }
            1 => {
                let got = pool.allocate_append(req);
                if let Some(blocks) = owned.get_mut(&req) {
                    match got.map_err(|e| fail(format!("step {step}: {e}")))? {
                        AllocOutcome::Allocated(a) => {
                            let want = expected_choice(&free, 1).unwrap();
                            if a.block_ids != want {
                                return Err(fail(format!(
                                    "step {step}: append chose {:?}, model says {want:?}",
                                    a.block_ids
                                )));
                            }
                            free[a.block_ids[0] as usize] = false;
                            blocks.push(a.block_ids[0]);
                        }
                        AllocOutcome::Unavailable => {
                            if free.iter().any(|&f| f) {
                                return Err(fail(format!(
                                    "step {step}: append unavailable with free blocks"
                                )));
                            }
                        }
                    }
                } else if got.is_ok() {
                    return Err(fail(format!("step {step}: append without allocation")));
                }
            }
            _ => {
                let released = pool.release(req);
                let expect = owned.remove(&req).map(|b| b.len() as u64).unwrap_or(0);
                if released != expect {
                    return Err(fail(format!(
                        "step {step}: released {released}, model says {expect}"
                    )));
                }
                for b in 0..total as usize {
                    let owned_somewhere = owned.values().any(|v| v.contains(&(b as u64)));
                    free[b] = !owned_somewhere;
                }
            }
        }
        pool.check_invariants()
            .map_err(|e| fail(format!("step {step}: {e}")))?;
        let model_free = free.iter().filter(|&&f| f).count() as u64;
        if pool.free_blocks() != model_free {
            return Err(fail(format!(
                "step {step}: free count {} != model {model_free}",
                pool.free_blocks()
            )));
        }
    }
    Ok(())
}

/// Randomized layout for oracle runs: canonical geometry with occasional
/// padding between sub-tensors.
pub fn random_layout(rng: &mut ChaCha8Rng) -> TensorLayout {
    let blocks = rng.gen_range(1..8u64);
    let tokens = rng.gen_range(1..5u64);
    let heads = rng.gen_range(1..4u64);
    let head_dim = rng.gen_range(1..9u64);
    let elem = *[1u32, 2, 4].get(rng.gen_range(0..3usize)).unwrap();
    let base = rng.gen_range(0..64u64);
    TensorLayout::canonical(base, blocks, tokens, heads, head_dim, elem).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_matches_worked_example() {
        let layout = TensorLayout::new(
            0,
            ["B", "KV", "L", "H", "D"].map(String::from).to_vec(),
            vec![10, 2, 16, 2, 128],
            vec![4096, 40960, 256, 128, 1],
            2,
        )
        .unwrap();
        let offsets = enumerate_element_offsets(&layout);
        let k8 = offsets
            .iter()
            .find(|(idx, _)| idx == &vec![8, 0, 0, 0, 0])
            .unwrap();
        assert_eq!(k8.1, 65536);
        let v8 = offsets
            .iter()
            .find(|(idx, _)| idx == &vec![8, 1, 0, 0, 0])
            .unwrap();
        assert_eq!(v8.1, 147456);
        check_offsets(&layout, 0).unwrap();
        check_span_partition(&layout, 0).unwrap();
    }

    #[test]
    fn brute_runs_split_on_either_side() {
        let s = |o: u64| ByteSpan::new(o, 8);
        // remote contiguous, local contiguous -> one group
        let pairs = [
            SpanPair { remote: s(0), local: s(64) },
            SpanPair { remote: s(8), local: s(72) },
        ];
        assert_eq!(coalesced_runs_brute(&pairs, 1 << 20).len(), 1);
        // remote contiguous, local gap -> two groups
        let pairs = [
            SpanPair { remote: s(0), local: s(64) },
            SpanPair { remote: s(8), local: s(80) },
        ];
        assert_eq!(coalesced_runs_brute(&pairs, 1 << 20).len(), 2);
        // cap splits a run
        let pairs = [
            SpanPair { remote: s(0), local: s(0) },
            SpanPair { remote: s(8), local: s(8) },
            SpanPair { remote: s(16), local: s(16) },
        ];
        assert_eq!(coalesced_runs_brute(&pairs, 16).len(), 2);
    }

    #[test]
    fn interpreter_replays_interleaved_read_write() {
        // region A holds [1,2,3,4]; a read of A[0..2] is served, then A is
        // overwritten, then the read lands in B. B must hold the old bytes.
        let mut interp = VerbInterpreter::new();
        interp.load_region(1, 1, vec![1, 2, 3, 4]);
        interp.load_region(2, 1, vec![0, 0, 0, 0]);
        interp
            .replay(&[
                VerbRecord::ReadServe {
                    token: (2, 7),
                    src_addr: 1,
                    src_mr: 1,
                    src_offset: 0,
                    len: 2,
                },
                VerbRecord::CopyWrite {
                    dst_addr: 1,
                    dst_mr: 1,
                    dst_offset: 0,
                    payload: vec![9, 9],
                },
                VerbRecord::ReadPlace {
                    token: (2, 7),
                    dst_addr: 2,
                    dst_mr: 1,
                    dst_offset: 1,
                },
            ])
            .unwrap();
        assert_eq!(interp.region(1, 1).unwrap(), &[9, 9, 3, 4]);
        assert_eq!(interp.region(2, 1).unwrap(), &[0, 1, 2, 0]);
    }

    #[test]
    fn allocator_model_runs_clean() {
        for seed in 0..20 {
            run_allocator_check(seed, 200).unwrap();
        }
    }
}

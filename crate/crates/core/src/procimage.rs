//! Process-image replication over an abstract memory model.
//!
//! An image has a data segment, a heap tracked by an allocation-ordered chunk
//! list (what a malloc wrapper would record), a stack and a saved jump
//! context. Each image owns a disjoint range of abstract addresses for its
//! heap, so "pointers now refer to the target's own chunks" is a checkable
//! predicate rather than an accident of equal addresses.
//!
//! [`replicate`] turns a target into a replica of a source in three phases:
//! data segment, heap, stack.

use std::collections::BTreeMap;
use std::ops::Range;

use thiserror::Error;

pub type Addr = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("preserved ranges {0:?} and {1:?} overlap")]
    OverlappingPreserved(Range<usize>, Range<usize>),
    #[error("preserved range {range:?} exceeds data segment of {len} bytes")]
    PreservedOutOfBounds { range: Range<usize>, len: usize },
    #[error("source image has no captured jump context")]
    MissingJmpContext,
    #[error("address space exhausted")]
    OutOfAddressSpace,
}

/// Stand-in for a `jmp_buf`: the registers needed to resume execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JmpContext {
    pub pc: u64,
    pub sp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapChunk {
    pub chunk_id: u64,
    /// Address of the pointer variable that refers to this chunk.
    pub pointer_slot: Addr,
    pub size: usize,
    pub payload: Vec<u8>,
    pub base_addr: Addr,
}

/// Bump allocator over one image's private heap range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpace {
    range: Range<Addr>,
    next: Addr,
}

impl AddressSpace {
    pub fn new(range: Range<Addr>) -> Self {
        Self {
            next: range.start,
            range,
        }
    }

    pub fn range(&self) -> &Range<Addr> {
        &self.range
    }

    fn alloc(&mut self, size: usize) -> Result<Addr, ImageError> {
        // Zero-sized chunks still get a distinct address.
        let len = size.max(1) as u64;
        let base = self.next;
        let end = base.checked_add(len).ok_or(ImageError::OutOfAddressSpace)?;
        if end > self.range.end {
            return Err(ImageError::OutOfAddressSpace);
        }
        self.next = end;
        Ok(base)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessImage {
    pub data: Vec<u8>,
    /// Byte ranges of `data` the runtime keeps across replication (its own
    /// communicator handles and library references).
    pub preserved: Vec<Range<usize>>,
    pub heap: Vec<HeapChunk>,
    /// Pointer slot address → value stored in it.
    pub pointers: BTreeMap<Addr, Addr>,
    pub stack: Vec<u8>,
    pub jmp: Option<JmpContext>,
    space: AddressSpace,
    next_chunk_id: u64,
}

impl ProcessImage {
    pub fn new(space: Range<Addr>) -> Self {
        Self {
            data: Vec::new(),
            preserved: Vec::new(),
            heap: Vec::new(),
            pointers: BTreeMap::new(),
            stack: Vec::new(),
            jmp: None,
            space: AddressSpace::new(space),
            next_chunk_id: 0,
        }
    }

    pub fn space(&self) -> &AddressSpace {
        &self.space
    }

    /// malloc through the wrapper: records the chunk and points `slot` at it.
    pub fn malloc(&mut self, slot: Addr, payload: Vec<u8>) -> Result<&HeapChunk, ImageError> {
        let base = self.space.alloc(payload.len())?;
        let chunk = HeapChunk {
            chunk_id: self.next_chunk_id,
            pointer_slot: slot,
            size: payload.len(),
            payload,
            base_addr: base,
        };
        self.next_chunk_id += 1;
        self.pointers.insert(slot, base);
        self.heap.push(chunk);
        Ok(self.heap.last().expect("just pushed"))
    }

    fn free_last(&mut self) {
        if let Some(chunk) = self.heap.pop() {
            if self.pointers.get(&chunk.pointer_slot) == Some(&chunk.base_addr) {
                self.pointers.remove(&chunk.pointer_slot);
            }
        }
    }

    fn realloc(&mut self, index: usize, size: usize) -> Result<(), ImageError> {
        let base = self.space.alloc(size)?;
        let chunk = &mut self.heap[index];
        chunk.base_addr = base;
        chunk.size = size;
        chunk.payload.resize(size, 0);
        Ok(())
    }

    /// Captures the calling environment (setjmp).
    pub fn capture(&mut self, ctx: JmpContext) {
        self.jmp = Some(ctx);
    }

    fn check_preserved(&self, len: usize) -> Result<(), ImageError> {
        let mut sorted = self.preserved.clone();
        sorted.sort_by_key(|r| r.start);
        for w in sorted.windows(2) {
            if w[0].end > w[1].start {
                return Err(ImageError::OverlappingPreserved(w[0].clone(), w[1].clone()));
            }
        }
        for r in &sorted {
            if r.end > len || r.start > r.end {
                return Err(ImageError::PreservedOutOfBounds {
                    range: r.clone(),
                    len,
                });
            }
        }
        Ok(())
    }

    fn in_preserved(&self, offset: usize) -> bool {
        self.preserved.iter().any(|r| r.contains(&offset))
    }
}

/// Equalizes the data segment size, copies the source bytes and restores the
/// target's preserved slots.
pub fn transfer_data(src: &ProcessImage, mut tgt: ProcessImage) -> Result<ProcessImage, ImageError> {
    tgt.check_preserved(src.data.len().min(tgt.data.len()))?;
    let saved: Vec<(Range<usize>, Vec<u8>)> = tgt
        .preserved
        .iter()
        .map(|r| (r.clone(), tgt.data[r.clone()].to_vec()))
        .collect();
    tgt.data.resize(src.data.len(), 0);
    tgt.data.copy_from_slice(&src.data);
    for (r, bytes) in saved {
        tgt.data[r].copy_from_slice(&bytes);
    }
    Ok(tgt)
}

/// Snapshot of the phase-1 result, exposed for tests of the chunk-count step.
pub fn match_chunk_count(src: &ProcessImage, tgt: &mut ProcessImage) -> Result<(), ImageError> {
    while tgt.heap.len() > src.heap.len() {
        tgt.free_last();
    }
    while tgt.heap.len() < src.heap.len() {
        let slot = src.heap[tgt.heap.len()].pointer_slot;
        tgt.malloc(slot, Vec::new())?;
    }
    Ok(())
}

/// Heap transfer: match chunk count, match chunk sizes, then copy payloads and
/// repoint every pointer slot at the target's own chunk.
pub fn reconcile_heap(src: &ProcessImage, mut tgt: ProcessImage) -> Result<ProcessImage, ImageError> {
    match_chunk_count(src, &mut tgt)?;
    for i in 0..src.heap.len() {
        if tgt.heap[i].size != src.heap[i].size {
            tgt.realloc(i, src.heap[i].size)?;
        }
        tgt.heap[i].chunk_id = src.heap[i].chunk_id;
    }
    tgt.next_chunk_id = src.next_chunk_id.max(tgt.next_chunk_id);
    for (s, t) in src.heap.iter().zip(tgt.heap.iter_mut()) {
        t.payload.copy_from_slice(&s.payload);
        t.pointer_slot = s.pointer_slot;
    }
    // Pointer values copied along with the data/stack would still hold source
    // addresses; rewrite them to the target-local bases.
    let mut pointers = BTreeMap::new();
    for (&slot, &value) in &src.pointers {
        let local = src
            .heap
            .iter()
            .position(|c| c.base_addr == value)
            .map(|i| tgt.heap[i].base_addr);
        pointers.insert(slot, local.unwrap_or(value));
    }
    for c in &tgt.heap {
        pointers.insert(c.pointer_slot, c.base_addr);
    }
    tgt.pointers = pointers;
    Ok(tgt)
}

/// Copies the stack from a scratch region outside the stack being replaced
/// and resumes both images at the captured context.
pub fn transfer_stack(src: &ProcessImage, mut tgt: ProcessImage) -> Result<ProcessImage, ImageError> {
    let ctx = src.jmp.ok_or(ImageError::MissingJmpContext)?;
    // The copy reads only `scratch`, never `tgt.stack`, while overwriting it.
    let scratch: Box<[u8]> = src.stack.clone().into_boxed_slice();
    tgt.stack.clear();
    tgt.stack.extend_from_slice(&scratch);
    tgt.jmp = Some(ctx);
    Ok(tgt)
}

/// Data, heap and stack transfer in that order.
pub fn replicate(src: &ProcessImage, tgt: ProcessImage) -> Result<ProcessImage, ImageError> {
    let tgt = transfer_data(src, tgt)?;
    let tgt = reconcile_heap(src, tgt)?;
    transfer_stack(src, tgt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Data,
    Heap { chunk: usize },
    HeapCount,
    Stack,
    JmpContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEquivalence {
    pub verdict: bool,
    pub mismatches: Vec<(Segment, usize)>,
}

/// Compares two images ignoring `b`'s preserved data slots and heap addresses.
pub fn image_equivalent(a: &ProcessImage, b: &ProcessImage) -> ImageEquivalence {
    let mut mismatches = Vec::new();
    if a.data.len() != b.data.len() {
        mismatches.push((Segment::Data, a.data.len().min(b.data.len())));
    }
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if x != y && !b.in_preserved(i) {
            mismatches.push((Segment::Data, i));
        }
    }
    if a.heap.len() != b.heap.len() {
        mismatches.push((Segment::HeapCount, a.heap.len().min(b.heap.len())));
    }
    for (i, (x, y)) in a.heap.iter().zip(&b.heap).enumerate() {
        if x.size != y.size || x.payload.len() != y.payload.len() {
            mismatches.push((Segment::Heap { chunk: i }, 0));
            continue;
        }
        if let Some(off) = x.payload.iter().zip(&y.payload).position(|(p, q)| p != q) {
            mismatches.push((Segment::Heap { chunk: i }, off));
        }
    }
    if a.stack != b.stack {
        let off = a
            .stack
            .iter()
            .zip(&b.stack)
            .position(|(p, q)| p != q)
            .unwrap_or(a.stack.len().min(b.stack.len()));
        mismatches.push((Segment::Stack, off));
    }
    if a.jmp != b.jmp {
        mismatches.push((Segment::JmpContext, 0));
    }
    ImageEquivalence {
        verdict: mismatches.is_empty(),
        mismatches,
    }
}

/// Every pointer slot of `img` refers to one of its own chunk bases.
pub fn pointers_local(img: &ProcessImage) -> bool {
    let range = img.space.range();
    img.heap.iter().all(|c| {
        range.contains(&c.base_addr) && img.pointers.get(&c.pointer_slot) == Some(&c.base_addr)
    }) && img.pointers.values().all(|v| range.contains(v))
}

/// No two chunks of `img` overlap in its address space.
pub fn chunks_disjoint(img: &ProcessImage) -> bool {
    let mut spans: Vec<(Addr, Addr)> = img
        .heap
        .iter()
        .map(|c| (c.base_addr, c.base_addr + c.size.max(1) as u64))
        .collect();
    spans.sort();
    spans.windows(2).all(|w| w[0].1 <= w[1].0)
}

//! Per-query FIFO memory, temporal embeddings and inference-time extension.
//!
//! Reads are right-aligned: view row `j` of a slot with capacity `c` and fill
//! `f` holds logical entry `j − (c − f)` and carries embedding row `j`, so the
//! newest entry always meets the last embedding row.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Ring bookkeeping shared by the tensor memory and the training tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotRing {
    capacity: usize,
    fill: Vec<usize>,
    head: Vec<usize>,
}

impl SlotRing {
    pub fn new(slots: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Param("memory capacity must be at least 1".into()));
        }
        Ok(SlotRing { capacity, fill: vec![0; slots], head: vec![0; slots] })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> usize {
        self.fill.len()
    }

    pub fn fill(&self, slot: usize) -> usize {
        self.fill[slot]
    }

    /// Physical index for the next write to `slot`, advancing the ring.
    fn claim(&mut self, slot: usize) -> usize {
        let idx = self.head[slot];
        self.head[slot] = (idx + 1) % self.capacity;
        self.fill[slot] = (self.fill[slot] + 1).min(self.capacity);
        idx
    }

    /// Physical index of logical entry `p` (0 = oldest).
    pub fn physical(&self, slot: usize, p: usize) -> usize {
        debug_assert!(p < self.fill[slot]);
        (self.head[slot] + self.capacity - self.fill[slot] + p) % self.capacity
    }

    /// For each view row of `slot`, the physical entry it shows, if any.
    pub fn view_rows(&self, slot: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        let empty = self.capacity - self.fill[slot];
        (0..self.capacity).map(move |j| (j >= empty).then(|| self.physical(slot, j - empty)))
    }

    /// `N × capacity` key mask, `true` where an entry is present.
    pub fn key_mask(&self) -> Vec<bool> {
        self.key_mask_for(&(0..self.slots()).collect::<Vec<_>>())
    }

    pub fn key_mask_for(&self, slots: &[usize]) -> Vec<bool> {
        slots.iter().flat_map(|&i| self.view_rows(i).map(|r| r.is_some())).collect()
    }

    fn check_slots(&self, slots: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.slots()];
        for &i in slots {
            if i >= self.slots() || std::mem::replace(&mut seen[i], true) {
                return Err(shape_err!("slot {} is out of range or repeated", i));
            }
        }
        Ok(())
    }

    fn check_mask(&self, active: &[bool]) -> Result<()> {
        if active.len() != self.slots() {
            return Err(shape_err!("active mask has {} entries for {} queries", active.len(), self.slots()));
        }
        Ok(())
    }
}

/// Memory contents as seen by the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryView {
    /// `[N, capacity, D]`: entries plus embeddings; masked rows hold the bare embedding.
    pub keys: Tensor,
    /// `N × capacity`, row-major.
    pub mask: Vec<bool>,
}

/// Inference-time memory, `N × L_i × D` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMemory {
    ring: SlotRing,
    dim: usize,
    training_capacity: usize,
    slots: Vec<f32>,
}

const MEMORY_MAGIC: &[u8; 4] = b"QMEM";

impl QueryMemory {
    pub fn new(queries: usize, capacity: usize, dim: usize, training_capacity: usize) -> Result<Self> {
        Ok(QueryMemory {
            ring: SlotRing::new(queries, capacity)?,
            dim,
            training_capacity,
            slots: vec![0.0; queries * capacity * dim],
        })
    }

    pub fn ring(&self) -> &SlotRing {
        &self.ring
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity
    }

    pub fn training_capacity(&self) -> usize {
        self.training_capacity
    }

    pub fn queries(&self) -> usize {
        self.ring.slots()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self, slot: usize) -> usize {
        self.ring.fill(slot)
    }

    /// Floats held by the slots; counters are excluded.
    pub fn num_floats(&self) -> usize {
        self.slots.len()
    }

    /// Appends row `i` of `entries[N, D]` to slot `i` for every active query.
    pub fn push(&mut self, entries: &Tensor, active: &[bool]) -> Result<()> {
        self.ring.check_mask(active)?;
        if entries.shape() != [self.queries(), self.dim] {
            return Err(shape_err!("push: expected [{}, {}], got {:?}", self.queries(), self.dim, entries.shape()));
        }
        let slots: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let rows = Tensor::new([slots.len(), self.dim], slots.iter().flat_map(|&i| entries.row(i).to_vec()).collect())?;
        self.push_rows(&rows, &slots)
    }

    /// Appends row `j` of `entries` to slot `slots[j]`.
    pub fn push_rows(&mut self, entries: &Tensor, slots: &[usize]) -> Result<()> {
        self.ring.check_slots(slots)?;
        if entries.shape() != [slots.len(), self.dim] {
            return Err(shape_err!("push: expected [{}, {}], got {:?}", slots.len(), self.dim, entries.shape()));
        }
        let (c, d) = (self.capacity(), self.dim);
        for (j, &i) in slots.iter().enumerate() {
            let p = self.ring.claim(i);
            self.slots[(i * c + p) * d..(i * c + p + 1) * d].copy_from_slice(entries.row(j));
        }
        Ok(())
    }

    /// Logical entries of one slot, oldest first.
    pub fn entries(&self, slot: usize) -> Vec<&[f32]> {
        let (c, d) = (self.capacity(), self.dim);
        (0..self.fill(slot))
            .map(|p| {
                let k = self.ring.physical(slot, p);
                &self.slots[(slot * c + k) * d..(slot * c + k + 1) * d]
            })
            .collect()
    }

    /// Right-aligned `[N·capacity, D]` entry rows; empty rows are zero.
    pub fn raw_rows(&self) -> Tensor {
        self.raw_rows_for(&(0..self.queries()).collect::<Vec<_>>())
    }

    /// [`Self::raw_rows`] restricted to `slots`, in that order.
    pub fn raw_rows_for(&self, slots: &[usize]) -> Tensor {
        let (c, d) = (self.capacity(), self.dim);
        let mut out = vec![0.0; slots.len() * c * d];
        for (r, &i) in slots.iter().enumerate() {
            for (j, phys) in self.ring.view_rows(i).enumerate() {
                if let Some(k) = phys {
                    out[(r * c + j) * d..(r * c + j + 1) * d]
                        .copy_from_slice(&self.slots[(i * c + k) * d..(i * c + k + 1) * d]);
                }
            }
        }
        Tensor::new([slots.len() * c, d], out).expect("sized above")
    }

    pub fn read_view(&self, gamma: &Tensor) -> Result<MemoryView> {
        check_gamma(gamma, self.capacity(), self.dim)?;
        let mut keys = self.raw_rows();
        for row in keys.data_mut().chunks_mut(self.capacity() * self.dim) {
            row.iter_mut().zip(gamma.data()).for_each(|(k, g)| *k += g);
        }
        Ok(MemoryView {
            keys: keys.reshaped([self.queries(), self.capacity(), self.dim])?,
            mask: self.ring.key_mask(),
        })
    }

    /// Little-endian: magic, then u32 queries, capacity, dim, training
    /// capacity, then per-query u32 fill and head, then the f32 slots.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MEMORY_MAGIC)?;
        for v in [self.queries(), self.capacity(), self.dim, self.training_capacity] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (f, h) in self.ring.fill.iter().zip(&self.ring.head) {
            w.write_all(&(*f as u32).to_le_bytes())?;
            w.write_all(&(*h as u32).to_le_bytes())?;
        }
        for v in &self.slots {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("memory snapshot: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Format("memory snapshot: bad magic".into()));
        }
        let mut u32s = |n: usize| -> Result<Vec<usize>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(io)?;
            Ok(buf.chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize).collect())
        };
        let hdr = u32s(4)?;
        let (n, c, d, tc) = (hdr[0], hdr[1], hdr[2], hdr[3]);
        let counters = u32s(2 * n)?;
        let mut mem = QueryMemory::new(n, c, d, tc)?;
        for i in 0..n {
            let (f, h) = (counters[2 * i], counters[2 * i + 1]);
            if f > c || h >= c {
                return Err(Error::Format(format!("memory snapshot: slot {i} fill {f} head {h} capacity {c}")));
            }
            mem.ring.fill[i] = f;
            mem.ring.head[i] = h;
        }
        let mut buf = vec![0u8; 4 * n * c * d];
        r.read_exact(&mut buf).map_err(io)?;
        for (dst, b) in mem.slots.iter_mut().zip(buf.chunks(4)) {
            *dst = f32::from_le_bytes(b.try_into().unwrap());
        }
        Ok(mem)
    }
}

fn check_gamma(gamma: &Tensor, capacity: usize, dim: usize) -> Result<()> {
    if gamma.shape() != [capacity, dim] {
        return Err(shape_err!("temporal embedding {:?} does not match capacity {} × dim {}", gamma.shape(), capacity, dim));
    }
    Ok(())
}

/// Training-time memory whose entries are graph values, so gradients flow
/// back through time.
#[derive(Clone, Debug)]
pub struct MemoryTape {
    ring: SlotRing,
    dim: usize,
    sources: Vec<Var>,
    slot_source: Vec<usize>,
    source_row: Vec<usize>,
}

impl MemoryTape {
    pub fn new(queries: usize, capacity: usize, dim: usize) -> Result<Self> {
        Ok(MemoryTape {
            ring: SlotRing::new(queries, capacity)?,
            dim,
            sources: Vec::new(),
            slot_source: vec![0; queries * capacity],
            source_row: vec![0; queries * capacity],
        })
    }

    pub fn ring(&self) -> &SlotRing {
        &self.ring
    }

    /// Records row `i` of `entries[N, D]` for every active query.
    pub fn push(&mut self, g: &Graph, entries: Var, active: &[bool]) -> Result<()> {
        self.ring.check_mask(active)?;
        if g.shape(entries) != [self.ring.slots(), self.dim] {
            return Err(shape_err!("push: expected [{}, {}], got {:?}", self.ring.slots(), self.dim, g.shape(entries)));
        }
        let slots: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        self.record(entries, slots.iter().map(|&i| (i, i)))
    }

    /// Records row `j` of `entries` into slot `slots[j]`.
    pub fn push_rows(&mut self, g: &Graph, entries: Var, slots: &[usize]) -> Result<()> {
        self.ring.check_slots(slots)?;
        if g.shape(entries) != [slots.len(), self.dim] {
            return Err(shape_err!("push: expected [{}, {}], got {:?}", slots.len(), self.dim, g.shape(entries)));
        }
        self.record(entries, slots.iter().copied().enumerate())
    }

    fn record(&mut self, entries: Var, rows: impl Iterator<Item = (usize, usize)>) -> Result<()> {
        let src = self.sources.len();
        self.sources.push(entries);
        let c = self.ring.capacity;
        for (row, slot) in rows {
            let p = self.ring.claim(slot);
            self.slot_source[slot * c + p] = src;
            self.source_row[slot * c + p] = row;
        }
        Ok(())
    }

    /// Right-aligned `[N·capacity, D]` entry rows on the graph.
    pub fn raw_rows(&self, g: &mut Graph) -> Result<Var> {
        self.raw_rows_for(g, &(0..self.ring.slots()).collect::<Vec<_>>())
    }

    /// [`Self::raw_rows`] restricted to `slots`, in that order.
    pub fn raw_rows_for(&self, g: &mut Graph, slots: &[usize]) -> Result<Var> {
        let c = self.ring.capacity;
        let index = slots
            .iter()
            .flat_map(|&i| {
                self.ring
                    .view_rows(i)
                    .map(move |r| r.map(|k| (self.slot_source[i * c + k], self.source_row[i * c + k])))
            })
            .collect();
        g.gather_rows_multi(&self.sources, index, self.dim)
    }
}

/// Adds `gamma[L, D]` to each query's rows of `raw[N·L, D]`, giving `[N, L, D]`.
pub fn add_temporal(g: &mut Graph, raw: Var, gamma: Var) -> Result<Var> {
    let gs = g.shape(gamma).to_vec();
    let rs = g.shape(raw).to_vec();
    if gs.len() != 2 || rs.len() != 2 || rs[1] != gs[1] || rs[0] % gs[0] != 0 {
        return Err(shape_err!("add_temporal: rows {:?} vs embedding {:?}", rs, gs));
    }
    let (l, d) = (gs[0], gs[1]);
    let n = rs[0] / l;
    let tiled = g.gather_rows(gamma, (0..n).flat_map(|_| 0..l).collect())?;
    let keys = g.add(raw, tiled)?;
    g.reshape(keys, [n, l, d])
}

/// Learnable `γ`, trained at `base_length` rows.
#[derive(Clone, Debug)]
pub struct TemporalEmbedding {
    pub table: ParamId,
    pub base_length: usize,
}

impl TemporalEmbedding {
    pub fn new(ps: &mut ParamStore, base_length: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = ps.add_embedding("memory.gamma", [base_length, dim], rng)?;
        Ok(TemporalEmbedding { table, base_length })
    }

    /// The table stretched to `capacity` rows.
    pub fn at_capacity(&self, ps: &ParamStore, capacity: usize) -> Result<Tensor> {
        extend_ime(ps.tensor(self.table), capacity)
    }
}

/// Linear interpolation of `gamma[L, D]` to `capacity` rows; row `j` samples
/// position `j·(L−1)/(capacity−1)`. A single output row is `gamma[L−1]`.
pub fn extend_ime(gamma: &Tensor, capacity: usize) -> Result<Tensor> {
    if capacity == 0 {
        return Err(Error::Param("extended memory size must be at least 1".into()));
    }
    let (l, d) = match *gamma.shape() {
        [l, d] if l > 0 => (l, d),
        _ => return Err(shape_err!("temporal embedding must be [L, D], got {:?}", gamma.shape())),
    };
    if capacity == l {
        return Ok(gamma.clone());
    }
    let mut out = Vec::with_capacity(capacity * d);
    for j in 0..capacity {
        let pos = if capacity == 1 { (l - 1) as f64 } else { j as f64 * (l - 1) as f64 / (capacity - 1) as f64 };
        let lo = (pos.floor() as usize).min(l - 1);
        let hi = (lo + 1).min(l - 1);
        let w = (pos - lo as f64) as f32;
        let (a, b) = (gamma.row(lo), gamma.row(hi));
        if w == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(a, b)| a + w * (b - a)));
        }
    }
    Tensor::new([capacity, d], out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn entry(v: f32, d: usize) -> Tensor {
        Tensor::filled([1, d], v)
    }

    #[test]
    fn first_write_and_eviction() {
        let mut m = QueryMemory::new(1, 3, 2, 3).unwrap();
        m.push(&entry(0.0, 2), &[true]).unwrap();
        assert_eq!(m.fill(0), 1);
        assert_eq!(m.entries(0), vec![&[0.0, 0.0][..]]);
        for v in 1..4 {
            m.push(&entry(v as f32, 2), &[true]).unwrap();
        }
        let got: Vec<f32> = m.entries(0).iter().map(|e| e[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn inactive_queries_untouched() {
        let mut m = QueryMemory::new(2, 4, 1, 4).unwrap();
        let e = Tensor::new([2, 1], vec![5.0, 6.0]).unwrap();
        m.push(&e, &[false, true]).unwrap();
        assert_eq!(m.fill(0), 0);
        assert_eq!(m.fill(1), 1);
        assert!(m.push(&e, &[true]).is_err());
    }

    #[test]
    fn empty_view_is_fully_masked() {
        let m = QueryMemory::new(2, 3, 2, 3).unwrap();
        let v = m.read_view(&Tensor::zeros([3, 2])).unwrap();
        assert!(v.mask.iter().all(|&k| !k));
    }

    #[test]
    fn single_entry_carries_last_gamma_row() {
        let mut m = QueryMemory::new(1, 3, 2, 3).unwrap();
        m.push(&Tensor::new([1, 2], vec![1.0, 2.0]).unwrap(), &[true]).unwrap();
        let gamma = Tensor::new([3, 2], vec![10.0, 10.0, 20.0, 20.0, 30.0, 30.0]).unwrap();
        let v = m.read_view(&gamma).unwrap();
        assert_eq!(v.mask, vec![false, false, true]);
        assert_eq!(&v.keys.data()[4..6], &[31.0, 32.0]);
    }

    #[test]
    fn full_view_applies_gamma_in_order() {
        let mut m = QueryMemory::new(1, 3, 1, 3).unwrap();
        for v in 0..5 {
            m.push(&entry(v as f32, 1), &[true]).unwrap();
        }
        let gamma = Tensor::new([3, 1], vec![100.0, 200.0, 300.0]).unwrap();
        let v = m.read_view(&gamma).unwrap();
        assert!(v.mask.iter().all(|&k| k));
        assert_eq!(v.keys.data(), &[102.0, 203.0, 304.0]);
    }

    #[test]
    fn gamma_length_mismatch() {
        let m = QueryMemory::new(1, 3, 2, 3).unwrap();
        assert!(matches!(m.read_view(&Tensor::zeros([4, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn ime_cases() {
        let g = Tensor::new([2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(extend_ime(&g, 3).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(extend_ime(&g, 1).unwrap().data(), &[1.0]);
        let mut rng = rand::rng();
        let g = Tensor::normal([24, 8], 1.0, &mut rng);
        assert_eq!(extend_ime(&g, 24).unwrap(), g);
        let e = extend_ime(&g, 72).unwrap();
        assert_eq!(e.shape(), &[72, 8]);
        assert_eq!(e.row(0), g.row(0));
        assert_eq!(e.row(71), g.row(23));
        assert!(extend_ime(&g, 0).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = QueryMemory::new(3, 4, 2, 4).unwrap();
        for t in 0..6 {
            let e = Tensor::from_fn([3, 2], |i| (t * 10 + i) as f32);
            m.push(&e, &[true, t % 2 == 0, t > 3]).unwrap();
        }
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(QueryMemory::read_from(&mut buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(QueryMemory::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn tape_matches_tensor_memory() {
        let (n, c, d) = (3, 4, 2);
        let gamma = Tensor::from_fn([c, d], |i| i as f32 * 0.1);
        let mut mem = QueryMemory::new(n, c, d, c).unwrap();
        let mut tape = MemoryTape::new(n, c, d).unwrap();
        let mut g = Graph::new();
        for t in 0..7 {
            let e = Tensor::from_fn([n, d], |i| (t * 7 + i) as f32);
            let active = [true, t >= 2, t % 3 == 0];
            mem.push(&e, &active).unwrap();
            let v = g.constant(e).unwrap();
            tape.push(&g, v, &active).unwrap();
        }
        let raw = tape.raw_rows(&mut g).unwrap();
        let gv = g.constant(gamma.clone()).unwrap();
        let keys = add_temporal(&mut g, raw, gv).unwrap();
        let view = mem.read_view(&gamma).unwrap();
        assert_eq!(g.value(keys), &view.keys);
        assert_eq!(tape.ring().key_mask(), view.mask);
    }

    proptest! {
        #[test]
        fn fifo_matches_list_oracle(cap in 1usize..8, writes in proptest::collection::vec(-100i32..100, 0..40)) {
            let mut m = QueryMemory::new(1, cap, 1, cap).unwrap();
            let mut oracle: Vec<f32> = Vec::new();
            for w in &writes {
                m.push(&entry(*w as f32, 1), &[true]).unwrap();
                oracle.push(*w as f32);
            }
            let keep = oracle.len().min(cap);
            let expect = &oracle[oracle.len() - keep..];
            let got: Vec<f32> = m.entries(0).iter().map(|e| e[0]).collect();
            prop_assert_eq!(got.as_slice(), expect);
        }

        #[test]
        fn suffix_alignment(cap in 1usize..8, k in 0usize..12) {
            let mut m = QueryMemory::new(1, cap, 1, cap).unwrap();
            for w in 0..k {
                m.push(&entry(w as f32, 1), &[true]).unwrap();
            }
            let gamma = Tensor::from_fn([cap, 1], |j| 1000.0 * (j + 1) as f32);
            let v = m.read_view(&gamma).unwrap();
            let f = m.fill(0);
            for p in 0..f {
                let row = cap - f + p;
                let logical = m.entries(0)[p][0];
                prop_assert!(v.mask[row]);
                prop_assert_eq!(v.keys.data()[row], logical + gamma.data()[row]);
            }
        }

        #[test]
        fn ime_positions_monotone(l in 2usize..30, li in 2usize..100) {
            let g = Tensor::from_fn([l, 1], |j| j as f32);
            let e = extend_ime(&g, li).unwrap();
            for w in e.data().windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}

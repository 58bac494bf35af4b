//! Set partitions of `{0, .., m-1}` as restricted growth strings, with the
//! Möbius weights used to convert unrestricted (V-statistic) sums into
//! distinct-index (U-statistic) sums.

use crate::error::{Error, Result};

/// One set partition: `rgs[i]` is the block id of element `i`, with block ids
/// assigned in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    pub rgs: Vec<u8>,
    pub num_blocks: usize,
}

impl SetPartition {
    /// Block membership lists, in block-id order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.num_blocks];
        for (i, &b) in self.rgs.iter().enumerate() {
            blocks[b as usize].push(i);
        }
        blocks
    }

    /// Möbius weight of the partition lattice at this partition relative to
    /// the all-distinct partition: the product over blocks of
    /// `(-1)^{|B|-1} (|B|-1)!`.
    pub fn moebius_weight(&self) -> i64 {
        let mut sizes = vec![0usize; self.num_blocks];
        for &b in &self.rgs {
            sizes[b as usize] += 1;
        }
        let mut w: i64 = 1;
        for &sz in &sizes {
            let mut f: i64 = 1;
            for t in 1..sz {
                f *= t as i64;
            }
            if (sz - 1) % 2 == 1 {
                f = -f;
            }
            w *= f;
        }
        w
    }
}

/// All set partitions of `{0, .., m-1}` in lexicographic restricted-growth
/// order. Guarded at `m <= 12` (Bell(12) is already 4.2 million).
pub fn enumerate_partitions(m: usize) -> Result<Vec<SetPartition>> {
    if m == 0 || m > 12 {
        return Err(Error::ArgumentError(format!(
            "partition enumeration supports 1 <= m <= 12, got {m}"
        )));
    }
    let mut out = Vec::with_capacity(bell_number(m) as usize);
    let mut rgs = vec![0u8; m];
    loop {
        let num_blocks = rgs.iter().map(|&b| b as usize + 1).max().unwrap();
        out.push(SetPartition { rgs: rgs.clone(), num_blocks });
        // next restricted growth string
        let mut i = m;
        loop {
            if i == 1 {
                return Ok(out);
            }
            i -= 1;
            let max_prefix = rgs[..i].iter().copied().max().unwrap();
            if rgs[i] <= max_prefix {
                rgs[i] += 1;
                for v in rgs[i + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
        }
    }
}

/// Bell number `B_m` via the Bell triangle; exact for `m <= 25` in `u64`.
pub fn bell_number(m: usize) -> u64 {
    assert!(m <= 25, "bell_number overflow guard");
    if m == 0 {
        return 1;
    }
    let mut row = vec![1u64];
    for _ in 1..m {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &v in &row {
            let l = *next.last().unwrap();
            next.push(l + v);
        }
        row = next;
    }
    *row.last().unwrap()
}

/// Partition table of order `m`: every partition paired with its Möbius
/// weight.
#[derive(Debug, Clone)]
pub struct PartitionTable {
    pub m: usize,
    pub entries: Vec<(SetPartition, i64)>,
}

/// Builds the full partition/Möbius table for order `m`.
pub fn partition_table(m: usize) -> Result<PartitionTable> {
    let parts = enumerate_partitions(m)?;
    let entries = parts
        .into_iter()
        .map(|p| {
            let w = p.moebius_weight();
            (p, w)
        })
        .collect();
    Ok(PartitionTable { m, entries })
}

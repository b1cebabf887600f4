use crate::error::{Error, Result};

/// Non-overlapping spatio-temporal blocks covering a `T×H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    source: [usize; 3],
    target: [usize; 3],
}

/// Partitions `source = (T, H, W)` into `target = (t, h, w)` blocks.
/// Every target extent must divide its source extent; there is no padding.
pub fn partition_blocks(source: [usize; 3], target: [usize; 3]) -> Result<BlockPartition> {
    if source.iter().chain(&target).any(|&d| d == 0) {
        return Err(Error::Partition(format!(
            "zero extent in {source:?} -> {target:?}"
        )));
    }
    for (axis, (&s, &t)) in ["T", "H", "W"].iter().zip(source.iter().zip(&target)) {
        if s % t != 0 {
            return Err(Error::Partition(format!(
                "{axis} extent {s} is not divisible by target {t}"
            )));
        }
    }
    Ok(BlockPartition { source, target })
}

impl BlockPartition {
    pub fn source(&self) -> [usize; 3] {
        self.source
    }

    pub fn target(&self) -> [usize; 3] {
        self.target
    }

    /// Extent of one block along each axis.
    pub fn block_extent(&self) -> [usize; 3] {
        [
            self.source[0] / self.target[0],
            self.source[1] / self.target[1],
            self.source[2] / self.target[2],
        ]
    }

    /// Compression ratio `r = THW / thw`.
    pub fn ratio(&self) -> usize {
        self.block_extent().iter().product()
    }

    pub fn num_blocks(&self) -> usize {
        self.target.iter().product()
    }

    pub fn num_source_tokens(&self) -> usize {
        self.source.iter().product()
    }

    /// Block coordinates `(u, v, s)` in row-major order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let [t, h, w] = self.target;
        (0..t).flat_map(move |u| (0..h).flat_map(move |v| (0..w).map(move |s| (u, v, s))))
    }

    /// Source coordinates `(τ, i, j)` of one block, lexicographic order.
    pub fn members(
        &self,
        (u, v, s): (usize, usize, usize),
    ) -> impl Iterator<Item = (usize, usize, usize)> {
        let [bt, bh, bw] = self.block_extent();
        (u * bt..(u + 1) * bt).flat_map(move |tau| {
            (v * bh..(v + 1) * bh).flat_map(move |i| (s * bw..(s + 1) * bw).map(move |j| (tau, i, j)))
        })
    }

    /// Block containing a source coordinate.
    pub fn block_of(&self, (tau, i, j): (usize, usize, usize)) -> (usize, usize, usize) {
        let [bt, bh, bw] = self.block_extent();
        (tau / bt, i / bh, j / bw)
    }

    /// For each source token in `(τ, i, j)` order: the flat index of its block
    /// and its flat offset inside the block (`0..r`).
    pub fn source_assignment(&self) -> Vec<(usize, usize)> {
        let [_, h, w] = self.target;
        let [bt, bh, bw] = self.block_extent();
        let [tt, hh, ww] = self.source;
        let mut out = Vec::with_capacity(tt * hh * ww);
        for tau in 0..tt {
            for i in 0..hh {
                for j in 0..ww {
                    let (u, v, s) = (tau / bt, i / bh, j / bw);
                    let block = (u * h + v) * w + s;
                    let offset = ((tau % bt) * bh + i % bh) * bw + j % bw;
                    out.push((block, offset));
                }
            }
        }
        out
    }
}

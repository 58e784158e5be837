//! Mask sampling: exact-count random position masking for text and
//! block-wise rectangle masking for patch grids.
//!
//! Counts are exact: |mask| == floor(total · ratio), always.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Sorted set of masked positions over a sequence or grid of `total` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    positions: Vec<usize>,
    total: usize,
}

impl MaskSet {
    fn new(mut positions: Vec<usize>, total: usize) -> MaskSet {
        positions.sort_unstable();
        positions.dedup();
        debug_assert!(positions.iter().all(|&p| p < total));
        MaskSet { positions, total }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

/// Exactly `count` distinct positions from `0..total`, uniformly without
/// replacement (partial Fisher-Yates).
pub fn sample_positions(total: usize, count: usize, seed: u64) -> MaskSet {
    debug_assert!(count <= total);
    let mut rng = rng::stream(seed, "mask-text");
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    pool.truncate(count);
    MaskSet::new(pool, total)
}

/// Random text-token masking: exactly floor(len · ratio) positions.
/// Special-token positions are excluded by the caller.
pub fn mask_text(len: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    let count = (len as f64 * ratio).floor() as usize;
    Ok(sample_positions(len, count, seed))
}

/// Block-wise patch masking.
///
/// Rectangles with area ≥ `min_block` and aspect ratio in [0.3, 1/0.3] are
/// unioned until coverage reaches target = floor(grid · ratio), then the
/// cells the final rectangle newly added are trimmed in reverse row-major
/// order down to the exact target. Earlier rectangles stay intact, so the
/// mask always contains a full rectangle of area ≥ min_block when the
/// target allows one.
pub fn mask_blockwise(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    min_block: usize,
    seed: u64,
) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    let total = grid_h * grid_w;
    let target = (total as f64 * ratio).floor() as usize;
    if target == 0 {
        return Ok(MaskSet::new(Vec::new(), total));
    }
    if min_block == 0 || min_block > target {
        return Err(Error::Contract(format!(
            "min_block {min_block} infeasible for target {target}"
        )));
    }

    let mut rng = rng::stream(seed, "mask-block");
    let mut masked = vec![false; total];
    let mut covered = 0usize;
    // Newly-added cells of the most recent rectangle, row-major.
    let mut last_added: Vec<usize> = Vec::new();
    // Capping per-rectangle area forces several rectangles per mask, which
    // keeps distinct seeds from collapsing onto the same union.
    let per_block_cap = (target / 4).max(min_block);

    while covered < target {
        let remaining = target - covered;
        let area_cap = per_block_cap.min(remaining).max(min_block);
        last_added.clear();
        // Sample until the clipped rectangle is usable. The first accepted
        // rectangle also respects area ≤ target so it is never trimmed.
        let mut attempts = 0;
        let rect = loop {
            attempts += 1;
            if covered == 0 && attempts > 100 {
                break first_rect_fallback(grid_h, grid_w, min_block, target);
            }
            let area = rng.gen_range(min_block..=area_cap);
            let aspect = rng.gen_range(0.3..(1.0 / 0.3));
            let h = ((area as f64 * aspect).sqrt().round() as usize).clamp(1, grid_h);
            let w = ((area as f64 / aspect).sqrt().round() as usize).clamp(1, grid_w);
            if h * w < min_block || (covered == 0 && h * w > target) {
                continue;
            }
            break Some((h, w));
        };
        let Some((h, w)) = rect else {
            return Err(Error::Contract(format!(
                "no rectangle with area in [{min_block}, {target}] fits a {grid_h}x{grid_w} grid"
            )));
        };
        let r0 = rng.gen_range(0..=grid_h - h);
        let c0 = rng.gen_range(0..=grid_w - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let idx = r * grid_w + c;
                if !masked[idx] {
                    masked[idx] = true;
                    covered += 1;
                    last_added.push(idx);
                }
            }
        }
    }

    // Trim this rectangle's own additions, reverse row-major, to hit the
    // exact count without touching earlier rectangles.
    let excess = covered - target;
    for &idx in last_added.iter().rev().take(excess) {
        masked[idx] = false;
    }

    let positions: Vec<usize> = (0..total).filter(|&i| masked[i]).collect();
    debug_assert_eq!(positions.len(), target);
    Ok(MaskSet::new(positions, total))
}

/// Deterministic first rectangle for grids where aspect-constrained
/// sampling cannot land in [min_block, target]: the largest fitting area
/// in range, squarest shape first.
fn first_rect_fallback(
    grid_h: usize,
    grid_w: usize,
    min_block: usize,
    target: usize,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for h in 1..=grid_h {
        for w in 1..=grid_w {
            let a = h * w;
            if a < min_block || a > target {
                continue;
            }
            let better = match best {
                None => true,
                Some((bh, bw)) => {
                    let (ba, side) = (bh * bw, bh.abs_diff(bw));
                    a > ba || (a == ba && h.abs_diff(w) < side)
                }
            };
            if better {
                best = Some((h, w));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn text_counts_are_exact() {
        let m = mask_text(20, 0.15, 0).unwrap();
        assert_eq!(m.len(), 3);
        assert!(mask_text(10, 0.0, 0).unwrap().is_empty());
        assert_eq!(mask_text(10, 1.0, 0).unwrap().len(), 10);
    }

    #[test]
    fn text_rejects_out_of_range_ratio() {
        assert!(mask_text(10, -0.1, 0).is_err());
        assert!(mask_text(10, 1.5, 0).is_err());
    }

    #[test]
    fn blockwise_grid_14x14_at_40_percent() {
        for seed in 0..100 {
            let m = mask_blockwise(14, 14, 0.4, 16, seed).unwrap();
            assert_eq!(m.len(), 78, "seed {seed}");
        }
    }

    #[test]
    fn blockwise_extremes() {
        assert!(mask_blockwise(14, 14, 0.0, 16, 0).unwrap().is_empty());
        let all = mask_blockwise(14, 14, 1.0, 1, 0).unwrap();
        assert_eq!(all.len(), 196);
    }

    #[test]
    fn blockwise_infeasible_min_block() {
        // target = floor(16 * 0.25) = 4 < min_block 8
        assert!(mask_blockwise(4, 4, 0.25, 8, 0).is_err());
    }

    #[test]
    fn same_seed_same_mask_different_seeds_differ() {
        let a = mask_blockwise(14, 14, 0.4, 16, 7).unwrap();
        let b = mask_blockwise(14, 14, 0.4, 16, 7).unwrap();
        assert_eq!(a, b);

        let mut seen = HashSet::new();
        for seed in 0..100 {
            let m = mask_blockwise(14, 14, 0.4, 16, seed).unwrap();
            assert!(seen.insert(m.positions().to_vec()), "seed {seed} repeated");
        }
    }

    /// The mask must retain one full rectangle of area ≥ min_block.
    fn contains_rectangle(m: &MaskSet, grid_h: usize, grid_w: usize, min_area: usize) -> bool {
        let cell = |r: usize, c: usize| m.contains(r * grid_w + c);
        for r0 in 0..grid_h {
            for c0 in 0..grid_w {
                for h in 1..=grid_h - r0 {
                    for w in 1..=grid_w - c0 {
                        if h * w < min_area {
                            continue;
                        }
                        let full = (r0..r0 + h)
                            .all(|r| (c0..c0 + w).all(|c| cell(r, c)));
                        if full {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    #[test]
    fn blockwise_keeps_a_full_rectangle() {
        for seed in 0..50 {
            let m = mask_blockwise(14, 14, 0.4, 16, seed).unwrap();
            assert!(contains_rectangle(&m, 14, 14, 16), "seed {seed}");
        }
        for seed in 0..50 {
            let m = mask_blockwise(6, 5, 0.4, 4, seed).unwrap();
            assert_eq!(m.len(), 12);
            assert!(contains_rectangle(&m, 6, 5, 4), "seed {seed}");
        }
    }

    #[test]
    fn exact_count_across_sampled_sizes() {
        for &(h, w) in &[(4usize, 4usize), (5, 7), (8, 8), (14, 14)] {
            for &ratio in &[0.1, 0.25, 0.4, 0.6, 0.9] {
                let target = ((h * w) as f64 * ratio).floor() as usize;
                if target == 0 {
                    continue;
                }
                let mb = target.min(4);
                let m = mask_blockwise(h, w, ratio, mb, 3).unwrap();
                assert_eq!(m.len(), target, "{h}x{w} @ {ratio}");
                let t = mask_text(h * w, ratio, 3).unwrap();
                assert_eq!(t.len(), target);
            }
        }
    }

    #[test]
    fn text_masking_frequency_is_roughly_uniform() {
        let len = 20;
        let ratio = 0.25;
        let trials = 10_000;
        let mut hits = vec![0usize; len];
        for seed in 0..trials {
            for &p in mask_text(len, ratio, seed as u64).unwrap().positions() {
                hits[p] += 1;
            }
        }
        for (p, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - ratio).abs() < 0.05,
                "position {p}: frequency {freq} vs ratio {ratio}"
            );
        }
    }
}

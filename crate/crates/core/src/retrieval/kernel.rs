//! Dot-product micro-kernel for the screening pass.
//!
//! The index is repacked into groups of [`GROUP`] rows stored dimension-major,
//! so one vector load feeds [`QUERY_TILE`] broadcast FMAs. Results only choose
//! candidates; final distances are recomputed exactly, so the kernel is free
//! to use FMA and any accumulation order.

pub(super) const GROUP: usize = 16;
pub(super) const QUERY_TILE: usize = 6;

/// Base rows interleaved per group: element `(row g*GROUP + l, dim j)` lives
/// at `g*dim*GROUP + j*GROUP + l`. Trailing rows of the last group are zero.
#[derive(Debug, Clone)]
pub(super) struct PackedBase {
    data: Vec<f32>,
    dim: usize,
}

impl PackedBase {
    pub(super) fn new(base: &[f32], dim: usize) -> Self {
        let rows = base.len() / dim;
        let groups = rows.div_ceil(GROUP);
        let mut data = vec![0f32; groups * GROUP * dim];
        for (r, row) in base.chunks_exact(dim).enumerate() {
            let (g, l) = (r / GROUP, r % GROUP);
            let dst = &mut data[g * dim * GROUP..(g + 1) * dim * GROUP];
            for (j, &v) in row.iter().enumerate() {
                dst[j * GROUP + l] = v;
            }
        }
        Self { data, dim }
    }

    fn group(&self, g: usize) -> &[f32] {
        &self.data[g * self.dim * GROUP..(g + 1) * self.dim * GROUP]
    }
}

#[inline(always)]
fn tile_generic(
    queries: &[&[f32]; QUERY_TILE],
    packed: &PackedBase,
    groups: std::ops::Range<usize>,
    out: &mut [[f32; GROUP]],
) {
    let dim = packed.dim;
    let n_groups = groups.len();
    for (gi, g) in groups.enumerate() {
        let zp = packed.group(g);
        let mut acc = [[0f32; GROUP]; QUERY_TILE];
        for j in 0..dim {
            let z = &zp[j * GROUP..j * GROUP + GROUP];
            for t in 0..QUERY_TILE {
                let qv = queries[t][j];
                for l in 0..GROUP {
                    acc[t][l] = qv.mul_add(z[l], acc[t][l]);
                }
            }
        }
        for t in 0..QUERY_TILE {
            out[t * n_groups + gi] = acc[t];
        }
    }
}

#[inline(always)]
fn tile_plain(
    queries: &[&[f32]; QUERY_TILE],
    packed: &PackedBase,
    groups: std::ops::Range<usize>,
    out: &mut [[f32; GROUP]],
) {
    let dim = packed.dim;
    let n_groups = groups.len();
    for (gi, g) in groups.enumerate() {
        let zp = packed.group(g);
        let mut acc = [[0f32; GROUP]; QUERY_TILE];
        for j in 0..dim {
            let z = &zp[j * GROUP..j * GROUP + GROUP];
            for t in 0..QUERY_TILE {
                let qv = queries[t][j];
                for l in 0..GROUP {
                    acc[t][l] += qv * z[l];
                }
            }
        }
        for t in 0..QUERY_TILE {
            out[t * n_groups + gi] = acc[t];
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tile_avx2(
    queries: &[&[f32]; QUERY_TILE],
    packed: &PackedBase,
    groups: std::ops::Range<usize>,
    out: &mut [[f32; GROUP]],
) {
    tile_generic(queries, packed, groups, out)
}

/// Dots of each tile query against every row of `groups`.
///
/// `out[t * groups.len() + gi][l]` receives `queries[t] · row((groups.start + gi) * GROUP + l)`.
pub(super) fn dots_tile(
    queries: &[&[f32]; QUERY_TILE],
    packed: &PackedBase,
    groups: std::ops::Range<usize>,
    out: &mut [[f32; GROUP]],
) {
    debug_assert!(out.len() >= QUERY_TILE * groups.len());
    debug_assert!(queries.iter().all(|q| q.len() == packed.dim));
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx2_fma() {
            // SAFETY: guarded by runtime feature detection.
            unsafe { tile_avx2(queries, packed, groups, out) };
            return;
        }
    }
    tile_plain(queries, packed, groups, out)
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static DETECTED: OnceLock<bool> = OnceLock::new();
    *DETECTED.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_dots() {
        for (dim, rows) in [(1usize, 3usize), (7, 17), (8, 16), (13, 40), (64, 33)] {
            let base: Vec<f32> = (0..dim * rows).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.25).collect();
            let packed = PackedBase::new(&base, dim);
            let qs: Vec<Vec<f32>> = (0..QUERY_TILE)
                .map(|t| (0..dim).map(|j| ((j + 3 * t) % 7) as f32 * 0.5 - 1.0).collect())
                .collect();
            let tile: [&[f32]; QUERY_TILE] = std::array::from_fn(|t| &qs[t][..]);
            let groups = rows.div_ceil(GROUP);
            let mut out = vec![[0f32; GROUP]; QUERY_TILE * groups];
            dots_tile(&tile, &packed, 0..groups, &mut out);
            for r in 0..rows {
                for t in 0..QUERY_TILE {
                    let naive: f64 = (0..dim)
                        .map(|j| f64::from(qs[t][j]) * f64::from(base[r * dim + j]))
                        .sum();
                    let got = out[t * groups + r / GROUP][r % GROUP];
                    assert!((f64::from(got) - naive).abs() < 1e-4, "dim {dim} r {r} t {t}");
                }
            }
        }
    }
}

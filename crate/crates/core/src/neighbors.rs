//! Neighbor search and the per-pair kernel quantities every operator consumes.
//!
//! Pairs are kept in compressed rows: row `i` lists every `j != i` with
//! `0 < |x_i - x_j| < r0 h`, sorted by `j`. Each entry caches the distance, the radial
//! kernel derivative, the kernel gradient and the pair coefficient `B_ij = -2 ẇ_h / r`.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{IsphError, Result};
use crate::kernels::KernelSpec;
use crate::Vector;

/// Below this many particles the per-row work is done sequentially.
const PARALLEL_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub j: usize,
    /// `|x_i - x_j|`.
    pub r: f64,
    /// `ẇ_h(r) <= 0`.
    pub dw: f64,
    /// `∇w_h(x_i - x_j)`.
    pub grad: Vector,
    /// `B_ij = -2 ẇ_h(r) / r >= 0`.
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interactions {
    offsets: Vec<usize>,
    pairs: Vec<Pair>,
}

fn make_pair(kernel: &KernelSpec, xi: &Vector, xj: &Vector, j: usize) -> Pair {
    let d = xi - xj;
    let r = d.norm();
    let dw = kernel.dwh(r);
    Pair {
        j,
        r,
        dw,
        grad: d * (dw / r),
        b: -2.0 * dw / r,
    }
}

fn coincident(i: usize, j: usize, x: &Vector) -> IsphError {
    IsphError::DegenerateState(format!(
        "particles {i} and {j} coincide at ({}, {}, {})",
        x[0], x[1], x[2]
    ))
}

type CellKey = (i64, i64, i64);

impl Interactions {
    /// Cell-grid construction with cell edge `r0 h`.
    pub fn build(positions: &[Vector], kernel: &KernelSpec) -> Result<Self> {
        let cutoff = kernel.support_radius();
        if let Some(bad) = positions.iter().position(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(IsphError::DegenerateState(format!(
                "particle {bad} has a non-finite position"
            )));
        }
        if positions.is_empty() {
            return Ok(Self {
                offsets: vec![0],
                pairs: Vec::new(),
            });
        }
        let mut origin = positions[0];
        for x in positions {
            origin = origin.inf(x);
        }
        let key = |x: &Vector| -> CellKey {
            let c = (x - origin) / cutoff;
            (c[0].floor() as i64, c[1].floor() as i64, c[2].floor() as i64)
        };
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (i, x) in positions.iter().enumerate() {
            cells.entry(key(x)).or_default().push(i);
        }
        let flat = positions.iter().all(|x| x[2] == origin[2]);
        let dz: &[i64] = if flat { &[0] } else { &[-1, 0, 1] };

        let row = |i: usize| -> Result<Vec<Pair>> {
            let xi = &positions[i];
            let (cx, cy, cz) = key(xi);
            let mut out = Vec::new();
            for ox in -1..=1 {
                for oy in -1..=1 {
                    for &oz in dz {
                        let Some(members) = cells.get(&(cx + ox, cy + oy, cz + oz)) else {
                            continue;
                        };
                        for &j in members {
                            if j == i {
                                continue;
                            }
                            let r = (xi - positions[j]).norm();
                            if r == 0.0 {
                                return Err(coincident(i.min(j), i.max(j), xi));
                            }
                            if r < cutoff {
                                out.push(make_pair(kernel, xi, &positions[j], j));
                            }
                        }
                    }
                }
            }
            out.sort_unstable_by_key(|p| p.j);
            Ok(out)
        };

        let rows: Vec<Vec<Pair>> = if positions.len() >= PARALLEL_THRESHOLD {
            (0..positions.len()).into_par_iter().map(row).collect::<Result<_>>()?
        } else {
            (0..positions.len()).map(row).collect::<Result<_>>()?
        };
        Ok(Self::from_rows(rows))
    }

    /// O(N²) construction used as the reference implementation.
    pub fn build_all_pairs(positions: &[Vector], kernel: &KernelSpec) -> Result<Self> {
        let cutoff = kernel.support_radius();
        let mut rows = Vec::with_capacity(positions.len());
        for (i, xi) in positions.iter().enumerate() {
            let mut out = Vec::new();
            for (j, xj) in positions.iter().enumerate() {
                if j == i {
                    continue;
                }
                let r = (xi - xj).norm();
                if r == 0.0 {
                    return Err(coincident(i.min(j), i.max(j), xi));
                }
                if !r.is_finite() {
                    return Err(IsphError::DegenerateState(format!(
                        "non-finite distance between {i} and {j}"
                    )));
                }
                if r < cutoff {
                    out.push(make_pair(kernel, xi, xj, j));
                }
            }
            rows.push(out);
        }
        Ok(Self::from_rows(rows))
    }

    fn from_rows(rows: Vec<Vec<Pair>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut pairs = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            pairs.extend(r);
            offsets.push(pairs.len());
        }
        Self { offsets, pairs }
    }

    /// Number of particles.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[Pair] {
        &self.pairs[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Total number of stored ordered pairs.
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// `B_ij`, zero when the pair is out of range.
    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        let row = self.neighbors(i);
        match row.binary_search_by_key(&j, |p| p.j) {
            Ok(k) => row[k].b,
            Err(_) => 0.0,
        }
    }
}

//! Uniform-grid spatial hash over 2-D points.

use std::collections::HashMap;

use crate::domain::Vec2;

/// Integer cell coordinates relative to `anchor`.
pub fn cell_of(p: &Vec2, anchor: &Vec2, cell: f64) -> (i64, i64) {
    (
        ((p.x - anchor.x) / cell).floor() as i64,
        ((p.y - anchor.y) / cell).floor() as i64,
    )
}

/// Buckets point indices by cell. Neighbor queries over the 3×3 block around
/// a cell cover every point within one cell width.
#[derive(Debug, Clone)]
pub struct GridIndex {
    anchor: Vec2,
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub fn new<'a>(points: impl IntoIterator<Item = &'a Vec2>, anchor: Vec2, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, p) in points.into_iter().enumerate() {
            buckets.entry(cell_of(p, &anchor, cell)).or_default().push(k);
        }
        GridIndex {
            anchor,
            cell,
            buckets,
        }
    }

    pub fn cell(&self, p: &Vec2) -> (i64, i64) {
        cell_of(p, &self.anchor, self.cell)
    }

    /// Indices in the 3×3 block around `p`'s cell, ascending.
    pub fn neighbors(&self, p: &Vec2) -> Vec<usize> {
        let (cx, cy) = self.cell(p);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = self.buckets.get(&(cx + dx, cy + dy)) {
                    out.extend_from_slice(b);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbors_cover_one_cell_width() {
        let pts: Vec<Vec2> = (0..400)
            .map(|k| Vec2::new((k % 20) as f64 * 3.1, (k / 20) as f64 * 2.7))
            .collect();
        let grid = GridIndex::new(&pts, Vec2::new(-1.0, -1.0), 5.0);
        for q in &pts {
            let found = grid.neighbors(q);
            for (k, p) in pts.iter().enumerate() {
                if (p - q).norm() <= 5.0 {
                    assert!(found.binary_search(&k).is_ok());
                }
            }
        }
    }
}

//! Initial over-segmentation from a label map.

use std::collections::BTreeMap;

use crate::tensor::LabelMap;

/// Regions smaller than this many pixels are absorbed by a neighbor.
pub const DEFAULT_MIN_AREA: usize = 4;

/// 4-connected components, numbered in raster order of first pixel.
pub fn connected_components(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let src = labels.labels();
    let mut out = vec![u32::MAX; src.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..src.len() {
        if out[start] != u32::MAX {
            continue;
        }
        out[start] = next;
        stack.push(start);
        while let Some(u) = stack.pop() {
            let (y, x) = (u / w, u % w);
            let mut visit = |v: usize| {
                if out[v] == u32::MAX && src[v] == src[u] {
                    out[v] = next;
                    stack.push(v);
                }
            };
            if y > 0 {
                visit(u - w);
            }
            if y + 1 < h {
                visit(u + w);
            }
            if x > 0 {
                visit(u - 1);
            }
            if x + 1 < w {
                visit(u + 1);
            }
        }
        next += 1;
    }
    LabelMap::new(h, w, out).expect("shape preserved")
}

/// Number of 4-neighbor pixel pairs between each pair of regions, keyed
/// `(a, b)` with `a < b`.
pub(crate) fn shared_borders(regions: &LabelMap) -> BTreeMap<(u32, u32), usize> {
    let (h, w) = (regions.height(), regions.width());
    let r = regions.labels();
    let mut out = BTreeMap::new();
    let mut add = |a: u32, b: u32| {
        if a != b {
            *out.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            if x + 1 < w {
                add(r[u], r[u + 1]);
            }
            if y + 1 < h {
                add(r[u], r[u + w]);
            }
        }
    }
    out
}

/// Connected components with every region below `min_area` pixels merged
/// into the neighbor sharing the longest border (ties to the lower index).
/// The smallest speck is absorbed first. Output labels are contiguous in
/// raster order.
pub fn initial_regions(labels: &LabelMap, min_area: usize) -> LabelMap {
    let cc = connected_components(labels);
    let count = cc.max_label().map_or(0, |m| m as usize + 1);
    let mut area = vec![0usize; count];
    for &l in cc.labels() {
        area[l as usize] += 1;
    }
    let mut borders = shared_borders(&cc);
    // owner[r] is the region r has been merged into (itself if alive)
    let mut owner: Vec<u32> = (0..count as u32).collect();
    loop {
        let speck = (0..count)
            .filter(|&r| owner[r] == r as u32 && area[r] < min_area)
            .filter(|&r| borders.keys().any(|&(a, b)| a as usize == r || b as usize == r))
            .min_by_key(|&r| (area[r], r));
        let Some(s) = speck else { break };
        let s = s as u32;
        let target = borders
            .iter()
            .filter_map(|(&(a, b), &n)| match (a == s, b == s) {
                (true, _) => Some((b, n)),
                (_, true) => Some((a, n)),
                _ => None,
            })
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(r, _)| r)
            .expect("speck has a neighbor");
        area[target as usize] += area[s as usize];
        owner[s as usize] = target;
        let touching: Vec<((u32, u32), usize)> = borders
            .iter()
            .filter(|((a, b), _)| *a == s || *b == s)
            .map(|(k, n)| (*k, *n))
            .collect();
        for ((a, b), n) in touching {
            borders.remove(&(a, b));
            let other = if a == s { b } else { a };
            if other != target {
                *borders
                    .entry((other.min(target), other.max(target)))
                    .or_insert(0) += n;
            }
        }
    }
    let resolve = |mut r: u32| {
        while owner[r as usize] != r {
            r = owner[r as usize];
        }
        r
    };
    let merged = LabelMap::from_fn(cc.height(), cc.width(), |y, x| {
        resolve(cc.labels()[y * cc.width() + x])
    });
    relabel_raster(&merged)
}

/// Renumbers labels `0..L` in raster order of first appearance.
pub fn relabel_raster(labels: &LabelMap) -> LabelMap {
    let mut map = BTreeMap::new();
    let out = labels
        .labels()
        .iter()
        .map(|&l| {
            let next = map.len() as u32;
            *map.entry(l).or_insert(next)
        })
        .collect();
    LabelMap::new(labels.height(), labels.width(), out).expect("shape preserved")
}

/// Pixels with a 4-neighbor carrying a different label.
pub fn boundary_mask(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = (labels.height(), labels.width());
    let l = labels.labels();
    let mut out = vec![false; l.len()];
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            if x + 1 < w && l[u] != l[u + 1] {
                out[u] = true;
                out[u + 1] = true;
            }
            if y + 1 < h && l[u] != l[u + w] {
                out[u] = true;
                out[u + w] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn constant_map_is_one_region() {
        let m = LabelMap::filled(5, 7, 3);
        assert_eq!(connected_components(&m).distinct_count(), 1);
        assert_eq!(initial_regions(&m, DEFAULT_MIN_AREA).labels(), &[0; 35]);
    }

    #[test]
    fn checkerboard_components() {
        let m = LabelMap::from_fn(4, 4, |y, x| ((y + x) % 2) as u32);
        let cc = connected_components(&m);
        assert_eq!(cc.distinct_count(), 16);
        // every speck is a single pixel; absorption leaves one region
        assert_eq!(initial_regions(&m, DEFAULT_MIN_AREA).distinct_count(), 1);
    }

    #[test]
    fn speck_goes_to_longest_border() {
        // 0 0 0 1 1
        // 0 2 2 1 1   region 2 touches 0 on three edges and 1 on one
        // 0 0 0 1 1
        let m = LabelMap::new(
            3,
            5,
            vec![0, 0, 0, 1, 1, 0, 2, 2, 1, 1, 0, 0, 0, 1, 1],
        )
        .unwrap();
        let r = initial_regions(&m, 3);
        assert_eq!(r.labels(), &[0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn min_area_one_keeps_components() {
        let mut rng = Rng::new(4);
        let m = LabelMap::from_fn(9, 9, |_, _| rng.below(3) as u32);
        let cc = connected_components(&m);
        assert_eq!(initial_regions(&m, 1), cc);
    }

    #[test]
    fn boundary_mask_marks_both_sides() {
        let m = LabelMap::from_fn(2, 4, |_, x| u32::from(x >= 2));
        let b = boundary_mask(&m);
        assert_eq!(b, vec![false, true, true, false, false, true, true, false]);
    }
}

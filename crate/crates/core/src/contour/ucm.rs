//! Greedy region merging into an ultrametric contour map.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use super::BoundaryMap;
use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    /// Representative labels (smallest member) of the two merged regions.
    pub a: u32,
    pub b: u32,
    /// Ultrametric level, non-decreasing along the merge list.
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UcmHierarchy {
    pub initial: LabelMap,
    pub merges: Vec<Merge>,
    /// Per-pixel level at which the pixel stops being a boundary; zero
    /// inside initial regions.
    pub ucm: Vec<f64>,
}

/// Border pixels between each pair of adjacent regions: both pixels of
/// every 4-neighbor pair with different labels.
fn border_pixels(regions: &LabelMap) -> BTreeMap<(u32, u32), BTreeSet<usize>> {
    let (h, w) = (regions.height(), regions.width());
    let r = regions.labels();
    let mut out: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
    let mut add = |u: usize, v: usize| {
        let (a, b) = (r[u], r[v]);
        if a != b {
            let set = out.entry((a.min(b), a.max(b))).or_default();
            set.insert(u);
            set.insert(v);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            if x + 1 < w {
                add(u, u + 1);
            }
            if y + 1 < h {
                add(u, u + w);
            }
        }
    }
    out
}

fn mean_strength(pixels: &BTreeSet<usize>, strength: &[f64]) -> f64 {
    pixels.iter().map(|&p| strength[p]).sum::<f64>() / pixels.len() as f64
}

/// Merges the adjacent pair with the lowest mean border strength until one
/// region remains. Ties go to the smaller `(a, b)` pair.
pub fn build_ucm(regions: &LabelMap, boundary: &BoundaryMap) -> Result<UcmHierarchy> {
    let (h, w) = (regions.height(), regions.width());
    if boundary.height != h || boundary.width != w {
        return Err(Error::Shape(format!(
            "regions are {h}x{w} but the boundary map is {}x{}",
            boundary.height, boundary.width
        )));
    }
    let count = regions.max_label().map_or(0, |m| m as usize + 1);
    if regions.distinct_count() != count {
        return Err(Error::Structural("region labels are not contiguous".into()));
    }
    let mut edges = border_pixels(regions);
    let mut weight: BTreeMap<(u32, u32), f64> = edges
        .iter()
        .map(|(k, px)| (*k, mean_strength(px, &boundary.strength)))
        .collect();
    // merge tree: parent links over leaves 0..count and one node per merge
    let mut parent: Vec<usize> = (0..count).collect();
    let mut node_of: Vec<usize> = (0..count).collect();
    let mut level = vec![0.0f64; count];
    let mut merges = Vec::new();
    let mut last = 0.0f64;
    while let Some((&(a, b), &wt)) = weight
        .iter()
        .min_by(|x, y| x.1.total_cmp(y.1).then(x.0.cmp(y.0)))
    {
        let strength = wt.max(last);
        last = strength;
        merges.push(Merge { a, b, strength });
        let node = parent.len();
        parent.push(node);
        level.push(strength);
        parent[node_of[a as usize]] = node;
        parent[node_of[b as usize]] = node;
        node_of[a as usize] = node;
        // a < b, so the merged region keeps label a
        weight.remove(&(a, b));
        edges.remove(&(a, b));
        let moved: Vec<(u32, u32)> = edges
            .keys()
            .filter(|(x, y)| *x == b || *y == b)
            .copied()
            .collect();
        let mut touched = BTreeSet::new();
        for key in moved {
            let px = edges.remove(&key).expect("present");
            weight.remove(&key);
            let other = if key.0 == b { key.1 } else { key.0 };
            let nk = (a.min(other), a.max(other));
            edges.entry(nk).or_default().extend(px);
            touched.insert(nk);
        }
        for key in touched {
            weight.insert(key, mean_strength(&edges[&key], &boundary.strength));
        }
    }
    let roots = (0..count)
        .filter(|&r| {
            let mut n = r;
            while parent[n] != n {
                n = parent[n];
            }
            n == r || parent[r] != r
        })
        .map(|r| {
            let mut n = r;
            while parent[n] != n {
                n = parent[n];
            }
            n
        })
        .collect::<BTreeSet<_>>();
    if roots.len() > 1 {
        return Err(Error::Structural(format!(
            "region adjacency graph has {} components",
            roots.len()
        )));
    }
    let join_level = |u: u32, v: u32| -> f64 {
        let mut ancestors = BTreeSet::new();
        let mut n = u as usize;
        loop {
            ancestors.insert(n);
            if parent[n] == n {
                break;
            }
            n = parent[n];
        }
        let mut n = v as usize;
        while !ancestors.contains(&n) {
            n = parent[n];
        }
        level[n]
    };
    let r = regions.labels();
    let mut ucm = vec![0.0f64; h * w];
    let mut cache: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            for v in [
                (x + 1 < w).then(|| u + 1),
                (y + 1 < h).then(|| u + w),
            ]
            .into_iter()
            .flatten()
            {
                if r[u] != r[v] {
                    let key = (r[u].min(r[v]), r[u].max(r[v]));
                    let l = *cache.entry(key).or_insert_with(|| join_level(key.0, key.1));
                    ucm[u] = ucm[u].max(l);
                    ucm[v] = ucm[v].max(l);
                }
            }
        }
    }
    Ok(UcmHierarchy {
        initial: regions.clone(),
        merges,
        ucm,
    })
}

/// Segmentation after applying every merge with strength `<= t`, labeled
/// contiguously in raster order.
pub fn threshold_ucm(h: &UcmHierarchy, t: f64) -> LabelMap {
    let count = h.initial.max_label().map_or(0, |m| m as usize + 1);
    let mut owner: Vec<u32> = (0..count as u32).collect();
    fn find(owner: &mut [u32], mut r: u32) -> u32 {
        while owner[r as usize] != r {
            let p = owner[r as usize];
            owner[r as usize] = owner[p as usize];
            r = p;
        }
        r
    }
    for m in &h.merges {
        if m.strength > t {
            break;
        }
        let (ra, rb) = (find(&mut owner, m.a), find(&mut owner, m.b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        owner[hi as usize] = lo;
    }
    let merged: Vec<u32> = h
        .initial
        .labels()
        .iter()
        .map(|&l| find(&mut owner, l))
        .collect();
    let lm = LabelMap::new(h.initial.height(), h.initial.width(), merged).expect("shape preserved");
    super::regions::relabel_raster(&lm)
}

/// `a b strength` per line, in merge order.
pub fn write_merges(h: &UcmHierarchy, mut out: impl Write) -> std::io::Result<()> {
    for m in &h.merges {
        writeln!(out, "{} {} {}", m.a, m.b, m.strength)?;
    }
    Ok(())
}

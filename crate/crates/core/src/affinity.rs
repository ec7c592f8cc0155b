//! Sparse pixel affinity for the normalized-cut objective.
//!
//! Two pixels `i`, `j` closer than `radius` are joined with weight
//!
//! ```text
//! w_ij = exp(-|F(i) - F(j)|^2 / sigma_i^2) * exp(-|X(i) - X(j)|^2 / sigma_x^2)
//! ```
//!
//! where `F` is the pixel's channel vector on the 0–255 scale and `X` its
//! `(row, col)` position. Every pixel carries a self-loop of weight 1.
//! Rows are stored in CSR form with column indices ascending.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityParams {
    pub sigma_i: f64,
    pub sigma_x: f64,
    pub radius: f64,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            sigma_i: 10.0,
            sigma_x: 4.0,
            radius: 5.0,
        }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_i", self.sigma_i),
            ("sigma_x", self.sigma_x),
            ("radius", self.radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Integer offsets `(dy, dx)` with `dy^2 + dx^2 < radius^2`, row-major.
    pub(crate) fn offsets(&self) -> Vec<(isize, isize)> {
        let r2 = self.radius * self.radius;
        let reach = self.radius.ceil() as isize;
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if ((dy * dy + dx * dx) as f64) < r2 {
                    out.push((dy, dx));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SparseAffinity {
    height: usize,
    width: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    degree: Vec<f64>,
}

/// Builds the radius-limited affinity of `img`.
pub fn build_affinity(img: &ImageTensor, params: &AffinityParams) -> Result<SparseAffinity> {
    params.validate()?;
    if img.is_empty() {
        return Err(Error::Shape("affinity of an empty image".into()));
    }
    let (h, w) = (img.height(), img.width());
    let offsets = params.offsets();
    let inv_si2 = 1.0 / (params.sigma_i * params.sigma_i);
    let inv_sx2 = 1.0 / (params.sigma_x * params.sigma_x);
    let spatial: Vec<f64> = offsets
        .iter()
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) * inv_sx2).exp())
        .collect();

    let n = h * w;
    let mut row_start = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(n * offsets.len());
    let mut weights = Vec::with_capacity(n * offsets.len());
    let mut degree = Vec::with_capacity(n);
    row_start.push(0);
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            let fu = img.pixel(u);
            let mut total = 0.0;
            for ((dy, dx), s) in offsets.iter().zip(&spatial) {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let v = ny as usize * w + nx as usize;
                let fv = img.pixel(v);
                let dist2: f64 = fu
                    .iter()
                    .zip(fv)
                    .map(|(a, b)| {
                        let d = (a - b) * 255.0;
                        d * d
                    })
                    .sum();
                let weight = (-dist2 * inv_si2).exp() * s;
                cols.push(v);
                weights.push(weight);
                total += weight;
            }
            degree.push(total);
            row_start.push(cols.len());
        }
    }
    Ok(SparseAffinity {
        height: h,
        width: w,
        row_start,
        cols,
        weights,
        degree,
    })
}

/// Per-pixel totals `d(u) = sum_t w(u, t)`, self-weight included.
pub fn degree_vector(w: &SparseAffinity) -> &[f64] {
    &w.degree
}

impl SparseAffinity {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Stored `(column, weight)` pairs of row `u`.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_start[u]..self.row_start[u + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    /// Stored weight of `(u, v)`, or 0 when absent.
    pub fn weight(&self, u: usize, v: usize) -> f64 {
        let range = self.row_start[u]..self.row_start[u + 1];
        match self.cols[range.clone()].binary_search(&v) {
            Ok(i) => self.weights[range.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        let range = self.row_start[u]..self.row_start[u + 1];
        self.cols[range].binary_search(&v).is_ok()
    }

    /// `out = W X` for a pixel-major `N x k` matrix `X`.
    pub(crate) fn matmul(&self, x: &[f64], k: usize, out: &mut [f64]) {
        for (u, dst) in out.chunks_exact_mut(k).enumerate() {
            dst.fill(0.0);
            let range = self.row_start[u]..self.row_start[u + 1];
            for (v, w) in self.cols[range.clone()].iter().zip(&self.weights[range]) {
                for (d, s) in dst.iter_mut().zip(&x[v * k..(v + 1) * k]) {
                    *d += w * s;
                }
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.matmul(x, 1, &mut out);
        out
    }

    /// Writes `u v w` triples sorted by `(u, v)`, one per line.
    pub fn write_triples(&self, mut out: impl Write) -> std::io::Result<()> {
        for u in 0..self.len() {
            for (v, w) in self.row(u) {
                writeln!(out, "{u} {v} {w:.17e}")?;
            }
        }
        Ok(())
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_triples(&mut buf)
            .and_then(|_| buf.flush())
            .map_err(|e| Error::io(path, e))
    }
}

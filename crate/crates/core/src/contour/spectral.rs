//! Spectral boundary term from the leading eigenvectors of an
//! intervening-contour graph built on the local cue map.

use super::BoundaryMap;
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralParams {
    /// Nontrivial eigenvectors to extract.
    pub vectors: usize,
    /// Residual tolerance `|L v - lambda v|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Graph neighborhood radius in pixels.
    pub radius: f64,
    /// Intervening-contour decay: `w = exp(-max_on_segment / rho)`.
    pub rho: f64,
    /// Largest side of the grid the eigenproblem runs on.
    pub max_side: usize,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self {
            vectors: 4,
            tolerance: 1e-6,
            max_iterations: 2000,
            radius: 3.0,
            rho: 0.1,
            max_side: 64,
        }
    }
}

/// Symmetric sparse graph in CSR form.
#[derive(Clone, Debug)]
pub struct IcGraph {
    pub height: usize,
    pub width: usize,
    pub row_start: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
    pub degree: Vec<f64>,
}

impl IcGraph {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    /// `y = D^-1/2 W D^-1/2 x`.
    pub fn normalized_apply(&self, x: &[f64], y: &mut [f64]) {
        for u in 0..self.len() {
            let mut acc = 0.0;
            for i in self.row_start[u]..self.row_start[u + 1] {
                let v = self.cols[i];
                acc += self.weights[i] * x[v] / self.degree[v].sqrt();
            }
            y[u] = acc / self.degree[u].sqrt();
        }
    }
}

/// Max-pools `strength` onto a grid whose sides are at most `max_side`.
pub fn downscale_max(map: &BoundaryMap, max_side: usize) -> BoundaryMap {
    let f = map.height.max(map.width).div_ceil(max_side).max(1);
    if f == 1 {
        return map.clone();
    }
    let (h, w) = (map.height.div_ceil(f), map.width.div_ceil(f));
    let mut out = vec![0.0f64; h * w];
    for y in 0..map.height {
        for x in 0..map.width {
            let d = &mut out[(y / f) * w + x / f];
            *d = d.max(map.strength[y * map.width + x]);
        }
    }
    BoundaryMap::new(h, w, out)
}

/// Largest cue value on the discrete segment between two pixels.
fn max_on_segment(map: &BoundaryMap, (y0, x0): (usize, usize), (y1, x1): (usize, usize)) -> f64 {
    let dy = y1 as f64 - y0 as f64;
    let dx = x1 as f64 - x0 as f64;
    let steps = dy.abs().max(dx.abs()) as usize;
    let mut m = 0.0f64;
    for s in 0..=steps {
        let t = if steps == 0 { 0.0 } else { s as f64 / steps as f64 };
        let y = (y0 as f64 + t * dy).round() as usize;
        let x = (x0 as f64 + t * dx).round() as usize;
        m = m.max(map.strength[y * map.width + x]);
    }
    m
}

pub fn intervening_contour_graph(map: &BoundaryMap, params: &SpectralParams) -> IcGraph {
    let (h, w) = (map.height, map.width);
    let reach = params.radius.floor() as isize;
    let r2 = params.radius * params.radius;
    let mut row_start = vec![0];
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    let mut degree = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut d = 0.0;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if (dy == 0 && dx == 0) || ((dy * dy + dx * dx) as f64) > r2 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    let wt = (-max_on_segment(map, (y, x), (yy, xx)) / params.rho).exp();
                    cols.push(yy * w + xx);
                    weights.push(wt);
                    d += wt;
                }
            }
            row_start.push(cols.len());
            degree.push(d);
        }
    }
    IcGraph {
        height: h,
        width: w,
        row_start,
        cols,
        weights,
        degree,
    }
}

/// Eigenpairs of the normalized Laplacian `I - D^-1/2 W D^-1/2`.
#[derive(Clone, Debug)]
pub struct Eigenpairs {
    /// Laplacian eigenvalues, ascending after the trivial one.
    pub values: Vec<f64>,
    /// Unit eigenvectors of the normalized Laplacian.
    pub vectors: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

/// `|L v - lambda v|` with `lambda = v' L v`, for unit `v`.
pub fn laplacian_residual(g: &IcGraph, v: &[f64]) -> (f64, f64) {
    let mut mv = vec![0.0; v.len()];
    g.normalized_apply(v, &mut mv);
    let lv: Vec<f64> = v.iter().zip(&mv).map(|(a, b)| a - b).collect();
    let lambda = dot(v, &lv);
    let r = lv
        .iter()
        .zip(v)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt();
    (lambda, r)
}

/// Columns of `block` made orthonormal and orthogonal to `fixed`; a
/// column that collapses is replaced by a fresh random direction.
fn orthonormalize_block(block: &mut [Vec<f64>], fixed: &[Vec<f64>], rng: &mut Rng) {
    for i in 0..block.len() {
        for _attempt in 0..3 {
            let (done, rest) = block.split_at_mut(i);
            let v = &mut rest[0];
            orthogonalize(v, fixed);
            orthogonalize(v, done);
            // second pass against cancellation
            orthogonalize(v, fixed);
            orthogonalize(v, done);
            if normalize(v) > 1e-12 {
                break;
            }
            v.iter_mut().for_each(|x| *x = rng.uniform() - 0.5);
        }
    }
}

/// Smallest nontrivial Laplacian eigenpairs by block subspace iteration
/// with Rayleigh-Ritz on `A = (I + D^-1/2 W D^-1/2) / 2`, deflated against
/// the trivial vector `D^1/2 1`. The block carries extra columns so
/// clustered eigenvalues converge at the rate set by the first eigenvalue
/// outside the block.
pub fn leading_eigenvectors(g: &IcGraph, params: &SpectralParams) -> Result<Eigenpairs> {
    let n = g.len();
    if n < 2 {
        return Err(Error::Shape("spectral cue needs at least two pixels".into()));
    }
    if g.degree.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Domain("isolated pixel in the contour graph".into()));
    }
    let wanted = params.vectors.min(n - 1);
    let mut trivial: Vec<f64> = g.degree.iter().map(|d| d.sqrt()).collect();
    normalize(&mut trivial);
    let fixed = [trivial];
    let m = (wanted + 4).min(n - 1);
    let mut rng = Rng::new(0x05ee_d5bb);
    let mut q: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.uniform() - 0.5).collect())
        .collect();
    orthonormalize_block(&mut q, &fixed, &mut rng);

    let apply = |x: &[f64]| {
        let mut y = vec![0.0; n];
        g.normalized_apply(x, &mut y);
        for (a, b) in y.iter_mut().zip(x) {
            *a = 0.5 * (*a + b);
        }
        y
    };
    let mut converged = false;
    let mut iters = 0;
    let mut ritz: Vec<Vec<f64>> = Vec::new();
    while iters < params.max_iterations {
        iters += 1;
        let aq: Vec<Vec<f64>> = q.iter().map(|v| apply(v)).collect();
        let h = nalgebra::DMatrix::from_fn(m, m, |i, j| 0.5 * (dot(&q[i], &aq[j]) + dot(&q[j], &aq[i])));
        let eig = nalgebra::SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let combine = |basis: &[Vec<f64>], c: usize| {
            let mut out = vec![0.0; n];
            for (r, b) in basis.iter().enumerate() {
                let coef = eig.eigenvectors[(r, c)];
                for (o, x) in out.iter_mut().zip(b) {
                    *o += coef * x;
                }
            }
            out
        };
        ritz = order.iter().map(|&c| combine(&q, c)).collect();
        let a_ritz: Vec<Vec<f64>> = order.iter().map(|&c| combine(&aq, c)).collect();
        // L = 2 (I - A), so the Laplacian residual is twice the A residual
        converged = (0..wanted).all(|i| {
            let theta = eig.eigenvalues[order[i]];
            let r2: f64 = a_ritz[i]
                .iter()
                .zip(&ritz[i])
                .map(|(a, x)| (a - theta * x).powi(2))
                .sum();
            2.0 * r2.sqrt() <= params.tolerance
        });
        if converged {
            break;
        }
        q = a_ritz;
        orthonormalize_block(&mut q, &fixed, &mut rng);
    }
    let mut out = Eigenpairs {
        values: Vec::with_capacity(wanted),
        vectors: Vec::with_capacity(wanted),
        converged,
        iterations: vec![iters; wanted],
    };
    for mut v in ritz.into_iter().take(wanted) {
        normalize(&mut v);
        out.values.push(laplacian_residual(g, &v).0);
        out.vectors.push(v);
    }
    Ok(out)
}

/// Oriented derivative of the eigenvector images, summed over vectors with
/// weight `1 / sqrt(lambda)` and maximized over `orientations`, restricted
/// to the support of `mpb` and scaled to a maximum of 1.
///
/// Returns the zero map (with a warning) if the eigensolver does not
/// converge.
pub fn spectral_cue(
    mpb: &BoundaryMap,
    orientations: usize,
    params: &SpectralParams,
) -> Result<BoundaryMap> {
    let zero = BoundaryMap::new(mpb.height, mpb.width, vec![0.0; mpb.strength.len()]);
    if mpb.strength.iter().all(|v| *v == 0.0) {
        return Ok(zero);
    }
    let small = downscale_max(mpb, params.max_side);
    let g = intervening_contour_graph(&small, params);
    let eig = leading_eigenvectors(&g, params)?;
    if !eig.converged {
        log::warn!(
            "spectral eigensolver did not converge within {} iterations; sPb set to zero",
            params.max_iterations
        );
        return Ok(zero);
    }
    let (sh, sw) = (small.height, small.width);
    let fy = mpb.height as f64 / sh as f64;
    let fx = mpb.width as f64 / sw as f64;
    // generalized eigenvectors D^-1/2 v, upsampled by nearest neighbor
    let images: Vec<Vec<f64>> = eig
        .vectors
        .iter()
        .map(|v| {
            let gen: Vec<f64> = v.iter().zip(&g.degree).map(|(a, d)| a / d.sqrt()).collect();
            let mut up = vec![0.0; mpb.height * mpb.width];
            for y in 0..mpb.height {
                for x in 0..mpb.width {
                    let sy = ((y as f64 / fy) as usize).min(sh - 1);
                    let sx = ((x as f64 / fx) as usize).min(sw - 1);
                    up[y * mpb.width + x] = gen[sy * sw + sx];
                }
            }
            up
        })
        .collect();
    let angles = super::cues::orientation_angles(orientations.max(2));
    let (h, w) = (mpb.height, mpb.width);
    let mut cue = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            if mpb.strength[u] == 0.0 {
                continue;
            }
            let mut best = 0.0f64;
            for t in &angles {
                let (c, s) = (t.cos(), t.sin());
                let mut sum = 0.0;
                for (img, lambda) in images.iter().zip(&eig.values) {
                    let gx = central_diff(img, w, h, y, x, false);
                    let gy = central_diff(img, w, h, y, x, true);
                    sum += (c * gx + s * gy).abs() / lambda.max(1e-12).sqrt();
                }
                best = best.max(sum);
            }
            cue[u] = best;
        }
    }
    let m = cue.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for v in &mut cue {
            *v /= m;
        }
    }
    Ok(BoundaryMap::new(h, w, cue))
}

fn central_diff(img: &[f64], w: usize, h: usize, y: usize, x: usize, vertical: bool) -> f64 {
    if vertical {
        let (a, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
        (img[b * w + x] - img[a * w + x]) / (b - a).max(1) as f64
    } else {
        let (a, b) = (x.saturating_sub(1), (x + 1).min(w - 1));
        (img[y * w + b] - img[y * w + a]) / (b - a).max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_gives_zero_cue() {
        let m = BoundaryMap::new(8, 8, vec![0.0; 64]);
        let c = spectral_cue(&m, 8, &SpectralParams::default()).unwrap();
        assert!(c.strength.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn downscale_keeps_maxima() {
        let mut s = vec![0.0; 100];
        s[55] = 0.7;
        let m = BoundaryMap::new(10, 10, s);
        let d = downscale_max(&m, 4);
        assert_eq!((d.height, d.width), (4, 4));
        assert_eq!(d.strength.iter().copied().fold(0.0, f64::max), 0.7);
        assert_eq!(d.strength[4 + 5 / 3], 0.7);
    }

    #[test]
    fn graph_is_symmetric() {
        let mut rng = Rng::new(2);
        let m = BoundaryMap::new(6, 7, (0..42).map(|_| rng.uniform()).collect());
        let g = intervening_contour_graph(&m, &SpectralParams::default());
        for u in 0..g.len() {
            for i in g.row_start[u]..g.row_start[u + 1] {
                let v = g.cols[i];
                let back = (g.row_start[v]..g.row_start[v + 1])
                    .find(|&j| g.cols[j] == u)
                    .unwrap();
                assert_eq!(g.weights[i], g.weights[back]);
            }
        }
    }
}

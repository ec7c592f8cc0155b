//! Normalized-cut objectives over a [`SparseAffinity`].
//!
//! The soft loss is evaluated in matrix form,
//!
//! ```text
//! J = K - sum_k (p_k' W p_k) / (p_k' d)
//! ```
//!
//! with `p_k` the per-class probability column and `d` the degree vector.
//! Its gradient with respect to the probabilities is returned before any
//! softmax composition; the network applies the softmax Jacobian itself.

use crate::affinity::SparseAffinity;
use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// `H x W x K` per-pixel class probabilities, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSegmentation {
    height: usize,
    width: usize,
    k: usize,
    probs: Vec<f64>,
}

impl SoftSegmentation {
    /// Validates the simplex invariant (entries in `[0, 1]`, rows sum to 1
    /// within 1e-6).
    pub fn new(height: usize, width: usize, k: usize, probs: Vec<f64>) -> Result<Self> {
        let s = Self::from_raw(height, width, k, probs)?;
        for (u, row) in s.probs.chunks_exact(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "pixel {u} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(s)
    }

    /// Shape-checked constructor without the simplex check.
    pub fn from_raw(height: usize, width: usize, k: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Shape("K must be at least 1".into()));
        }
        if probs.len() != height * width * k {
            return Err(Error::Shape(format!(
                "{} probabilities for {height}x{width}x{k}",
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            k,
            probs,
        })
    }

    pub fn uniform(height: usize, width: usize, k: usize) -> Self {
        Self {
            height,
            width,
            k,
            probs: vec![1.0 / k as f64; height * width * k],
        }
    }

    /// Embeds a labelling as `1 - (K-1) eps` on the label and `eps` elsewhere.
    pub fn one_hot(labels: &LabelMap, k: usize, eps: f64) -> Result<Self> {
        let mut probs = vec![eps; labels.len() * k];
        for (u, l) in labels.labels().iter().enumerate() {
            let l = *l as usize;
            if l >= k {
                return Err(Error::Domain(format!("label {l} not below K = {k}")));
            }
            probs[u * k + l] = 1.0 - (k - 1) as f64 * eps;
        }
        Self::new(labels.height(), labels.width(), k, probs)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    #[inline]
    pub fn pixel(&self, u: usize) -> &[f64] {
        &self.probs[u * self.k..(u + 1) * self.k]
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(self.k)
            .map(|row| {
                let mut best = 0;
                for (i, p) in row.iter().enumerate() {
                    if *p > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap::new(self.height, self.width, labels).expect("shape preserved")
    }
}

fn check_shapes(pixels: usize, w: &SparseAffinity) -> Result<()> {
    if pixels != w.len() {
        return Err(Error::Shape(format!(
            "{pixels} pixels against an affinity over {} pixels",
            w.len()
        )));
    }
    Ok(())
}

/// Discrete normalized cut `sum_k cut(A_k, V - A_k) / assoc(A_k, V)`.
/// Empty classes contribute 0.
pub fn hard_ncut(labels: &LabelMap, w: &SparseAffinity, k: usize) -> Result<f64> {
    check_shapes(labels.len(), w)?;
    let l = labels.labels();
    if let Some(bad) = l.iter().find(|x| **x as usize >= k) {
        return Err(Error::Domain(format!("label {bad} not below K = {k}")));
    }
    let mut cut = vec![0.0; k];
    let mut assoc = vec![0.0; k];
    for u in 0..w.len() {
        let lu = l[u] as usize;
        for (v, weight) in w.row(u) {
            if l[v] as usize != lu {
                cut[lu] += weight;
            }
        }
        assoc[lu] += w.degree()[u];
    }
    Ok(cut
        .iter()
        .zip(&assoc)
        .filter(|(_, a)| **a > 0.0)
        .map(|(c, a)| c / a)
        .sum())
}

/// Per-class `(p_k' W p_k, p_k' d)` and the `W p_k` columns (pixel-major).
struct ClassTerms {
    assoc_within: Vec<f64>,
    assoc_total: Vec<f64>,
    w_p: Vec<f64>,
}

fn class_terms(p: &SoftSegmentation, w: &SparseAffinity) -> Result<ClassTerms> {
    check_shapes(p.pixel_count(), w)?;
    let k = p.k();
    let mut w_p = vec![0.0; p.probs.len()];
    w.matmul(p.probs(), k, &mut w_p);
    let mut assoc_within = vec![0.0; k];
    let mut assoc_total = vec![0.0; k];
    for ((pu, wpu), du) in p.probs().chunks_exact(k).zip(w_p.chunks_exact(k)).zip(w.degree()) {
        for c in 0..k {
            assoc_within[c] += pu[c] * wpu[c];
            assoc_total[c] += pu[c] * du;
        }
    }
    if let Some(c) = assoc_total.iter().position(|b| !(*b > 0.0)) {
        return Err(Error::DegenerateClass(c));
    }
    Ok(ClassTerms {
        assoc_within,
        assoc_total,
        w_p,
    })
}

/// Soft normalized-cut loss.
pub fn soft_ncut(p: &SoftSegmentation, w: &SparseAffinity) -> Result<f64> {
    let t = class_terms(p, w)?;
    let ratio: f64 = t
        .assoc_within
        .iter()
        .zip(&t.assoc_total)
        .map(|(a, b)| a / b)
        .sum();
    Ok(p.k() as f64 - ratio)
}

/// Gradient of [`soft_ncut`] with respect to every probability, laid out
/// like `p.probs()`.
pub fn soft_ncut_grad(p: &SoftSegmentation, w: &SparseAffinity) -> Result<Vec<f64>> {
    Ok(soft_ncut_with_grad(p, w)?.1)
}

/// Loss and gradient in one pass.
///
/// With `K = 1` every probability is pinned to 1, so the loss is constant
/// and the gradient is returned as zeros.
pub fn soft_ncut_with_grad(p: &SoftSegmentation, w: &SparseAffinity) -> Result<(f64, Vec<f64>)> {
    let t = class_terms(p, w)?;
    let k = p.k();
    if k == 1 {
        return Ok((0.0, vec![0.0; p.probs.len()]));
    }
    let d = w.degree();
    let mut grad = t.w_p;
    let mut loss = k as f64;
    for c in 0..k {
        let a = t.assoc_within[c];
        let b = t.assoc_total[c];
        loss -= a / b;
        let scale_wp = -2.0 / b;
        let scale_d = a / (b * b);
        for (u, du) in d.iter().enumerate() {
            let g = &mut grad[u * k + c];
            *g = scale_wp * *g + scale_d * du;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{build_affinity, AffinityParams};
    use crate::tensor::{ImageTensor, Rng};

    fn aff(img: &ImageTensor) -> SparseAffinity {
        build_affinity(img, &AffinityParams::default()).unwrap()
    }

    #[test]
    fn separated_clusters_have_zero_cut() {
        // two 2-pixel clusters five columns apart share no edge under r = 5
        let img = ImageTensor::zeros(1, 2, 1);
        let w = build_affinity(&img, &AffinityParams { radius: 1.0, ..Default::default() })
            .unwrap();
        let lab = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(hard_ncut(&lab, &w, 2).unwrap(), 0.0);

        let img = ImageTensor::zeros(2, 7, 1);
        let w = aff(&img);
        let lab = LabelMap::from_fn(2, 7, |_, x| (x >= 4) as u32);
        assert!(hard_ncut(&lab, &w, 2).unwrap() > 0.0);
        assert!(matches!(hard_ncut(&lab, &w, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn single_label_is_zero() {
        let mut rng = Rng::new(4);
        let img = ImageTensor::from_fn(5, 5, 1, |_, _, _| rng.uniform());
        let w = aff(&img);
        assert_eq!(hard_ncut(&LabelMap::filled(5, 5, 0), &w, 1).unwrap(), 0.0);
        // empty classes contribute nothing
        assert_eq!(hard_ncut(&LabelMap::filled(5, 5, 0), &w, 4).unwrap(), 0.0);
    }

    #[test]
    fn k_one_and_uniform_values() {
        let mut rng = Rng::new(5);
        let img = ImageTensor::from_fn(6, 6, 3, |_, _, _| rng.uniform());
        let w = aff(&img);
        assert_eq!(soft_ncut(&SoftSegmentation::uniform(6, 6, 1), &w).unwrap(), 0.0);
        for k in 2..6 {
            let loss = soft_ncut(&SoftSegmentation::uniform(6, 6, k), &w).unwrap();
            assert!((loss - (k as f64 - 1.0)).abs() < 1e-12);
        }
        let g = soft_ncut_grad(&SoftSegmentation::uniform(6, 6, 1), &w).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = aff(&ImageTensor::zeros(3, 3, 1));
        assert!(matches!(
            soft_ncut(&SoftSegmentation::uniform(2, 2, 3), &w),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_mass_class_is_degenerate() {
        let w = aff(&ImageTensor::zeros(2, 2, 1));
        let p = SoftSegmentation::from_raw(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
            .unwrap();
        assert!(matches!(soft_ncut(&p, &w), Err(Error::DegenerateClass(1))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = SoftSegmentation::new(1, 2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(p.argmax().labels(), &[0, 1]);
    }
}

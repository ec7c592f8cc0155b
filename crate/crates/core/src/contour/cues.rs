//! Multi-scale local boundary cues evaluated on region borders only.
//!
//! For each border pixel, scale and orientation, a disc of radius `s` is
//! split by the diameter at angle `theta` into two halves. The cue for a
//! channel is the chi-squared distance between the two halves' normalized
//! histograms:
//!
//! ```text
//! chi2(g, h) = 1/2 * sum_b (g_b - h_b)^2 / (g_b + h_b)      in [0, 1]
//! ```
//!
//! The per-pixel strength is the maximum over orientations of the
//! weighted channel/scale sum, passed through a logistic rescaled so that
//! 0 maps to 0 and 1 maps to 1.

use std::f64::consts::PI;

use super::regions::boundary_mask;
use super::BoundaryMap;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct CueParams {
    /// Disc radii in pixels.
    pub scales: Vec<f64>,
    pub orientations: usize,
    /// Histogram bins per continuous channel.
    pub bins: usize,
    /// Per-(channel, scale) weights, channel-major. Uniform when `None`.
    pub beta: Option<Vec<f64>>,
    /// Weight of the spectral term when `use_spb` is set.
    pub gamma: f64,
    pub use_texture: bool,
    pub use_spb: bool,
    /// Logistic slope and midpoint.
    pub logistic_a: f64,
    pub logistic_b: f64,
}

impl Default for CueParams {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 4.0, 8.0],
            orientations: 8,
            bins: 25,
            beta: None,
            gamma: 0.5,
            use_texture: false,
            use_spb: false,
            logistic_a: 8.0,
            logistic_b: 0.25,
        }
    }
}

/// Number of texton clusters used by the texture channel.
pub const TEXTONS: usize = 16;

impl CueParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Param("disc radii must be positive".into()));
        }
        if self.orientations < 2 {
            return Err(Error::Param("at least 2 orientations are required".into()));
        }
        if self.bins == 0 {
            return Err(Error::Param("histogram bins must be positive".into()));
        }
        if !(self.logistic_a > 0.0) {
            return Err(Error::Param("logistic slope must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Param("gamma must be non-negative".into()));
        }
        Ok(())
    }

    /// Normalized weights for `channels` channels, channel-major.
    fn weights(&self, channels: usize) -> Result<Vec<f64>> {
        let n = channels * self.scales.len();
        match &self.beta {
            None => Ok(vec![1.0 / n as f64; n]),
            Some(b) if b.len() == n && b.iter().all(|v| *v >= 0.0) => Ok(b.clone()),
            Some(b) => Err(Error::Param(format!(
                "beta needs {n} non-negative weights, got {}",
                b.len()
            ))),
        }
    }

    /// Logistic of `x`, affinely rescaled to send 0 to 0 and 1 to 1.
    pub fn squash(&self, x: f64) -> f64 {
        let s = |v: f64| 1.0 / (1.0 + (-self.logistic_a * (v - self.logistic_b)).exp());
        let (lo, hi) = (s(0.0), s(1.0));
        ((s(x) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// A quantized feature plane.
#[derive(Clone, Debug)]
pub(crate) struct Channel {
    pub bins: usize,
    pub values: Vec<usize>,
}

fn quantize(v: &[f64], bins: usize) -> Channel {
    Channel {
        bins,
        values: v
            .iter()
            .map(|x| ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1))
            .collect(),
    }
}

/// Brightness plus two opponent color planes (RGB input), or brightness
/// alone (gray input), each in `[0, 1]`.
pub fn feature_planes(img: &ImageTensor) -> Result<Vec<Vec<f64>>> {
    match img.channels() {
        1 => Ok(vec![img.data().to_vec()]),
        3 => {
            let n = img.pixel_count();
            let mut l = Vec::with_capacity(n);
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            for u in 0..n {
                let p = img.pixel(u);
                l.push((p[0] + p[1] + p[2]) / 3.0);
                a.push((p[0] - p[1] + 1.0) / 2.0);
                b.push(((p[0] + p[1]) / 2.0 - p[2] + 1.0) / 2.0);
            }
            Ok(vec![l, a, b])
        }
        c => Err(Error::Shape(format!("cues need 1 or 3 channels, got {c}"))),
    }
}

/// Texton labels: responses of a small oriented filter bank on brightness,
/// clustered by k-means with a fixed seed.
pub(crate) fn texton_channel(bright: &[f64], h: usize, w: usize) -> Channel {
    let sigma = 1.0f64;
    let reach = 3isize;
    let mut bank: Vec<Vec<(isize, isize, f64)>> = Vec::new();
    for o in 0..4 {
        let t = o as f64 * PI / 4.0;
        let (c, s) = (t.cos(), t.sin());
        let mut taps = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let along = dx as f64 * c + dy as f64 * s;
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                taps.push((dy, dx, -along * g));
            }
        }
        bank.push(taps);
    }
    let mut dog = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let r2 = (dx * dx + dy * dy) as f64;
            let g = |s: f64| (-r2 / (2.0 * s * s)).exp() / (2.0 * PI * s * s);
            dog.push((dy, dx, g(sigma) - g(2.0 * sigma)));
        }
    }
    bank.push(dog);
    let dims = bank.len();
    let n = h * w;
    let mut feats = vec![0.0; n * dims];
    for y in 0..h {
        for x in 0..w {
            for (f, taps) in bank.iter().enumerate() {
                let mut acc = 0.0;
                for &(dy, dx, k) in taps {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += k * bright[yy * w + xx];
                }
                feats[(y * w + x) * dims + f] = acc;
            }
        }
    }
    let k = TEXTONS.min(n.max(1));
    let mut rng = Rng::new(0x07e4_70a5);
    let mut centers: Vec<f64> = (0..k)
        .flat_map(|_| {
            let u = rng.below(n);
            feats[u * dims..(u + 1) * dims].to_vec()
        })
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for u in 0..n {
            let f = &feats[u * dims..(u + 1) * dims];
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d: f64 = f
                    .iter()
                    .zip(&centers[c * dims..(c + 1) * dims])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[u] = best.1;
        }
        let mut sums = vec![0.0; k * dims];
        let mut counts = vec![0usize; k];
        for u in 0..n {
            counts[assign[u]] += 1;
            for d in 0..dims {
                sums[assign[u] * dims + d] += feats[u * dims + d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dims {
                    centers[c * dims + d] = sums[c * dims + d] / counts[c] as f64;
                }
            }
        }
    }
    Channel {
        bins: k,
        values: assign,
    }
}

/// One half-disc pair: pixel offsets on either side of the diameter.
#[derive(Clone, Debug)]
pub(crate) struct HalfDiscs {
    pub left: Vec<(isize, isize)>,
    pub right: Vec<(isize, isize)>,
}

/// Offsets `(dy, dx)` within `radius`, split by the diameter at angle
/// `theta` (direction `(cos theta, sin theta)` in `(x, y)` image
/// coordinates). Pixels on the diameter belong to neither half.
pub(crate) fn half_discs(radius: f64, theta: f64) -> HalfDiscs {
    let reach = radius.floor() as isize;
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = HalfDiscs {
        left: Vec::new(),
        right: Vec::new(),
    };
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if ((dy * dy + dx * dx) as f64) > radius * radius {
                continue;
            }
            let side = dx as f64 * s - dy as f64 * c;
            if side > 1e-9 {
                out.right.push((dy, dx));
            } else if side < -1e-9 {
                out.left.push((dy, dx));
            }
        }
    }
    out
}

pub fn chi_squared(g: &[f64], h: &[f64]) -> f64 {
    0.5 * g
        .iter()
        .zip(h)
        .filter(|(a, b)| **a + **b > 0.0)
        .map(|(a, b)| (a - b) * (a - b) / (a + b))
        .sum::<f64>()
}

fn half_histogram(
    ch: &Channel,
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    offsets: &[(isize, isize)],
    hist: &mut [f64],
) -> f64 {
    hist.fill(0.0);
    let mut total = 0.0;
    for &(dy, dx) in offsets {
        let (yy, xx) = (y as isize + dy, x as isize + dx);
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            continue;
        }
        hist[ch.values[yy as usize * w + xx as usize]] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        for v in hist.iter_mut() {
            *v /= total;
        }
    }
    total
}

/// Orientation angles `o * pi / count`.
pub fn orientation_angles(count: usize) -> Vec<f64> {
    (0..count).map(|o| o as f64 * PI / count as f64).collect()
}

/// Raw (pre-logistic) oriented cue at one pixel for each orientation.
pub(crate) fn oriented_responses(
    channels: &[Channel],
    weights: &[f64],
    discs: &[Vec<HalfDiscs>],
    h: usize,
    w: usize,
    y: usize,
    x: usize,
) -> Vec<f64> {
    let n_orient = discs[0].len();
    let mut resp = vec![0.0; n_orient];
    for (ci, ch) in channels.iter().enumerate() {
        let mut g = vec![0.0; ch.bins];
        let mut hh = vec![0.0; ch.bins];
        for (si, per_scale) in discs.iter().enumerate() {
            let beta = weights[ci * discs.len() + si];
            for (o, hd) in per_scale.iter().enumerate() {
                let nl = half_histogram(ch, h, w, y, x, &hd.left, &mut g);
                let nr = half_histogram(ch, h, w, y, x, &hd.right, &mut hh);
                // a half entirely outside the image carries no evidence
                if nl > 0.0 && nr > 0.0 {
                    resp[o] += beta * chi_squared(&g, &hh);
                }
            }
        }
    }
    resp
}

pub(crate) fn prepare_channels(img: &ImageTensor, params: &CueParams) -> Result<Vec<Channel>> {
    let planes = feature_planes(img)?;
    let mut channels: Vec<Channel> = planes.iter().map(|p| quantize(p, params.bins)).collect();
    if params.use_texture {
        channels.push(texton_channel(&planes[0], img.height(), img.width()));
    }
    Ok(channels)
}

/// Boundary strengths on the border pixels of `support`, before the
/// logistic. Zero elsewhere.
pub fn raw_local_cues(
    img: &ImageTensor,
    support: &LabelMap,
    params: &CueParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    if support.height() != h || support.width() != w {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but the label map is {}x{}",
            support.height(),
            support.width()
        )));
    }
    let half = h.min(w) as f64 / 2.0;
    if let Some(r) = params.scales.iter().find(|r| **r > half) {
        return Err(Error::Param(format!(
            "disc radius {r} exceeds half the image size ({half})"
        )));
    }
    let channels = prepare_channels(img, params)?;
    let weights = params.weights(channels.len())?;
    let angles = orientation_angles(params.orientations);
    let discs: Vec<Vec<HalfDiscs>> = params
        .scales
        .iter()
        .map(|r| angles.iter().map(|t| half_discs(*r, *t)).collect())
        .collect();
    let mask = boundary_mask(support);
    let mut out = vec![0.0; h * w];
    for (u, on) in mask.iter().enumerate() {
        if *on {
            let resp = oriented_responses(&channels, &weights, &discs, h, w, u / w, u % w);
            out[u] = resp.iter().copied().fold(0.0, f64::max);
        }
    }
    Ok(out)
}

/// mPb restricted to the borders of `support`, squashed into `[0, 1]`.
pub fn local_cues(img: &ImageTensor, support: &LabelMap, params: &CueParams) -> Result<BoundaryMap> {
    let raw = raw_local_cues(img, support, params)?;
    let strength = raw.iter().map(|v| if *v > 0.0 { params.squash(*v) } else { 0.0 }).collect();
    Ok(BoundaryMap::new(img.height(), img.width(), strength))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(h: usize, w: usize) -> (ImageTensor, LabelMap) {
        let img = ImageTensor::from_fn(h, w, 1, |_, x, _| if x < w / 2 { 0.0 } else { 1.0 });
        let lm = LabelMap::from_fn(h, w, |_, x| u32::from(x >= w / 2));
        (img, lm)
    }

    #[test]
    fn constant_image_has_no_strength() {
        let img = ImageTensor::from_fn(16, 16, 3, |_, _, c| 0.2 * c as f64);
        let lm = LabelMap::from_fn(16, 16, |y, _| u32::from(y >= 6));
        let b = local_cues(&img, &lm, &CueParams::default()).unwrap();
        assert!(b.strength.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aligned_step_is_disjoint() {
        let (img, lm) = step_image(16, 16);
        let params = CueParams {
            scales: vec![3.0],
            orientations: 4,
            ..CueParams::default()
        };
        let ch = prepare_channels(&img, &params).unwrap();
        let angles = orientation_angles(4);
        let discs = vec![angles.iter().map(|t| half_discs(3.0, *t)).collect::<Vec<_>>()];
        // pixel just left of the edge: the vertical diameter runs through
        // column 7, so offset the disc to sit on the edge between 7 and 8
        let resp = oriented_responses(&ch, &[1.0], &discs, 16, 16, 8, 7);
        let vertical = 2; // angle pi/2
        assert!(resp[vertical] > resp[0]);
        let at_edge = oriented_responses(&ch, &[1.0], &discs, 16, 16, 8, 8);
        assert!(at_edge[vertical] > 0.0);
        // a disc centred on column 8 splits columns < 8 (all dark) from > 8
        // (all bright)
        assert!((at_edge[vertical] - 1.0).abs() < 1e-12);
        for (o, r) in at_edge.iter().enumerate() {
            if o != vertical {
                assert!(*r < at_edge[vertical]);
            }
        }
        let _ = lm;
    }

    #[test]
    fn support_restricts_output() {
        let (img, lm) = step_image(16, 16);
        let b = local_cues(&img, &lm, &CueParams { scales: vec![2.0, 4.0], ..CueParams::default() }).unwrap();
        let mask = boundary_mask(&lm);
        for (u, v) in b.strength.iter().enumerate() {
            assert!((0.0..=1.0).contains(v));
            if !mask[u] {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(b.strength.iter().any(|v| *v > 0.5));
    }

    #[test]
    fn radius_too_large_rejected() {
        let (img, lm) = step_image(8, 8);
        let params = CueParams { scales: vec![5.0], ..CueParams::default() };
        assert!(matches!(local_cues(&img, &lm, &params), Err(Error::Param(_))));
    }

    #[test]
    fn squash_endpoints() {
        let p = CueParams::default();
        assert_eq!(p.squash(0.0), 0.0);
        assert!((p.squash(1.0) - 1.0).abs() < 1e-15);
        assert!(p.squash(0.3) > p.squash(0.2));
    }

    #[test]
    fn half_discs_are_mirror_images() {
        for t in orientation_angles(8) {
            let hd = half_discs(4.0, t);
            assert_eq!(hd.left.len(), hd.right.len());
            for &(dy, dx) in &hd.left {
                assert!(hd.right.contains(&(-dy, -dx)));
            }
        }
    }

    #[test]
    fn texture_channel_runs() {
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, _| ((y / 2 + x / 2) % 2) as f64);
        let lm = LabelMap::from_fn(16, 16, |_, x| u32::from(x >= 8));
        let params = CueParams { use_texture: true, scales: vec![2.0], ..CueParams::default() };
        let b = local_cues(&img, &lm, &params).unwrap();
        assert!(b.strength.iter().all(|v| v.is_finite()));
    }
}

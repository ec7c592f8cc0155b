//! Fully connected CRF over the encoder's soft segmentation.
//!
//! Pairwise potentials use a Potts compatibility and two Gaussian kernels:
//!
//! ```text
//! k(u, v) = w_app    * exp(-|x_u - x_v|^2 / 2 theta_alpha^2 - |I_u - I_v|^2 / 2 theta_beta^2)
//!         + w_smooth * exp(-|x_u - x_v|^2 / 2 theta_gamma^2)
//! ```
//!
//! with `x` the pixel position and `I` the color on the 0–255 scale.
//! Inference is exact mean field: every pixel pair exchanges a message on
//! every iteration, so cost is quadratic in the pixel count.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::ncut::SoftSegmentation;
use crate::tensor::{ImageTensor, LabelMap};

/// Probabilities are clamped to this before taking logs.
pub const UNARY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    pub iterations: usize,
    pub w_app: f64,
    pub w_smooth: f64,
    /// Appearance kernel, spatial bandwidth in pixels.
    pub theta_alpha: f64,
    /// Appearance kernel, color bandwidth on the 0–255 scale.
    pub theta_beta: f64,
    /// Smoothness kernel, spatial bandwidth in pixels.
    pub theta_gamma: f64,
    /// Largest pixel count accepted by exact inference.
    pub max_pixels: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 10,
            w_app: 5.0,
            w_smooth: 3.0,
            theta_alpha: 20.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
            max_pixels: 128 * 128,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Param("CRF iterations must be positive".into()));
        }
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("w_app", self.w_app), ("w_smooth", self.w_smooth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn has_pairwise(&self) -> bool {
        self.w_app != 0.0 || self.w_smooth != 0.0
    }
}

/// Precomputed pairwise kernel pieces for one image.
struct Kernel {
    width: usize,
    channels: usize,
    /// Pixel colors on the 0–255 scale, pixel-major.
    color: Vec<f64>,
    inv_beta: f64,
    /// `w_app * exp(-d^2 / 2 theta_alpha^2)` indexed by `|dy| * width + |dx|`.
    app_spatial: Vec<f64>,
    /// `w_smooth * exp(-d^2 / 2 theta_gamma^2)`, same indexing.
    smooth_spatial: Vec<f64>,
}

impl Kernel {
    fn new(img: &ImageTensor, params: &CrfParams) -> Self {
        let (h, w) = (img.height(), img.width());
        let mut app_spatial = vec![0.0; h * w];
        let mut smooth_spatial = vec![0.0; h * w];
        let a2 = 2.0 * params.theta_alpha * params.theta_alpha;
        let g2 = 2.0 * params.theta_gamma * params.theta_gamma;
        for dy in 0..h {
            for dx in 0..w {
                let d2 = (dy * dy + dx * dx) as f64;
                app_spatial[dy * w + dx] = params.w_app * (-d2 / a2).exp();
                smooth_spatial[dy * w + dx] = params.w_smooth * (-d2 / g2).exp();
            }
        }
        Self {
            width: w,
            channels: img.channels(),
            color: img.data().iter().map(|v| v * 255.0).collect(),
            inv_beta: 1.0 / (2.0 * params.theta_beta * params.theta_beta),
            app_spatial,
            smooth_spatial,
        }
    }

    #[inline]
    fn eval(&self, u: usize, v: usize) -> f64 {
        let (uy, ux) = (u / self.width, u % self.width);
        let (vy, vx) = (v / self.width, v % self.width);
        let at = uy.abs_diff(vy) * self.width + ux.abs_diff(vx);
        let c = self.channels;
        let mut dc = 0.0;
        for (a, b) in self.color[u * c..(u + 1) * c]
            .iter()
            .zip(&self.color[v * c..(v + 1) * c])
        {
            dc += (a - b) * (a - b);
        }
        self.app_spatial[at] * (-dc * self.inv_beta).exp() + self.smooth_spatial[at]
    }
}

fn check_shapes(img: &ImageTensor, p: &SoftSegmentation) -> Result<()> {
    if img.height() != p.height() || img.width() != p.width() {
        return Err(Error::Shape(format!(
            "image is {}x{} but the segmentation is {}x{}",
            img.height(),
            img.width(),
            p.height(),
            p.width()
        )));
    }
    Ok(())
}

/// `E = sum_u -log p(u, l_u) + sum_{u<v} [l_u != l_v] k(u, v)`.
///
/// Returns `f64::INFINITY` when some pixel's assigned label has probability 0.
pub fn crf_energy(
    labels: &LabelMap,
    img: &ImageTensor,
    p: &SoftSegmentation,
    params: &CrfParams,
) -> Result<f64> {
    params.validate()?;
    check_shapes(img, p)?;
    if labels.height() != p.height() || labels.width() != p.width() {
        return Err(Error::Shape("label map and segmentation differ in size".into()));
    }
    let k = p.k();
    let mut unary = 0.0;
    for (u, &l) in labels.labels().iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::Domain(format!("label {l} not below K = {k}")));
        }
        let pu = p.pixel(u)[l];
        if pu <= 0.0 {
            return Ok(f64::INFINITY);
        }
        unary -= pu.ln();
    }
    if !params.has_pairwise() {
        return Ok(unary);
    }
    let kernel = Kernel::new(img, params);
    let ls = labels.labels();
    let mut pairwise = 0.0;
    for u in 0..ls.len() {
        for v in u + 1..ls.len() {
            if ls[u] != ls[v] {
                pairwise += kernel.eval(u, v);
            }
        }
    }
    Ok(unary + pairwise)
}

/// Mean-field inference starting from `Q = p`.
pub fn mean_field(
    p: &SoftSegmentation,
    img: &ImageTensor,
    params: &CrfParams,
) -> Result<SoftSegmentation> {
    mean_field_observed(p, img, params, |_, _| {})
}

/// [`mean_field`] calling `observe(iteration, q)` after every update.
pub fn mean_field_observed(
    p: &SoftSegmentation,
    img: &ImageTensor,
    params: &CrfParams,
    mut observe: impl FnMut(usize, &SoftSegmentation),
) -> Result<SoftSegmentation> {
    params.validate()?;
    check_shapes(img, p)?;
    let n = p.pixel_count();
    if n > params.max_pixels {
        return Err(Error::TooLarge {
            pixels: n,
            ceiling: params.max_pixels,
        });
    }
    if !params.has_pairwise() {
        // No messages: every update reproduces the unary distribution.
        for it in 0..params.iterations {
            observe(it, p);
        }
        return Ok(p.clone());
    }
    let k = p.k();
    let log_unary: Vec<f64> = p.probs().iter().map(|v| v.max(UNARY_FLOOR).ln()).collect();
    let kernel = Kernel::new(img, params);
    let mut q = p.clone();
    let mut messages = vec![0.0; n * k];
    for it in 0..params.iterations {
        messages.fill(0.0);
        let qp = q.probs();
        for u in 0..n {
            for v in u + 1..n {
                let kv = kernel.eval(u, v);
                for l in 0..k {
                    messages[u * k + l] += kv * qp[v * k + l];
                    messages[v * k + l] += kv * qp[u * k + l];
                }
            }
        }
        // Potts: the penalty for l is sum_v k(u, v) (1 - Q_v(l)); the
        // constant part cancels in the normalization.
        let out = q.probs_mut();
        for u in 0..n {
            let logits: Vec<f64> = (0..k)
                .map(|l| log_unary[u * k + l] + messages[u * k + l])
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[u * k..(u + 1) * k];
            let mut sum = 0.0;
            for (r, z) in row.iter_mut().zip(&logits) {
                *r = (z - m).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        observe(it, &q);
    }
    Ok(q)
}

/// Per-pixel argmax, ties to the lowest class.
pub fn crf_argmax(q: &SoftSegmentation) -> LabelMap {
    q.argmax()
}

pub const Q_DUMP_MAGIC: &[u8; 8] = b"WNETQMAP";

/// Writes `q` as: magic `WNETQMAP`, u32 height, u32 width, u32 K, then
/// `height * width * K` little-endian f64 values, pixel-major.
pub fn write_q_dump(q: &SoftSegmentation, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(Q_DUMP_MAGIC)?;
    for v in [q.height(), q.width(), q.k()] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for p in q.probs() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_q_dump(mut input: impl Read) -> Result<SoftSegmentation> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format(0, e.to_string()))?;
    if bytes.len() < 20 || &bytes[..8] != Q_DUMP_MAGIC {
        return Err(Error::format(0, "not a Q dump"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (h, w, k) = (dim(0) as usize, dim(1) as usize, dim(2) as usize);
    let body = &bytes[20..];
    if body.len() != h * w * k * 8 {
        return Err(Error::format(20, format!("expected {} payload bytes", h * w * k * 8)));
    }
    let probs = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SoftSegmentation::from_raw(h, w, k, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_field(h: usize, w: usize, k: usize, rng: &mut Rng) -> SoftSegmentation {
        let mut probs = Vec::with_capacity(h * w * k);
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        SoftSegmentation::from_raw(h, w, k, probs).unwrap()
    }

    fn gauss(d2: f64, theta: f64) -> f64 {
        (-d2 / (2.0 * theta * theta)).exp()
    }

    #[test]
    fn zero_pairwise_energy_is_unary() {
        let mut rng = Rng::new(3);
        let img = ImageTensor::from_fn(4, 5, 3, |_, _, _| rng.uniform());
        let p = random_field(4, 5, 3, &mut rng);
        let labels = LabelMap::from_fn(4, 5, |y, x| ((y + x) % 3) as u32);
        let params = CrfParams {
            w_app: 0.0,
            w_smooth: 0.0,
            ..CrfParams::default()
        };
        let e = crf_energy(&labels, &img, &p, &params).unwrap();
        let want: f64 = labels
            .labels()
            .iter()
            .enumerate()
            .map(|(u, &l)| -p.pixel(u)[l as usize].ln())
            .sum();
        assert_eq!(e, want);
        let uni = SoftSegmentation::uniform(4, 5, 3);
        let e = crf_energy(&labels, &img, &uni, &params).unwrap();
        assert!((e - 20.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn energy_matches_pair_enumeration() {
        let mut rng = Rng::new(9);
        let img = ImageTensor::from_fn(3, 3, 3, |_, _, _| rng.uniform());
        let p = random_field(3, 3, 2, &mut rng);
        let labels = LabelMap::from_fn(3, 3, |y, x| u32::from(y * 3 + x >= 4));
        let params = CrfParams::default();
        let mut want = 0.0;
        let mut pairs = 0;
        for u in 0..9 {
            want -= p.pixel(u)[labels.labels()[u] as usize].ln();
            for v in u + 1..9 {
                pairs += 1;
                if labels.labels()[u] == labels.labels()[v] {
                    continue;
                }
                let d2 = ((u / 3) as f64 - (v / 3) as f64).powi(2)
                    + ((u % 3) as f64 - (v % 3) as f64).powi(2);
                let c2: f64 = (0..3)
                    .map(|c| (255.0 * (img.pixel(u)[c] - img.pixel(v)[c])).powi(2))
                    .sum();
                want += 5.0 * gauss(d2, 20.0) * gauss(c2, 13.0) + 3.0 * gauss(d2, 3.0);
            }
        }
        assert_eq!(pairs, 36);
        let e = crf_energy(&labels, &img, &p, &params).unwrap();
        assert!((e - want).abs() < 1e-10, "{e} vs {want}");
    }

    #[test]
    fn zero_probability_is_infinite_energy() {
        let img = ImageTensor::zeros(1, 2, 1);
        let p = SoftSegmentation::new(1, 2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let labels = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let e = crf_energy(&labels, &img, &p, &CrfParams::default()).unwrap();
        assert_eq!(e, f64::INFINITY);
    }

    #[test]
    fn zero_pairwise_mean_field_is_identity() {
        let mut rng = Rng::new(5);
        let img = ImageTensor::from_fn(6, 6, 3, |_, _, _| rng.uniform());
        let p = random_field(6, 6, 4, &mut rng);
        let params = CrfParams {
            w_app: 0.0,
            w_smooth: 0.0,
            iterations: 7,
            ..CrfParams::default()
        };
        assert_eq!(mean_field(&p, &img, &params).unwrap(), p);
    }

    #[test]
    fn uniform_on_constant_image_is_fixed_point() {
        let img = ImageTensor::from_fn(5, 5, 3, |_, _, _| 0.4);
        let p = SoftSegmentation::uniform(5, 5, 3);
        let q = mean_field(&p, &img, &CrfParams::default()).unwrap();
        for v in q.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q_stays_on_simplex() {
        let mut rng = Rng::new(8);
        let img = ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.uniform());
        let p = random_field(8, 8, 3, &mut rng);
        let mut seen = 0;
        mean_field_observed(&p, &img, &CrfParams::default(), |_, q| {
            seen += 1;
            for row in q.probs().chunks_exact(3) {
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn smoothing_flips_an_isolated_pixel() {
        let img = ImageTensor::from_fn(7, 7, 1, |_, _, _| 0.5);
        let mut probs = Vec::new();
        for u in 0..49 {
            if u == 24 {
                probs.extend([0.4, 0.6]);
            } else {
                probs.extend([0.7, 0.3]);
            }
        }
        let p = SoftSegmentation::new(7, 7, 2, probs).unwrap();
        let q = mean_field(&p, &img, &CrfParams::default()).unwrap();
        assert_eq!(crf_argmax(&p).distinct_count(), 2);
        assert_eq!(crf_argmax(&q).distinct_count(), 1);
    }

    #[test]
    fn ceiling_enforced() {
        let img = ImageTensor::zeros(4, 4, 1);
        let p = SoftSegmentation::uniform(4, 4, 2);
        let params = CrfParams {
            max_pixels: 15,
            ..CrfParams::default()
        };
        assert!(matches!(
            mean_field(&p, &img, &params),
            Err(Error::TooLarge { pixels: 16, ceiling: 15 })
        ));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let q = SoftSegmentation::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(crf_argmax(&q).labels(), &[0]);
        let mut rng = Rng::new(1);
        let q = random_field(4, 4, 3, &mut rng);
        let a = crf_argmax(&q);
        let again = crf_argmax(&SoftSegmentation::one_hot(&a, 3, 0.0).unwrap());
        assert_eq!(a, again);
    }

    #[test]
    fn q_dump_round_trip() {
        let mut rng = Rng::new(2);
        let q = random_field(3, 4, 2, &mut rng);
        let mut buf = Vec::new();
        write_q_dump(&q, &mut buf).unwrap();
        assert_eq!(read_q_dump(&buf[..]).unwrap(), q);
        assert!(read_q_dump(&buf[..buf.len() - 1]).is_err());
    }
}

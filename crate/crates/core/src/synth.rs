//! Synthetic images with exactly known region structure.
//!
//! Layouts are axis-aligned: two regions split by one line, three regions
//! split by a line and a perpendicular half-line, four regions split by a
//! cross. Each region gets a distinct palette color; an optional linear
//! gradient and Gaussian noise are added before 8-bit quantization.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{save_label_map, save_pnm};
use crate::tensor::{ImageTensor, LabelMap, Rng};

/// Well-separated RGB colors.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.35, 0.85],
    [0.95, 0.85, 0.2],
    [0.1, 0.6, 0.2],
    [0.05, 0.05, 0.1],
    [0.92, 0.92, 0.92],
    [0.6, 0.2, 0.7],
    [0.3, 0.85, 0.85],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Gaussian noise standard deviation on the `[0, 1]` scale.
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of a linear brightness ramp.
    pub gradient: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            min_regions: 2,
            max_regions: 4,
            noise_sigma: 0.02,
            gradient: 0.1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Param("synthetic images need at least 8 pixels a side".into()));
        }
        if !(2..=4).contains(&self.min_regions)
            || !(self.min_regions..=4).contains(&self.max_regions)
        {
            return Err(Error::Param("region counts must satisfy 2 <= min <= max <= 4".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.gradient >= 0.0) {
            return Err(Error::Param("noise and gradient must be non-negative".into()));
        }
        Ok(())
    }
}

/// Region layout; split positions are the first row/column of the second
/// side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Vertical { col: usize },
    Horizontal { row: usize },
    /// Vertical split, right side split again horizontally.
    Tee { col: usize, row: usize },
    Cross { col: usize, row: usize },
}

impl Layout {
    pub fn regions(&self) -> usize {
        match self {
            Layout::Vertical { .. } | Layout::Horizontal { .. } => 2,
            Layout::Tee { .. } => 3,
            Layout::Cross { .. } => 4,
        }
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        match *self {
            Layout::Vertical { col } => u32::from(x >= col),
            Layout::Horizontal { row } => u32::from(y >= row),
            Layout::Tee { col, row } => match (x >= col, y >= row) {
                (false, _) => 0,
                (true, false) => 1,
                (true, true) => 2,
            },
            Layout::Cross { col, row } => u32::from(x >= col) + 2 * u32::from(y >= row),
        }
    }

    fn describe(&self, out: &mut String) {
        match *self {
            Layout::Vertical { col } => {
                writeln!(out, "layout=vertical\nsplit_col={col}").unwrap();
            }
            Layout::Horizontal { row } => {
                writeln!(out, "layout=horizontal\nsplit_row={row}").unwrap();
            }
            Layout::Tee { col, row } => {
                writeln!(out, "layout=tee\nsplit_col={col}\nsplit_row={row}").unwrap();
            }
            Layout::Cross { col, row } => {
                writeln!(out, "layout=cross\nsplit_col={col}\nsplit_row={row}").unwrap();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub layout: Layout,
    pub colors: Vec<[f64; 3]>,
}

impl SynthImage {
    /// `key=value` lines recording the construction.
    pub fn sidecar(&self, params: &SynthParams) -> String {
        let mut s = format!("id={}\nsize={}\nregions={}\n", self.id, params.size, self.layout.regions());
        self.layout.describe(&mut s);
        for (i, c) in self.colors.iter().enumerate() {
            writeln!(s, "color{i}={:.4},{:.4},{:.4}", c[0], c[1], c[2]).unwrap();
        }
        writeln!(s, "noise_sigma={}\ngradient={}", params.noise_sigma, params.gradient).unwrap();
        s
    }
}

/// Renders `layout` with the given colors, ramp and noise, quantized to
/// 8 bits.
pub fn render(
    size: usize,
    layout: Layout,
    colors: &[[f64; 3]],
    gradient: f64,
    ramp_angle: f64,
    noise_sigma: f64,
    rng: &mut Rng,
) -> (ImageTensor, LabelMap) {
    let labels = LabelMap::from_fn(size, size, |y, x| layout.label(y, x));
    let (c, s) = (ramp_angle.cos(), ramp_angle.sin());
    let half = (size as f64 - 1.0) / 2.0;
    let reach = half * (c.abs() + s.abs());
    let mut img = ImageTensor::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let t = if reach > 0.0 {
                ((x as f64 - half) * c + (y as f64 - half) * s) / reach
            } else {
                0.0
            };
            let base = colors[labels.get(y, x) as usize];
            for ch in 0..3 {
                let mut v = base[ch] + 0.5 * gradient * t;
                if noise_sigma > 0.0 {
                    v += noise_sigma * rng.normal();
                }
                img.set(y, x, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    (img.quantized(), labels)
}

fn pick_colors(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    let mut idx: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..n {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| PALETTE[i]).collect()
}

/// One image drawn from `rng`.
pub fn generate(id: impl Into<String>, params: &SynthParams, rng: &mut Rng) -> Result<SynthImage> {
    params.validate()?;
    let s = params.size;
    let regions = params.min_regions + rng.below(params.max_regions - params.min_regions + 1);
    let lo = s / 4;
    let span = s / 2 + 1;
    let mut pos = || lo + rng.below(span);
    let layout = match regions {
        2 => {
            let p = pos();
            if rng.below(2) == 0 {
                Layout::Vertical { col: p }
            } else {
                Layout::Horizontal { row: p }
            }
        }
        3 => {
            let col = pos();
            let row = pos();
            Layout::Tee { col, row }
        }
        _ => {
            let col = pos();
            let row = pos();
            Layout::Cross { col, row }
        }
    };
    let colors = pick_colors(regions, rng);
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (image, labels) = render(s, layout, &colors, params.gradient, angle, params.noise_sigma, rng);
    Ok(SynthImage {
        id: id.into(),
        image,
        labels,
        layout,
        colors,
    })
}

/// `count` images with ids `synth000, synth001, ...`; image `i` draws from
/// its own stream of `seed`.
pub fn generate_corpus(count: usize, params: &SynthParams, seed: u64) -> Result<Vec<SynthImage>> {
    (0..count)
        .map(|i| generate(format!("synth{i:03}"), params, &mut Rng::stream(seed, i as u64)))
        .collect()
}

/// Writes `<id>.ppm`, `<id>.gt.pgm` (16-bit labels) and `<id>.txt`.
pub fn write_corpus(images: &[SynthImage], params: &SynthParams, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in images {
        save_pnm(&s.image, dir.join(format!("{}.ppm", s.id)))?;
        save_label_map(&s.labels, dir.join(format!("{}.gt.pgm", s.id)))?;
        let side = dir.join(format!("{}.txt", s.id));
        std::fs::write(&side, s.sidecar(params)).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::segmentation_covering;

    #[test]
    fn noiseless_two_region_is_exact() {
        let params = SynthParams {
            min_regions: 2,
            max_regions: 2,
            noise_sigma: 0.0,
            gradient: 0.0,
            ..SynthParams::default()
        };
        let s = generate("a", &params, &mut Rng::new(1)).unwrap();
        assert_eq!(s.labels.distinct_count(), 2);
        assert_eq!(segmentation_covering(&s.labels, std::slice::from_ref(&s.labels)).unwrap(), 1.0);
        // every pixel carries exactly its region color
        for y in 0..64 {
            for x in 0..64 {
                let c = s.colors[s.labels.get(y, x) as usize];
                for ch in 0..3 {
                    assert_eq!(s.image.get(y, x, ch), (c[ch] * 255.0).round() / 255.0);
                }
            }
        }
    }

    #[test]
    fn corpus_is_reproducible() {
        let p = SynthParams::default();
        let a = generate_corpus(5, &p, 42).unwrap();
        let b = generate_corpus(5, &p, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(5, &p, 43).unwrap();
        assert_ne!(a, c);
        for s in &a {
            assert_eq!(s.labels.distinct_count(), s.layout.regions());
        }
    }

    #[test]
    fn sidecar_records_split() {
        let p = SynthParams {
            min_regions: 4,
            max_regions: 4,
            ..SynthParams::default()
        };
        let s = generate("x", &p, &mut Rng::new(3)).unwrap();
        let side = s.sidecar(&p);
        let Layout::Cross { col, row } = s.layout else { panic!("cross expected") };
        assert!(side.contains(&format!("split_col={col}\n")));
        assert!(side.contains(&format!("split_row={row}\n")));
        assert!(side.contains("layout=cross"));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SynthParams { min_regions: 1, ..SynthParams::default() };
        assert!(generate("x", &p, &mut Rng::new(0)).is_err());
    }
}

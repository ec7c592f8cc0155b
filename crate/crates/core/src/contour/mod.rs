//! Boundary strengths on the CRF partition and the hierarchy built from
//! them.

pub mod cues;
pub mod regions;
pub mod spectral;
pub mod ucm;

pub use cues::{local_cues, CueParams};
pub use regions::{boundary_mask, connected_components, initial_regions, DEFAULT_MIN_AREA};
pub use spectral::{spectral_cue, SpectralParams};
pub use ucm::{build_ucm, threshold_ucm, Merge, UcmHierarchy};

use crate::error::Result;
use crate::tensor::{ImageTensor, LabelMap};

/// Per-pixel boundary strength in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap {
    pub height: usize,
    pub width: usize,
    pub strength: Vec<f64>,
}

impl BoundaryMap {
    pub fn new(height: usize, width: usize, strength: Vec<f64>) -> Self {
        assert_eq!(strength.len(), height * width, "boundary map size");
        Self {
            height,
            width,
            strength,
        }
    }
}

/// Local cues on the borders of `regions`, plus `gamma` times the spectral
/// term when enabled, clamped to `[0, 1]`.
pub fn boundary_strengths(
    img: &ImageTensor,
    regions: &LabelMap,
    params: &CueParams,
    spectral: &SpectralParams,
) -> Result<BoundaryMap> {
    let mut mpb = local_cues(img, regions, params)?;
    if params.use_spb {
        let spb = spectral_cue(&mpb, params.orientations, spectral)?;
        let mask = boundary_mask(regions);
        for ((m, s), on) in mpb.strength.iter_mut().zip(&spb.strength).zip(mask) {
            if on {
                *m = (*m + params.gamma * s).min(1.0);
            }
        }
    }
    Ok(mpb)
}

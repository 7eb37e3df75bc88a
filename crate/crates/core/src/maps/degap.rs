use super::{check_shape, IterationMap, MapLinearization};
use crate::cube::VideoCube;
use crate::denoise::{Denoiser, DenoiserLinearization};
use crate::error::Result;
use crate::sensing::{self, Measurement, SensingMask};

/// `f(x) = D(x + Phi^T (Phi Phi^T)^{-1} (y - Phi x))`.
#[derive(Debug, Clone, Copy)]
pub struct DeGapMap<'a> {
    pub denoiser: &'a Denoiser,
    pub mask: &'a SensingMask,
    pub y: &'a Measurement,
}

impl<'a> DeGapMap<'a> {
    pub fn new(denoiser: &'a Denoiser, mask: &'a SensingMask, y: &'a Measurement) -> Result<Self> {
        denoiser.validate()?;
        mask.check_measurement(y)?;
        Ok(Self { denoiser, mask, y })
    }
}

pub fn de_gap_apply(m: &DeGapMap<'_>, x: &VideoCube) -> Result<VideoCube> {
    m.denoiser.denoise(&sensing::gap_project(m.mask, m.y, x)?)
}

struct DeGapLinearization<'a> {
    mask: &'a SensingMask,
    out: VideoCube,
    denoiser: DenoiserLinearization<'a>,
}

impl IterationMap for DeGapMap<'_> {
    fn shape(&self) -> [usize; 3] {
        [self.mask.num_frames(), self.mask.height(), self.mask.width()]
    }

    fn apply(&self, x: &VideoCube) -> Result<VideoCube> {
        de_gap_apply(self, x)
    }

    fn linearize(&self, x: &VideoCube) -> Result<Box<dyn MapLinearization + '_>> {
        check_shape(self.shape(), x)?;
        let projected = sensing::gap_project(self.mask, self.y, x)?;
        let (out, denoiser) = self.denoiser.linearize(&projected)?;
        Ok(Box::new(DeGapLinearization {
            mask: self.mask,
            out,
            denoiser,
        }))
    }
}

impl MapLinearization for DeGapLinearization<'_> {
    fn output(&self) -> &VideoCube {
        &self.out
    }

    // The projection's Jacobian is the symmetric null-space projector.
    fn vjp_input(&self, v: &VideoCube) -> Result<VideoCube> {
        sensing::null_project(self.mask, &self.denoiser.vjp_input(v)?)
    }

    fn vjp_params(&self, v: &VideoCube) -> Result<Vec<f64>> {
        self.denoiser.grad_params(v)
    }
}

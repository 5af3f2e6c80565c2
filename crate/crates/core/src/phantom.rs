//! Synthetic sequences of moving Gaussian blobs with analytic motion.
//!
//! Blob centres and widths live in voxel coordinates of the phantom's canonical
//! grid (`dims`); rendering at other resolutions maps output voxels onto that
//! grid, so a coarser render coincides with subsampling a finer one.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Blob parameters in canonical voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// `c(t) = c + s(t) d`.
    Translate { d: [f64; 3] },
    /// Translation that always follows the sinusoidal profile.
    SinTranslate { d: [f64; 3] },
    /// `c_i(t) = c + (1 + a s(t)) (c_i - c)`.
    RadialScale { center: [f64; 3], a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeProfile {
    /// `s(t) = t`.
    #[default]
    Linear,
    /// `s(t) = sin(pi t / 2)`.
    Sinusoidal,
}

impl TimeProfile {
    pub fn s(self, t: f64) -> f64 {
        match self {
            TimeProfile::Linear => t,
            TimeProfile::Sinusoidal => (FRAC_PI_2 * t).sin(),
        }
    }
}

/// Static intensity `offset + gradient . x`, `x` in canonical voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Background {
    pub offset: f64,
    pub gradient: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub blobs: Vec<Blob>,
    pub motion: Motion,
    pub profile: TimeProfile,
    pub background: Background,
    pub seed: u64,
}

/// Inputs for [`PhantomSpec::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub motion: Motion,
    pub profile: TimeProfile,
    /// Blob widths drawn from this range, in voxels.
    pub sigma: [f64; 2],
    pub amplitude: [f64; 2],
    pub background: Background,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let m = 4.0 / 3f64.sqrt();
        PhantomParams {
            dims: [48, 48, 48],
            n_blobs: 4,
            motion: Motion::Translate { d: [m, m, m] },
            profile: TimeProfile::Sinusoidal,
            sigma: [3.0, 4.0],
            amplitude: [0.6, 1.0],
            background: Background::default(),
            seed: 0,
        }
    }
}

const MARGIN_SIGMAS: f64 = 3.0;
const PLACEMENT_TRIES: usize = 10_000;

impl PhantomSpec {
    /// Validates an explicit spec.
    pub fn new(
        dims: [usize; 3],
        blobs: Vec<Blob>,
        motion: Motion,
        profile: TimeProfile,
        background: Background,
        seed: u64,
    ) -> Result<PhantomSpec> {
        let spec = PhantomSpec {
            dims,
            blobs,
            motion,
            profile,
            background,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Random blobs placed so that every one keeps its margin for all `t`.
    pub fn generate(p: &PhantomParams) -> Result<PhantomSpec> {
        let mut spec = PhantomSpec {
            dims: p.dims,
            blobs: Vec::with_capacity(p.n_blobs),
            motion: p.motion,
            profile: p.profile,
            background: p.background,
            seed: p.seed,
        };
        spec.validate_frame()?;
        if !(p.sigma[0] > 0.0 && p.sigma[0] <= p.sigma[1]) {
            return Err(Error::Validation(format!("bad sigma range {:?}", p.sigma)));
        }
        if p.amplitude[0] > p.amplitude[1] {
            return Err(Error::Validation(format!("bad amplitude range {:?}", p.amplitude)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        for i in 0..p.n_blobs {
            let sigma = rng.gen_range(p.sigma[0]..=p.sigma[1]);
            let amplitude = rng.gen_range(p.amplitude[0]..=p.amplitude[1]);
            let placed = (0..PLACEMENT_TRIES).find_map(|_| {
                let center = [0, 1, 2].map(|a| rng.gen_range(0.0..=(p.dims[a] - 1) as f64));
                let blob = Blob { center, sigma, amplitude };
                spec.blob_fits(&blob).then_some(blob)
            });
            match placed {
                Some(b) => spec.blobs.push(b),
                None => {
                    return Err(Error::Validation(format!(
                        "cannot place blob {i} (sigma {sigma:.2}) with a {MARGIN_SIGMAS}-sigma margin in {:?}",
                        p.dims
                    )))
                }
            }
        }
        Ok(spec)
    }

    fn validate_frame(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 2) {
            return Err(Error::Validation(format!(
                "phantom dims must be >= 2, got {:?}",
                self.dims
            )));
        }
        if let Motion::RadialScale { a, .. } = self.motion {
            if a.is_nan() || a <= -1.0 {
                return Err(Error::Validation(format!(
                    "radial scale factor must exceed -1, got {a}"
                )));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.validate_frame()?;
        for (i, b) in self.blobs.iter().enumerate() {
            if b.sigma.is_nan() || b.sigma <= 0.0 {
                return Err(Error::Validation(format!("blob {i} has sigma {}", b.sigma)));
            }
            if !self.blob_fits(b) {
                return Err(Error::Validation(format!(
                    "blob {i} leaves the {MARGIN_SIGMAS}-sigma margin of {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Trajectories are segments between the `s = 0` and `s = 1` positions, so
    /// checking both ends covers every `t`.
    fn blob_fits(&self, b: &Blob) -> bool {
        let m = MARGIN_SIGMAS * b.sigma;
        [0.0, 1.0].iter().all(|&s| {
            let c = self.center_at_s(b.center, s);
            (0..3).all(|a| c[a] >= m && c[a] <= (self.dims[a] - 1) as f64 - m)
        })
    }

    fn center_at_s(&self, c: [f64; 3], s: f64) -> [f64; 3] {
        match self.motion {
            Motion::Translate { d } | Motion::SinTranslate { d } => [0, 1, 2].map(|a| c[a] + s * d[a]),
            Motion::RadialScale { center, a } => [0, 1, 2].map(|i| center[i] + (1.0 + a * s) * (c[i] - center[i])),
        }
    }

    /// Motion profile value at `t`.
    pub fn s(&self, t: f64) -> f64 {
        match self.motion {
            Motion::SinTranslate { .. } => TimeProfile::Sinusoidal.s(t),
            _ => self.profile.s(t),
        }
    }

    pub fn blob_centers(&self, t: f64) -> Vec<[f64; 3]> {
        let s = self.s(t);
        self.blobs.iter().map(|b| self.center_at_s(b.center, s)).collect()
    }

    fn intensity(&self, x: [f64; 3], centers: &[[f64; 3]]) -> f64 {
        let bg = self.background.offset
            + (0..3).map(|a| self.background.gradient[a] * x[a]).sum::<f64>();
        bg + self
            .blobs
            .iter()
            .zip(centers)
            .map(|(b, c)| {
                let r2: f64 = (0..3).map(|a| (x[a] - c[a]).powi(2)).sum();
                b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum::<f64>()
    }

    /// Canonical coordinates of voxel `v` of a `dims` render.
    fn canonical(&self, v: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (v[a] * (self.dims[a] - 1)) as f64 / (dims[a] - 1) as f64)
    }

    pub fn render_frame(&self, t: f64) -> Result<Volume> {
        self.render_frame_at(t, self.dims)
    }

    /// Renders the frame at `t` on a `dims` grid spanning the same extent.
    pub fn render_frame_at(&self, t: f64, dims: [usize; 3]) -> Result<Volume> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Validation(format!("phantom time {t} outside [0, 1]")));
        }
        let centers = self.blob_centers(t);
        Volume::from_fn(dims, |x, y, z| {
            self.intensity(self.canonical([x, y, z], dims), &centers) as f32
        })
    }

    /// Displacement in canonical voxels of the particle at `x` (time `t0`) by time `t1`.
    pub fn ground_truth_displacement(&self, x: [f64; 3], t0: f64, t1: f64) -> [f64; 3] {
        let (s0, s1) = (self.s(t0), self.s(t1));
        match self.motion {
            Motion::Translate { d } | Motion::SinTranslate { d } => d.map(|c| (s1 - s0) * c),
            Motion::RadialScale { center, a } => {
                let k = (1.0 + a * s1) / (1.0 + a * s0) - 1.0;
                [0, 1, 2].map(|i| k * (x[i] - center[i]))
            }
        }
    }

    /// Voxels of a `dims` render within two sigmas of a blob centre at `t`.
    pub fn foreground_mask(&self, t: f64, dims: [usize; 3]) -> Vec<bool> {
        let centers = self.blob_centers(t);
        let mut mask = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = self.canonical([x, y, z], dims);
                    mask.push(self.blobs.iter().zip(&centers).any(|(b, c)| {
                        (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= (2.0 * b.sigma).powi(2)
                    }));
                }
            }
        }
        mask
    }
}

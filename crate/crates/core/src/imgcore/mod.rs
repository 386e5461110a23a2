//! Raster containers, seeded randomness, RAW32/PGM files, resampling and
//! normalization shared by the rest of the crate.

mod io;
pub(crate) mod resample;
mod rng;

pub use io::{load_raster, raw32_paths, save_pgm, save_raster, Raw32Header, RAW32_MAGIC};
pub use resample::upsample_bilinear;
pub use rng::Seed;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling grid of a raster: pixel counts plus physical pixel pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub pitch_nm: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, pitch_nm: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(pitch_nm.is_finite() && pitch_nm > 0.0) {
            return Err(Error::invalid(format!("pitch_nm must be > 0, got {pitch_nm}")));
        }
        Ok(Self {
            width,
            height,
            pitch_nm,
        })
    }

    pub fn square(side: usize, pitch_nm: f64) -> Result<Self> {
        Self::new(side, side, pitch_nm)
    }

    /// Number of samples per frame.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nyquist frequency in cycles/nm.
    pub fn nyquist(&self) -> f64 {
        0.5 / self.pitch_nm
    }

    /// Same field of view sampled `factor` times coarser.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::invalid(format!(
                "{}x{} grid is not divisible by {factor}",
                self.width, self.height
            )));
        }
        Self::new(
            self.width / factor,
            self.height / factor,
            self.pitch_nm * factor as f64,
        )
    }

    /// Same field of view sampled `factor` times finer.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be >= 1"));
        }
        Self::new(
            self.width * factor,
            self.height * factor,
            self.pitch_nm / factor as f64,
        )
    }
}

/// A single 2-D float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::shape(format!(
                "raster data has {} samples, grid {}x{} needs {}",
                data.len(),
                grid.width,
                grid.height,
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn filled(grid: GridSpec, value: f32) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for y in 0..grid.height {
            for x in 0..grid.width {
                data.push(f(x, y));
            }
        }
        Self { grid, data }
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.grid.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        let w = self.grid.width;
        self.data[y * w + x] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, factor: f32) -> Raster {
        Raster {
            grid: self.grid,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn transposed(&self) -> Raster {
        let g = GridSpec {
            width: self.grid.height,
            height: self.grid.width,
            pitch_nm: self.grid.pitch_nm,
        };
        Raster::from_fn(g, |x, y| self.get(y, x))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Wraps the raster as a one-frame stack.
    pub fn into_stack(self) -> ImageStack {
        ImageStack {
            grid: self.grid,
            frames: vec![self.data],
            labels: Vec::new(),
        }
    }
}

/// One or more frames on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub grid: GridSpec,
    pub frames: Vec<Vec<f32>>,
    pub labels: Vec<String>,
}

impl ImageStack {
    pub fn new(grid: GridSpec, frames: Vec<Vec<f32>>) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            if f.len() != grid.len() {
                return Err(Error::shape(format!(
                    "frame {i} has {} samples, grid needs {}",
                    f.len(),
                    grid.len()
                )));
            }
        }
        Ok(Self {
            grid,
            frames,
            labels: Vec::new(),
        })
    }

    pub fn from_rasters(rasters: Vec<Raster>) -> Result<Self> {
        let grid = rasters
            .first()
            .map(|r| r.grid)
            .ok_or_else(|| Error::invalid("cannot build a stack from zero rasters"))?;
        if rasters.iter().any(|r| r.grid != grid) {
            return Err(Error::shape("rasters are on different grids"));
        }
        Self::new(grid, rasters.into_iter().map(|r| r.data).collect())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> Raster {
        Raster {
            grid: self.grid,
            data: self.frames[i].clone(),
        }
    }

    pub fn rasters(&self) -> impl Iterator<Item = Raster> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    pub fn max(&self) -> f32 {
        self.frames
            .iter()
            .flatten()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.frames
            .iter()
            .flatten()
            .copied()
            .fold(f32::INFINITY, f32::min)
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f32) -> ImageStack {
        ImageStack {
            grid: self.grid,
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|v| v * factor).collect())
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Looks up a `key=value` label.
    pub fn label_value(&self, key: &str) -> Option<&str> {
        self.labels.iter().find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
        })
    }
}

/// Divides every sample by the global maximum so the stack peaks at exactly 1.
pub fn normalize_unit(stack: &ImageStack) -> Result<ImageStack> {
    if !stack.is_finite() {
        return Err(Error::NonFinite("stack passed to normalize_unit".into()));
    }
    let max = stack.max();
    if !(max > 0.0) {
        return Err(Error::Degenerate(
            "cannot normalize a stack whose maximum is not positive".into(),
        ));
    }
    let mut out = stack.clone();
    for v in out.frames.iter_mut().flatten() {
        *v /= max;
    }
    Ok(out)
}

/// Single-raster convenience wrapper around [`normalize_unit`].
pub fn normalize_raster(raster: &Raster) -> Result<Raster> {
    let s = normalize_unit(&raster.clone().into_stack())?;
    Ok(s.frame(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h, 10.0).unwrap()
    }

    #[test]
    fn grid_rejects_bad_dims() {
        assert!(GridSpec::new(0, 4, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 0.0).is_err());
        assert!(GridSpec::new(4, 4, f64::NAN).is_err());
        let g = GridSpec::new(4, 4, 65.0).unwrap();
        assert!(g.nyquist().is_finite() && g.nyquist() > 0.0);
    }

    #[test]
    fn normalize_scales_to_unit_max() {
        let s = ImageStack::new(grid(2, 1), vec![vec![10.0, 5.0], vec![2.0, 0.0]]).unwrap();
        let n = normalize_unit(&s).unwrap();
        assert_eq!(n.frames[0], vec![1.0, 0.5]);
        assert_eq!(n.frames[1][0], 0.2);
        assert_eq!(n.max(), 1.0);
    }

    #[test]
    fn normalize_identity_on_unit_max() {
        let s = ImageStack::new(grid(3, 1), vec![vec![0.25, 1.0, 0.5]]).unwrap();
        assert_eq!(normalize_unit(&s).unwrap(), s);
    }

    #[test]
    fn normalize_rejects_zero_and_nan() {
        let z = ImageStack::new(grid(2, 2), vec![vec![0.0; 4]]).unwrap();
        assert!(matches!(normalize_unit(&z), Err(Error::Degenerate(_))));
        let n = ImageStack::new(grid(2, 1), vec![vec![f32::NAN, 1.0]]).unwrap();
        assert!(matches!(normalize_unit(&n), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_lookup() {
        let s = ImageStack::new(grid(1, 1), vec![vec![1.0]])
            .unwrap()
            .with_labels(vec!["modality=LinearSIM".into(), "junk".into()]);
        assert_eq!(s.label_value("modality"), Some("LinearSIM"));
        assert_eq!(s.label_value("f_ill_cyc_per_nm"), None);
    }

    #[test]
    fn stack_rejects_wrong_frame_size() {
        assert!(ImageStack::new(grid(2, 2), vec![vec![0.0; 3]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(vals in proptest::collection::vec(0.0f32..100.0, 16)) {
            proptest::prop_assume!(vals.iter().any(|&v| v > 0.0));
            let s = ImageStack::new(grid(4, 4), vec![vals]).unwrap();
            let once = normalize_unit(&s).unwrap();
            let twice = normalize_unit(&once).unwrap();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}

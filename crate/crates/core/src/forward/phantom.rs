//! Synthetic ground-truth objects.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{GridSpec, Raster, Seed};

/// A ground-truth fluorophore density with samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Raster,
    pub description: String,
    pub geometry: Option<TwoLineGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Lines run along y; their separation is measured along x.
    Vertical,
    Horizontal,
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vertical" | "v" => Ok(Self::Vertical),
            "horizontal" | "h" => Ok(Self::Horizontal),
            other => Err(Error::invalid(format!(
                "unknown orientation `{other}` (expected vertical or horizontal)"
            ))),
        }
    }
}

/// Where the two lines of a line-pair target sit, in nm from the field origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLineGeometry {
    pub orientation: Orientation,
    /// Centre of each line across its width.
    pub centers_nm: [f64; 2],
    /// Start and end of the lines along their length.
    pub extent_nm: [f64; 2],
    pub line_width_px: f64,
    pub pitch_nm: f64,
}

impl TwoLineGeometry {
    pub fn separation_nm(&self) -> f64 {
        self.centers_nm[1] - self.centers_nm[0]
    }
}

/// Fraction of the pixel interval `[lo, lo+1)` covered by `[a, b]`.
fn coverage(lo: f64, a: f64, b: f64) -> f64 {
    (b.min(lo + 1.0) - a.max(lo)).max(0.0)
}

/// Two parallel unit-intensity lines centred in the field, spanning its middle half.
pub fn gen_two_line_phantom(
    grid: GridSpec,
    separation_nm: f64,
    line_width_px: f64,
    orientation: Orientation,
) -> Result<Phantom> {
    if !(separation_nm >= grid.pitch_nm) {
        return Err(Error::invalid(format!(
            "separation {separation_nm} nm is below the grid pitch {} nm",
            grid.pitch_nm
        )));
    }
    if !(line_width_px > 0.0) {
        return Err(Error::invalid(format!(
            "line width must be positive, got {line_width_px} px"
        )));
    }
    // Build vertical lines on a grid whose x axis is the cross-line axis.
    let (across, along) = match orientation {
        Orientation::Vertical => (grid.width, grid.height),
        Orientation::Horizontal => (grid.height, grid.width),
    };
    let p = grid.pitch_nm;
    let mid = across as f64 * p / 2.0;
    let centers_nm = [mid - separation_nm / 2.0, mid + separation_nm / 2.0];
    if centers_nm[1] - centers_nm[0] + line_width_px * p > across as f64 * p / 2.0 {
        return Err(Error::invalid(format!(
            "line pair {separation_nm} nm apart does not fit in the central half of the field"
        )));
    }
    let extent_nm = [along as f64 * p * 0.25, along as f64 * p * 0.75];
    let cross: Vec<f64> = (0..across)
        .map(|x| {
            centers_nm
                .iter()
                .map(|&c| {
                    let c_px = c / p;
                    coverage(x as f64, c_px - line_width_px / 2.0, c_px + line_width_px / 2.0)
                })
                .sum::<f64>()
                .min(1.0)
        })
        .collect();
    let len: Vec<f64> = (0..along)
        .map(|y| coverage(y as f64, extent_nm[0] / p, extent_nm[1] / p))
        .collect();
    let vgrid = GridSpec::new(across, along, p)?;
    let mut image = Raster::from_fn(vgrid, |x, y| (cross[x] * len[y]) as f32);
    if orientation == Orientation::Horizontal {
        image = image.transposed();
    }
    Ok(Phantom {
        image,
        description: format!(
            "two_line(separation_nm={separation_nm}, line_width_px={line_width_px}, orientation={orientation:?})"
        ),
        geometry: Some(TwoLineGeometry {
            orientation,
            centers_nm,
            extent_nm,
            line_width_px,
            pitch_nm: p,
        }),
    })
}

fn check_count(count: usize, what: &str) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid(format!("{what} count must be at least 1")));
    }
    Ok(())
}

const FILAMENT_SIGMA_PX: f64 = 0.6;

/// Smooth random curves. `curvature` is the standard deviation of the heading
/// change (radians) per pixel of arc length.
pub fn gen_filament_phantom(
    grid: GridSpec,
    count: usize,
    curvature: f64,
    seed: Seed,
) -> Result<Phantom> {
    check_count(count, "filament")?;
    if !(curvature >= 0.0) || !curvature.is_finite() {
        return Err(Error::invalid(format!(
            "curvature must be finite and nonnegative, got {curvature}"
        )));
    }
    let (w, h) = (grid.width as f64, grid.height as f64);
    let (lo_x, hi_x, lo_y, hi_y) = (0.1 * w, 0.9 * w, 0.1 * h, 0.9 * h);
    let mut acc = vec![0.0f64; grid.len()];
    let step: f64 = 0.5;
    let reach = (4.0 * FILAMENT_SIGMA_PX).ceil() as isize;
    for i in 0..count {
        let mut rng = seed.rng("filament", i as u64);
        let mut x = rng.random_range(0.2 * w..0.8 * w);
        let mut y = rng.random_range(0.2 * h..0.8 * h);
        let mut theta = rng.random_range(0.0..2.0 * PI);
        let brightness = rng.random_range(0.6..1.0);
        let length = 0.7 * w.min(h);
        let normal = rand_distr::Normal::new(0.0, curvature * step.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let mut walked = 0.0;
        while walked < length {
            let (cx, cy) = (x.floor() as isize, y.floor() as isize);
            for py in cy - reach..=cy + reach {
                for px in cx - reach..=cx + reach {
                    if px < 0 || py < 0 || px >= grid.width as isize || py >= grid.height as isize {
                        continue;
                    }
                    let dx = px as f64 + 0.5 - x;
                    let dy = py as f64 + 0.5 - y;
                    let v = brightness
                        * (-(dx * dx + dy * dy) / (2.0 * FILAMENT_SIGMA_PX * FILAMENT_SIGMA_PX)).exp();
                    let idx = py as usize * grid.width + px as usize;
                    acc[idx] = acc[idx].max(v);
                }
            }
            theta += rng.sample(normal);
            let (nx, ny) = (x + step * theta.cos(), y + step * theta.sin());
            if nx < lo_x || nx > hi_x || ny < lo_y || ny > hi_y {
                // turn back into the field instead of leaving it
                theta += PI / 2.0;
                continue;
            }
            x = nx;
            y = ny;
            walked += step;
        }
    }
    Ok(Phantom {
        image: Raster::new(grid, acc.into_iter().map(|v| v as f32).collect())?,
        description: format!(
            "filaments(count={count}, curvature={curvature}, seed={})",
            seed.0
        ),
        geometry: None,
    })
}

const SUPERSAMPLE: usize = 4;

/// Area fraction of pixel (x, y) inside `inside`, estimated on a 4×4 subgrid.
fn supersampled(x: usize, y: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if inside(px, py) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Randomly placed unit-intensity disks.
pub fn gen_dot_phantom(grid: GridSpec, count: usize, radius_px: f64, seed: Seed) -> Result<Phantom> {
    check_count(count, "dot")?;
    if !(radius_px > 0.0) {
        return Err(Error::invalid(format!("dot radius must be positive, got {radius_px}")));
    }
    let (w, h) = (grid.width as f64, grid.height as f64);
    let mut rng = seed.rng("dots", 0);
    let centers: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.25 * w..0.75 * w),
                rng.random_range(0.25 * h..0.75 * h),
            )
        })
        .collect();
    let r2 = radius_px * radius_px;
    let mut image = Raster::zeros(grid);
    for &(cx, cy) in &centers {
        let x0 = (cx - radius_px - 1.0).max(0.0) as usize;
        let x1 = ((cx + radius_px + 1.0) as usize).min(grid.width - 1);
        let y0 = (cy - radius_px - 1.0).max(0.0) as usize;
        let y1 = ((cy + radius_px + 1.0) as usize).min(grid.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = supersampled(x, y, |px, py| (px - cx).powi(2) + (py - cy).powi(2) <= r2);
                let v = image.get(x, y).max(c as f32);
                image.set(x, y, v);
            }
        }
    }
    Ok(Phantom {
        image,
        description: format!("dots(count={count}, radius_px={radius_px}, seed={})", seed.0),
        geometry: None,
    })
}

/// Binary radial spoke target of radius 0.4 × the smaller field side.
pub fn gen_siemens_star(grid: GridSpec, spokes: usize) -> Result<Phantom> {
    check_count(spokes, "spoke")?;
    let (cx, cy) = (grid.width as f64 / 2.0, grid.height as f64 / 2.0);
    let radius = 0.4 * grid.width.min(grid.height) as f64;
    let n = spokes as f64;
    let image = Raster::from_fn(grid, |x, y| {
        supersampled(x, y, |px, py| {
            let (dx, dy) = (px - cx, py - cy);
            dx * dx + dy * dy <= radius * radius && (n * dy.atan2(dx)).sin() >= 0.0
        }) as f32
    });
    Ok(Phantom {
        image,
        description: format!("siemens_star(spokes={spokes})"),
        geometry: None,
    })
}

/// Normalised 1-D Gaussian taps truncated at 4σ.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with zero padding.
pub(crate) fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    if sigma == 0.0 {
        return image.clone();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (image.width(), image.height());
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += t * src[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += t * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    Raster {
        grid: image.grid,
        data: out,
    }
}

/// Gaussian blur of `smooth_sigma_px` followed by rescaling so the maximum is 1.
pub fn prepare_ground_truth(image: &Raster, smooth_sigma_px: f64) -> Result<Phantom> {
    if !(smooth_sigma_px >= 0.0) || !smooth_sigma_px.is_finite() {
        return Err(Error::invalid(format!(
            "smoothing sigma must be finite and nonnegative, got {smooth_sigma_px}"
        )));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("ground-truth image".into()));
    }
    if image.min() < 0.0 {
        return Err(Error::invalid("ground-truth image has negative samples"));
    }
    let blurred = gaussian_blur(image, smooth_sigma_px);
    let peak = blurred.max();
    if !(peak > 0.0) {
        return Err(Error::Degenerate("ground-truth image is all zero".into()));
    }
    let data = blurred.data.iter().map(|&v| (v / peak).clamp(0.0, 1.0)).collect();
    Ok(Phantom {
        image: Raster::new(image.grid, data)?,
        description: format!("prepared(smooth_sigma_px={smooth_sigma_px})"),
        geometry: None,
    })
}

impl Phantom {
    /// Applies [`prepare_ground_truth`] while keeping description and geometry.
    pub fn prepared(&self, smooth_sigma_px: f64) -> Result<Phantom> {
        let p = prepare_ground_truth(&self.image, smooth_sigma_px)?;
        Ok(Phantom {
            image: p.image,
            description: format!("{} + {}", self.description, p.description),
            geometry: self.geometry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(side: usize, pitch: f64) -> GridSpec {
        GridSpec::square(side, pitch).unwrap()
    }

    fn local_maxima(p: &[f32]) -> usize {
        // plateaus count once
        let mut n = 0;
        let mut i = 1;
        while i + 1 < p.len() {
            if p[i] > p[i - 1] {
                let mut j = i;
                while j + 1 < p.len() && p[j + 1] == p[i] {
                    j += 1;
                }
                if j + 1 < p.len() && p[j + 1] < p[i] {
                    n += 1;
                }
                i = j + 1;
            } else {
                i += 1;
            }
        }
        n
    }

    #[test]
    fn two_line_centres_from_config() {
        let g = grid(128, 15.0);
        let ph = gen_two_line_phantom(g, 187.5 / 2.0, 1.0, Orientation::Vertical).unwrap();
        let geo = ph.geometry.unwrap();
        assert!((geo.separation_nm() / 15.0 - 6.25).abs() < 1e-12);
        // measured centroid of each line along a row
        let row: Vec<f64> = (0..128).map(|x| ph.image.get(x, 64) as f64).collect();
        let centroid = |r: std::ops::Range<usize>| {
            let m: f64 = r.clone().map(|x| row[x]).sum();
            r.map(|x| row[x] * (x as f64 + 0.5)).sum::<f64>() / m
        };
        let measured = centroid(64..80) - centroid(48..64);
        assert!((measured - 6.25).abs() <= 0.5, "measured {measured}");
    }

    #[test]
    fn two_line_profile_and_padding() {
        let g = grid(128, 20.0);
        let ph = gen_two_line_phantom(g, 103.125, 2.0, Orientation::Vertical).unwrap();
        for y in [40, 64, 90] {
            let row: Vec<f32> = (0..128).map(|x| ph.image.get(x, y)).collect();
            assert_eq!(local_maxima(&row), 2);
        }
        let quarter = 32;
        for y in 0..128 {
            for x in 0..128 {
                if x < quarter || x >= 128 - quarter || y < quarter || y >= 128 - quarter {
                    assert_eq!(ph.image.get(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn two_line_rotation_is_transpose() {
        let g = GridSpec::new(96, 64, 20.0).unwrap();
        let v = gen_two_line_phantom(g, 120.0, 2.0, Orientation::Vertical).unwrap();
        let h = gen_two_line_phantom(GridSpec::new(64, 96, 20.0).unwrap(), 120.0, 2.0, Orientation::Horizontal)
            .unwrap();
        assert_eq!(v.image.transposed(), h.image);
    }

    #[test]
    fn two_line_rejects_small_separation() {
        assert!(gen_two_line_phantom(grid(64, 20.0), 10.0, 1.0, Orientation::Vertical).is_err());
    }

    #[test]
    fn generators_deterministic_and_bounded() {
        let g = grid(96, 20.0);
        let a = gen_filament_phantom(g, 6, 0.1, Seed(3)).unwrap();
        let b = gen_filament_phantom(g, 6, 0.1, Seed(3)).unwrap();
        let c = gen_filament_phantom(g, 6, 0.1, Seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
        let d1 = gen_dot_phantom(g, 10, 2.0, Seed(1)).unwrap();
        assert_eq!(d1, gen_dot_phantom(g, 10, 2.0, Seed(1)).unwrap());
        for ph in [a, d1, gen_siemens_star(g, 16).unwrap()] {
            assert!(ph.image.min() >= 0.0 && ph.image.max() <= 1.0);
            assert!(ph.image.max() > 0.5);
        }
        assert!(gen_dot_phantom(g, 0, 2.0, Seed(1)).is_err());
        assert!(gen_filament_phantom(g, 0, 0.1, Seed(1)).is_err());
    }

    fn components_above(r: &Raster, thr: f32) -> usize {
        let (w, h) = (r.width(), r.height());
        let mut seen = vec![false; w * h];
        let mut n = 0;
        for start in 0..w * h {
            if seen[start] || r.data[start] <= thr {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if !seen[j] && r.data[j] > thr {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 { push(i - 1); }
                if x + 1 < w { push(i + 1); }
                if y > 0 { push(i - w); }
                if y + 1 < h { push(i + w); }
            }
        }
        n
    }

    #[test]
    fn single_dot_single_component() {
        for s in 0..5 {
            let ph = gen_dot_phantom(grid(64, 20.0), 1, 2.5, Seed(s)).unwrap();
            assert_eq!(components_above(&ph.image, 0.5), 1);
        }
    }

    #[test]
    fn siemens_spacing_shrinks_toward_centre() {
        let g = grid(256, 10.0);
        let ph = gen_siemens_star(g, 12).unwrap();
        let spacing = |r: f64| {
            // arc length per on/off period measured by counting transitions on a circle
            let n = 2000;
            let mut transitions = 0;
            let sample = |k: usize| {
                let t = 2.0 * PI * k as f64 / n as f64;
                let x = (128.0 + r * t.cos()) as usize;
                let y = (128.0 + r * t.sin()) as usize;
                ph.image.get(x, y) > 0.5
            };
            for k in 0..n {
                if sample(k) != sample((k + 1) % n) {
                    transitions += 1;
                }
            }
            2.0 * PI * r / (transitions as f64 / 2.0)
        };
        let radii = [20.0, 40.0, 60.0, 90.0];
        let s: Vec<f64> = radii.iter().map(|&r| spacing(r)).collect();
        for w in s.windows(2) {
            assert!(w[0] < w[1], "{s:?}");
        }
    }

    #[test]
    fn prepare_zero_sigma_rescales() {
        let g = grid(16, 20.0);
        let img = Raster::from_fn(g, |x, y| (x + y) as f32);
        let p = prepare_ground_truth(&img, 0.0).unwrap();
        let m = img.max();
        for (a, b) in p.image.data.iter().zip(&img.data) {
            assert_eq!(*a, b / m);
        }
        assert!(prepare_ground_truth(&img, -1.0).is_err());
        assert!(prepare_ground_truth(&Raster::zeros(g), 1.0).is_err());
    }

    #[test]
    fn prepare_delta_gives_gaussian_width() {
        let g = grid(64, 20.0);
        let mut img = Raster::zeros(g);
        img.set(32, 32, 1.0);
        let p = prepare_ground_truth(&img, 2.0).unwrap();
        let (mut m, mut mx2) = (0.0, 0.0);
        for x in 0..64 {
            let v = p.image.get(x, 32) as f64;
            m += v;
            mx2 += v * (x as f64 - 32.0).powi(2);
        }
        let sigma = (mx2 / m).sqrt();
        assert!((sigma - 2.0).abs() < 0.1, "sigma {sigma}");
    }

    proptest! {
        #[test]
        fn prepare_max_is_one(vals in proptest::collection::vec(0.0f32..10.0, 64), sigma in 0.0f64..3.0) {
            prop_assume!(vals.iter().any(|&v| v > 1e-3));
            let img = Raster::new(grid(8, 20.0), vals).unwrap();
            let p = prepare_ground_truth(&img, sigma).unwrap();
            prop_assert_eq!(p.image.max(), 1.0);
            prop_assert!(p.image.min() >= 0.0);
        }
    }
}

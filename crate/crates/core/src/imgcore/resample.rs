use super::Raster;
use crate::error::{Error, Result};

/// Corner-aligned sample position of output index `i` in input coordinates.
#[inline]
pub(crate) fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear upsampling by an integer factor. The first and last output samples
/// coincide with the first and last input samples.
pub fn upsample_bilinear(image: &Raster, factor: usize) -> Result<Raster> {
    if factor < 1 {
        return Err(Error::invalid("upsampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (w, h) = (image.width(), image.height());
    let grid = image.grid.refined(factor)?;
    let (ow, oh) = (grid.width, grid.height);
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|i| lerp_taps(i, w, ow)).collect();
    let mut out = Raster::zeros(grid);
    for oy in 0..oh {
        let (y0, y1, fy) = lerp_taps(oy, h, oh);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = image.get(x0, y0) as f64 * (1.0 - fx) + image.get(x1, y0) as f64 * fx;
            let bot = image.get(x0, y1) as f64 * (1.0 - fx) + image.get(x1, y1) as f64 * fx;
            out.set(ox, oy, (top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn lerp_taps(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let pos = corner_aligned(i, n_in, n_out);
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::GridSpec;
    use proptest::prelude::*;

    #[test]
    fn factor_one_is_identity() {
        let g = GridSpec::new(3, 2, 10.0).unwrap();
        let r = Raster::new(g, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(upsample_bilinear(&r, 1).unwrap(), r);
        assert!(upsample_bilinear(&r, 0).is_err());
    }

    #[test]
    fn constant_stays_constant() {
        let g = GridSpec::new(5, 4, 40.0).unwrap();
        let r = Raster::filled(g, 0.7);
        let u = upsample_bilinear(&r, 4).unwrap();
        assert_eq!(u.width(), 20);
        assert_eq!(u.height(), 16);
        assert_eq!(u.grid.pitch_nm, 10.0);
        assert!(u.data.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn ramp_hand_evaluated() {
        // Output abscissae map to 0, 1/3, 2/3, 1 in input coordinates.
        let g = GridSpec::new(2, 2, 10.0).unwrap();
        let r = Raster::new(g, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = upsample_bilinear(&r, 2).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!((u.get(x, y) - expected[x]).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    proptest! {
        #[test]
        fn output_within_input_bounds(vals in proptest::collection::vec(-5.0f32..5.0, 12), f in 1usize..5) {
            let g = GridSpec::new(4, 3, 8.0).unwrap();
            let r = Raster::new(g, vals).unwrap();
            let u = upsample_bilinear(&r, f).unwrap();
            let (lo, hi) = (r.min(), r.max());
            for &v in &u.data {
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}

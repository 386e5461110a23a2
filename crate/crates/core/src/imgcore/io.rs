use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GridSpec, ImageStack, Raster};
use crate::error::{Error, Result};

pub const RAW32_MAGIC: &str = "SIMR1";

/// JSON sidecar of a RAW32 stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raw32Header {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub pitch_nm: f64,
    #[serde(default)]
    pub labels: Vec<String>,
}

/// Resolves `<name>`, `<name>.json` or `<name>.f32` into the sidecar/payload pair.
pub fn raw32_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut payload = base.into_os_string();
    payload.push(".f32");
    (json.into(), payload.into())
}

pub fn save_raster(stack: &ImageStack, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, payload_path) = raw32_paths(path);
    let header = Raw32Header {
        magic: RAW32_MAGIC.to_string(),
        width: stack.grid.width,
        height: stack.grid.height,
        frames: stack.len(),
        pitch_nm: stack.grid.pitch_nm,
        labels: stack.labels.clone(),
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::with_capacity(stack.len() * stack.grid.len() * 4);
    for v in stack.frames.iter().flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<ImageStack> {
    let (json_path, payload_path) = raw32_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Raw32Header =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.magic != RAW32_MAGIC {
        return Err(Error::format(
            &json_path,
            format!("bad magic {:?}, expected {RAW32_MAGIC:?}", header.magic),
        ));
    }
    let grid = GridSpec::new(header.width, header.height, header.pitch_nm)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;

    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = header.frames * grid.len() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &payload_path,
            format!(
                "payload is {} bytes, header declares {} ({} frames of {}x{})",
                bytes.len(),
                expected,
                header.frames,
                header.width,
                header.height
            ),
        ));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            &payload_path,
            format!("non-finite sample at index {i}"),
        ));
    }
    let frames = if grid.len() == 0 {
        Vec::new()
    } else {
        samples.chunks_exact(grid.len()).map(|c| c.to_vec()).collect()
    };
    Ok(ImageStack::new(grid, frames)?.with_labels(header.labels))
}

/// 16-bit binary PGM preview, linearly mapped from `[0, max]`.
pub fn save_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = raster.max().max(0.0);
    let mut out = Vec::with_capacity(raster.data.len() * 2 + 32);
    write!(out, "P5\n{} {}\n65535\n", raster.width(), raster.height())
        .map_err(|e| Error::io(path, e))?;
    for &v in &raster.data {
        let q = if max > 0.0 {
            ((v.max(0.0) / max) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(frames: usize, w: usize, h: usize) -> ImageStack {
        let g = GridSpec::new(w, h, 65.0).unwrap();
        let f = (0..frames)
            .map(|k| (0..w * h).map(|i| (i * 7 + k) as f32 * 0.1).collect())
            .collect();
        ImageStack::new(g, f).unwrap()
    }

    #[test]
    fn round_trip_two_frames() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack(2, 4, 4).with_labels(vec!["a".into()]);
        save_raster(&s, dir.path().join("s")).unwrap();
        let back = load_raster(dir.path().join("s.json")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.grid.pitch_nm, 65.0);
    }

    #[test]
    fn save_creates_two_files_with_zero_payload() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(3, 2, 1.0).unwrap();
        let s = Raster::zeros(g).into_stack();
        save_raster(&s, dir.path().join("z")).unwrap();
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["z.f32", "z.json"]);
        let payload = fs::read(dir.path().join("z.f32")).unwrap();
        assert_eq!(payload, vec![0u8; 3 * 2 * 4]);
    }

    #[test]
    fn header_records_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        save_raster(&stack(9, 2, 2), dir.path().join("n")).unwrap();
        let h: Raw32Header =
            serde_json::from_str(&fs::read_to_string(dir.path().join("n.json")).unwrap()).unwrap();
        assert_eq!(h.frames, 9);
        assert_eq!(h.magic, "SIMR1");
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_raster(&stack(2, 4, 4), dir.path().join("s")).unwrap();
        let p = dir.path().join("s.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        let err = load_raster(dir.path().join("s")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn missing_file_and_nan_payload() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_raster(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
        let mut s = stack(1, 2, 2);
        save_raster(&s, dir.path().join("x")).unwrap();
        s.frames[0][1] = f32::INFINITY;
        let mut bytes = Vec::new();
        for v in &s.frames[0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.path().join("x.f32"), bytes).unwrap();
        assert!(load_raster(dir.path().join("x")).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(2, 1, 1.0).unwrap();
        let r = Raster::new(g, vec![0.0, 2.0]).unwrap();
        let p = dir.path().join("r.pgm");
        save_pgm(&r, &p).unwrap();
        let bytes = fs::read(p).unwrap();
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0xff, 0xff]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn raw32_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, n in 1usize..4,
            seed in any::<u64>(),
        ) {
            let g = GridSpec::new(w, h, 12.5).unwrap();
            let mut rng = crate::imgcore::Seed(seed).rng("test", 0);
            use rand::Rng;
            let frames = (0..n)
                .map(|_| (0..w * h).map(|_| rng.random::<f32>() * 1e3 - 500.0).collect())
                .collect();
            let s = ImageStack::new(g, frames).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_raster(&s, dir.path().join("p")).unwrap();
            let back = load_raster(dir.path().join("p")).unwrap();
            for (a, b) in back.frames.iter().flatten().zip(s.frames.iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.grid, s.grid);
        }
    }
}

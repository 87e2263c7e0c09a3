//! Binary PGM (P5) and PPM (P6) writers for heatmaps and overlay frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Write a `[H, W]` map in [0,1] as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::shape("write_pgm", format!("expected rank 2, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut buf = Vec::with_capacity(h * w + 32);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend(map.data().iter().map(|&v| to_byte(v)));
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Write a `[H, W, 3]` image in [0,1] as an 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::shape("write_ppm", format!("expected [H,W,3], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    buf.extend(image.data().iter().map(|&v| to_byte(v)));
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Write one PGM per timestep of a `[T, H, W]` heatmap stack, named
/// `<prefix>_t<idx>.pgm`. Returns the written paths.
pub fn write_heatmap_sequence(prefix: &Path, heatmap: &Tensor) -> Result<Vec<std::path::PathBuf>> {
    if heatmap.rank() != 3 {
        return Err(Error::shape(
            "write_heatmap_sequence",
            format!("expected rank 3, got {:?}", heatmap.shape()),
        ));
    }
    let (t_ext, h, w) = (heatmap.shape()[0], heatmap.shape()[1], heatmap.shape()[2]);
    let mut paths = Vec::with_capacity(t_ext);
    for t in 0..t_ext {
        let slice = Tensor::new(
            vec![h, w],
            heatmap.data()[t * h * w..(t + 1) * h * w].to_vec(),
        )?;
        let name = format!(
            "{}_t{}.pgm",
            prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            t
        );
        let path = prefix.parent().unwrap_or(Path::new(".")).join(name);
        write_pgm(&path, &slice)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_has_expected_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let map = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 2.0]).unwrap();
        write_pgm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let payload = &bytes[b"P5\n3 2\n255\n".len()..];
        assert_eq!(payload, &[0u8, 128, 255, 64, 191, 255]);
    }
}

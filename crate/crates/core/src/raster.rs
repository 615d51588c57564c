//! Portable raster container: `FCAMRAS1`, a `(channels, height, width)`
//! header of little-endian `u32`, then little-endian `f32` values in
//! row-major order. Metadata lives in an adjacent `.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, FcamError, Result};
use crate::tensor::{Cam, CamSource, ImageTensor};

pub const MAGIC: &[u8; 8] = b"FCAMRAS1";
const HEADER_LEN: usize = 8 + 12;

/// Pixel value used for unknown labels when a pseudo-label mask is stored.
pub const UNKNOWN_LABEL: f32 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Sidecar metadata written next to every raster file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<CamSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for dim in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FcamError::RasterParse {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FcamError::RasterParse {
                offset: bytes.len(),
                message: "truncated shape header".into(),
            });
        }
        let dim = |i: usize| {
            let at = 8 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let (channels, height, width) = (dim(0), dim(1), dim(2));
        let count = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| FcamError::RasterParse {
                offset: 8,
                message: "shape overflows".into(),
            })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 4 {
            return Err(FcamError::RasterParse {
                offset: HEADER_LEN + payload.len().min(count * 4),
                message: format!(
                    "payload has {} bytes, header {channels}x{height}x{width} needs {}",
                    payload.len(),
                    count * 4
                ),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }
}

impl From<&ImageTensor> for Raster {
    fn from(img: &ImageTensor) -> Self {
        Self {
            channels: 3,
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }
}

impl From<&Cam> for Raster {
    fn from(cam: &Cam) -> Self {
        Self {
            channels: 1,
            height: cam.height(),
            width: cam.width(),
            data: cam.data().to_vec(),
        }
    }
}

impl TryFrom<Raster> for ImageTensor {
    type Error = FcamError;

    fn try_from(r: Raster) -> Result<Self> {
        if r.channels != 3 {
            return Err(FcamError::ShapeMismatch {
                expected: "3 channels".into(),
                actual: format!("{} channels", r.channels),
            });
        }
        ImageTensor::new(r.height, r.width, r.data)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_raster(path: &Path, raster: &Raster, meta: &RasterMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, raster.to_bytes()).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(io_err(&side))?;
    Ok(())
}

/// Loads a raster; the sidecar is optional and defaults to empty metadata.
pub fn load_raster(path: &Path) -> Result<(Raster, RasterMeta)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raster = Raster::from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let meta = match fs::read_to_string(&side) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => RasterMeta::default(),
        Err(e) => return Err(io_err(&side)(e)),
    };
    Ok((raster, meta))
}

pub fn save_cam(path: &Path, cam: &Cam, class_id: Option<usize>) -> Result<()> {
    let meta = RasterMeta {
        source_tag: Some(cam.source()),
        class_id,
        normalized: true,
        encoding: None,
        degenerate: Some(cam.is_degenerate()),
    };
    save_raster(path, &Raster::from(cam), &meta)
}

pub fn load_cam(path: &Path) -> Result<(Cam, RasterMeta)> {
    let (r, meta) = load_raster(path)?;
    if r.channels != 1 {
        return Err(FcamError::ShapeMismatch {
            expected: "1 channel".into(),
            actual: format!("{} channels", r.channels),
        });
    }
    let cam = Cam::from_unit(
        r.height,
        r.width,
        r.data,
        meta.source_tag.unwrap_or(CamSource::Raw),
    )?;
    Ok((cam, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_payload_rejected() {
        let r = Raster::new(3, 8, 8, vec![0.5; 192]).unwrap();
        let mut bytes = r.to_bytes();
        bytes.truncate(bytes.len() - 3);
        match Raster::from_bytes(&bytes) {
            Err(FcamError::RasterParse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_payload_mismatch_rejected() {
        let r = Raster::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = r.to_bytes();
        bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(Raster::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Raster::from_bytes(&bytes),
            Err(FcamError::RasterParse { offset: 0, .. })
        ));
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.fcr");
        let data: Vec<f32> = (0..192).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let r = Raster::new(3, 8, 8, data).unwrap();
        let meta = RasterMeta {
            source_tag: Some(CamSource::Interpolated),
            class_id: Some(2),
            normalized: true,
            ..Default::default()
        };
        save_raster(&path, &r, &meta).unwrap();
        let (back, back_meta) = load_raster(&path).unwrap();
        assert_eq!(back.to_bytes(), r.to_bytes());
        assert_eq!(back_meta, meta);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bits in prop::collection::vec(any::<u32>(), 12)) {
            // arbitrary bit patterns, NaN payloads included
            let data: Vec<f32> = bits.into_iter().map(f32::from_bits).collect();
            let r = Raster::new(3, 2, 2, data).unwrap();
            let bytes = r.to_bytes();
            let back = Raster::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}

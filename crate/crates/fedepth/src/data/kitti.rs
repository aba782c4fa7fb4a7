//! Loader for drive-and-frame image trees.
//!
//! The split file lists one image path per line, relative to the dataset
//! root. A frame's drive is the first path component containing
//! `_drive_` (falling back to the leading component), its index is the
//! numeric file stem, and its source frames are the neighboring indices
//! that exist on disk. Calibration is a single `fx fy cx cy width height`
//! line in `calib.txt`, looked up inside the drive directory first and at
//! the root as a fallback. Reference depth, when present, lives at
//! `depth/<drive>/<frame>.png` as 16-bit grayscale in 1/256 metre units
//! with zero meaning no reading.

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::camera::{ImageFrame, Intrinsics};
use crate::error::{Error, Result};
use crate::real::Real;

/// Ingestion-time resizing and evaluation bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoaderConfig {
    pub width: usize,
    pub height: usize,
    /// Reference depths are clamped to this many metres.
    pub depth_cap: f64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig {
            width: 832,
            height: 256,
            depth_cap: 80.0,
        }
    }
}

struct FrameRef {
    image: PathBuf,
    drive_id: String,
    drive_dir: PathBuf,
    frame_index: usize,
    stem: String,
    extension: String,
}

fn parse_line(root: &Path, line: &str) -> Option<FrameRef> {
    let rel = Path::new(line.trim());
    let components: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if components.is_empty() {
        return None;
    }
    let drive_pos = components
        .iter()
        .position(|c| c.contains("_drive_"))
        .unwrap_or(0);
    let drive_id = if components.len() > 1 {
        components[drive_pos].clone()
    } else {
        "ungrouped".to_string()
    };
    let drive_dir = if components.len() > 1 {
        root.join(components[..=drive_pos].join("/"))
    } else {
        root.to_path_buf()
    };
    let stem = rel.file_stem()?.to_string_lossy().into_owned();
    let frame_index: usize = stem.parse().ok()?;
    let extension = rel.extension()?.to_string_lossy().into_owned();
    Some(FrameRef {
        image: root.join(rel),
        drive_id,
        drive_dir,
        frame_index,
        stem,
        extension,
    })
}

fn neighbor_paths(frame: &FrameRef) -> Vec<PathBuf> {
    let dir = frame.image.parent().unwrap_or(Path::new("."));
    let width = frame.stem.len();
    let mut out = Vec::new();
    if let Some(prev) = frame.frame_index.checked_sub(1) {
        out.push(dir.join(format!("{prev:0width$}.{}", frame.extension)));
    }
    out.push(dir.join(format!(
        "{next:0width$}.{}",
        frame.extension,
        next = frame.frame_index + 1
    )));
    out
}

fn load_image<F: Real>(path: &Path, config: &LoaderConfig) -> Result<ImageFrame<F>> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .resize_exact(
            config.width as u32,
            config.height as u32,
            FilterType::Triangle,
        )
        .to_rgb8();
    let data = Array3::from_shape_fn((config.height, config.width, 3), |(r, c, ch)| {
        F::c(img.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0)
    });
    ImageFrame::from_clamped(data)
}

fn load_depth<F: Real>(path: &Path, config: &LoaderConfig) -> Result<Array2<F>> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .resize_exact(
            config.width as u32,
            config.height as u32,
            FilterType::Nearest,
        )
        .to_luma16();
    let cap = F::c(config.depth_cap);
    Ok(Array2::from_shape_fn(
        (config.height, config.width),
        |(r, c)| {
            let raw = img.get_pixel(c as u32, r as u32).0[0];
            (F::c(raw as f64 / 256.0)).min(cap)
        },
    ))
}

fn load_calibration<F: Real>(
    frame: &FrameRef,
    root: &Path,
    config: &LoaderConfig,
    missing: &mut Vec<String>,
) -> Option<Intrinsics<F>> {
    let candidates = [frame.drive_dir.join("calib.txt"), root.join("calib.txt")];
    let Some(found) = candidates.iter().find(|p| p.is_file()) else {
        for c in &candidates {
            missing.push(c.display().to_string());
        }
        return None;
    };
    let parsed = std::fs::read_to_string(found)
        .map_err(Error::Io)
        .and_then(|text| {
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .ok_or_else(|| Error::invalid("empty calibration file"))?;
            Intrinsics::<F>::from_calibration(line)?.scaled(config.width, config.height)
        });
    match parsed {
        Ok(k) => Some(k),
        Err(e) => {
            log::warn!("unusable calibration {}: {e}", found.display());
            None
        }
    }
}

/// Loads every usable frame listed in `split` into a training sample.
///
/// Missing files accumulate into one ingestion error naming every absent
/// path; files that exist but fail to decode are skipped with a warning.
pub fn load_kitti_layout<F: Real>(
    root: &Path,
    split: &Path,
    config: &LoaderConfig,
) -> Result<Vec<Sample<F>>> {
    if config.width == 0 || config.height == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    let text = std::fs::read_to_string(split).map_err(|_| Error::Ingestion {
        paths: vec![split.display().to_string()],
    })?;

    let mut samples = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    let mut calibrations: HashMap<String, Option<Intrinsics<F>>> = HashMap::new();

    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Some(frame) = parse_line(root, line) else {
            log::warn!("skipping unparsable split line `{line}`");
            continue;
        };
        if !frame.image.is_file() {
            missing.push(frame.image.display().to_string());
            continue;
        }
        let intrinsics = calibrations
            .entry(frame.drive_id.clone())
            .or_insert_with(|| load_calibration(&frame, root, config, &mut missing));
        let Some(intrinsics) = *intrinsics else {
            continue;
        };

        let target = match load_image::<F>(&frame.image, config) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping corrupt frame: {e}");
                continue;
            }
        };
        let mut sources = Vec::new();
        for p in neighbor_paths(&frame) {
            if !p.is_file() {
                continue;
            }
            match load_image::<F>(&p, config) {
                Ok(s) => sources.push(s),
                Err(e) => log::warn!("skipping corrupt source frame: {e}"),
            }
        }
        if sources.is_empty() {
            log::warn!(
                "skipping {}: no adjacent frame on disk",
                frame.image.display()
            );
            continue;
        }

        let depth_path = root
            .join("depth")
            .join(&frame.drive_id)
            .join(format!("{}.{}", frame.stem, frame.extension));
        let ground_truth = if depth_path.is_file() {
            match load_depth::<F>(&depth_path, config) {
                Ok(d) => Some(d),
                Err(e) => {
                    log::warn!("ignoring corrupt depth map: {e}");
                    None
                }
            }
        } else {
            None
        };

        let sample = Sample {
            target,
            sources,
            intrinsics,
            drive_id: frame.drive_id,
            frame_index: frame.frame_index,
            ground_truth,
            true_poses: None,
            region_mask: None,
        };
        sample.validate()?;
        samples.push(sample);
    }

    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Ingestion { paths: missing });
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "split {} produced no usable samples",
            split.display()
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb, RgbImage};
    use std::fs;
    use tempfile::TempDir;

    const DRIVE: &str = "2020_01_01_drive_0007_sync";

    fn write_frame(dir: &Path, index: usize, tint: u8) {
        fs::create_dir_all(dir).unwrap();
        let img = RgbImage::from_fn(64, 32, |x, y| {
            Rgb([((x * 3 + y) % 251) as u8, tint, ((x + 7 * y) % 251) as u8])
        });
        img.save(dir.join(format!("{index:010}.png"))).unwrap();
    }

    fn fixture() -> (TempDir, PathBuf) {
        let root = TempDir::new().unwrap();
        let images = root.path().join(DRIVE).join("image");
        for i in 0..3 {
            write_frame(&images, i, 40 + i as u8);
        }
        fs::write(root.path().join("calib.txt"), "35.2 35.2 31.5 15.5 64 32\n").unwrap();
        let split = root.path().join("split.txt");
        let lines: String = (0..3)
            .map(|i| format!("{DRIVE}/image/{i:010}.png\n"))
            .collect();
        fs::write(&split, lines).unwrap();
        (root, split)
    }

    fn full_res() -> LoaderConfig {
        LoaderConfig {
            width: 64,
            height: 32,
            depth_cap: 80.0,
        }
    }

    #[test]
    fn listed_frames_become_samples_with_neighbor_sources() {
        let (root, split) = fixture();
        let samples: Vec<Sample<f32>> =
            load_kitti_layout(root.path(), &split, &full_res()).unwrap();
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.drive_id == DRIVE));
        assert_eq!(samples[0].sources.len(), 1, "first frame has only a next");
        assert_eq!(samples[1].sources.len(), 2, "middle frame has both");
        assert_eq!(samples[2].sources.len(), 1, "last frame has only a prev");
        assert!(samples[1].ground_truth.is_none());
    }

    #[test]
    fn frames_and_intrinsics_resize_to_the_configured_resolution() {
        let (root, split) = fixture();
        let config = LoaderConfig {
            width: 32,
            height: 16,
            depth_cap: 80.0,
        };
        let samples: Vec<Sample<f64>> = load_kitti_layout(root.path(), &split, &config).unwrap();
        for s in &samples {
            assert_eq!((s.target.height(), s.target.width()), (16, 32));
            assert!((s.intrinsics.fx - 17.6).abs() < 1e-9);
            assert!((s.intrinsics.cx - 15.75).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_depth_is_scaled_and_capped() {
        let (root, split) = fixture();
        let depth_dir = root.path().join("depth").join(DRIVE);
        fs::create_dir_all(&depth_dir).unwrap();
        let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(64, 32, |x, y| {
            match (x, y) {
                (0, 0) => Luma([120 * 256]),
                (1, 0) => Luma([5 * 256 + 128]),
                _ => Luma([0]),
            }
        });
        img.save(depth_dir.join("0000000001.png")).unwrap();

        let samples: Vec<Sample<f64>> =
            load_kitti_layout(root.path(), &split, &full_res()).unwrap();
        let gt = samples[1].ground_truth.as_ref().unwrap();
        assert_eq!(gt[[0, 0]], 80.0, "cap applies");
        assert_eq!(gt[[0, 1]], 5.5, "1/256 metre units");
        assert_eq!(gt[[0, 2]], 0.0, "zero stays a no-reading marker");
        assert!(samples[0].ground_truth.is_none());
    }

    #[test]
    fn missing_listed_files_are_collected_into_one_error() {
        let (root, split) = fixture();
        let mut lines = fs::read_to_string(&split).unwrap();
        lines.push_str(&format!("{DRIVE}/image/0000000009.png\n"));
        lines.push_str(&format!("{DRIVE}/image/0000000010.png\n"));
        fs::write(&split, lines).unwrap();

        let err = load_kitti_layout::<f32>(root.path(), &split, &full_res()).unwrap_err();
        match err {
            Error::Ingestion { paths } => {
                assert_eq!(paths.len(), 2);
                assert!(paths[0].contains("0000000009.png"));
            }
            other => panic!("expected ingestion error, got {other}"),
        }

        let absent = root.path().join("nope.txt");
        assert!(matches!(
            load_kitti_layout::<f32>(root.path(), &absent, &full_res()),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn corrupt_frames_are_skipped_not_fatal() {
        let (root, split) = fixture();
        let images = root.path().join(DRIVE).join("image");
        write_frame(&images, 3, 99);
        let mut lines = fs::read_to_string(&split).unwrap();
        lines.push_str(&format!("{DRIVE}/image/0000000003.png\n"));
        fs::write(&split, lines).unwrap();
        fs::write(images.join("0000000001.png"), b"not a png").unwrap();

        let samples: Vec<Sample<f32>> =
            load_kitti_layout(root.path(), &split, &full_res()).unwrap();
        // Frame 1 fails to decode: it is dropped as a target, and frames
        // that leaned on it as their only source drop out with it.
        let indices: Vec<usize> = samples.iter().map(|s| s.frame_index).collect();
        assert_eq!(indices, [2, 3]);
        assert!(samples.iter().all(|s| s.sources.len() == 1));
    }

    #[test]
    fn drive_calibration_beats_the_root_fallback() {
        let (root, split) = fixture();
        fs::write(
            root.path().join(DRIVE).join("calib.txt"),
            "64.0 64.0 31.5 15.5 64 32\n",
        )
        .unwrap();
        let samples: Vec<Sample<f64>> =
            load_kitti_layout(root.path(), &split, &full_res()).unwrap();
        assert_eq!(samples[0].intrinsics.fx, 64.0);
    }

    #[test]
    fn a_split_with_no_usable_frames_is_an_error() {
        let root = TempDir::new().unwrap();
        let split = root.path().join("split.txt");
        fs::write(&split, "\n\n").unwrap();
        assert!(load_kitti_layout::<f32>(root.path(), &split, &full_res()).is_err());
    }
}

//! Dataset directory IO: `manifest.jsonl` plus `images/<id>_<CAM>.ppm`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::qa::build_sample;
use super::{Camera, Category, SceneSample};
use crate::image::RgbImage;

pub const MANIFEST: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    views: IndexMap<String, String>,
    question: String,
    answer: String,
    category: Category,
}

/// Which half of a generated corpus a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Seed of sample `index` in `split`: the low 32 bits of `base` select the
/// corpus, bit 31 the split and the low 31 bits the index, so the two
/// splits draw from disjoint seed ranges.
pub fn sample_seed(base: u64, split: Split, index: u32) -> u64 {
    assert!(index < 1 << 31, "sample index out of range");
    let half = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 31,
    };
    (base << 32) | half | index as u64
}

pub fn generate_split(base: u64, split: Split, count: u32, size: usize) -> Vec<SceneSample> {
    (0..count)
        .map(|i| build_sample(sample_seed(base, split, i), size).2)
        .collect()
}

fn image_name(id: &str, cam: Camera) -> String {
    format!("{IMAGE_DIR}/{id}_{}.ppm", cam.key())
}

/// Writes `samples` into `dir`, creating it if needed.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<(), DatasetError> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let manifest_path = dir.join(MANIFEST);
    let file = File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut manifest = BufWriter::new(file);
    for s in samples {
        if s.views.len() != Camera::ALL.len() {
            return Err(DatasetError::Invalid(format!(
                "sample {} has {} views, expected 6",
                s.id,
                s.views.len()
            )));
        }
        let mut views = IndexMap::new();
        for (cam, img) in Camera::ALL.iter().zip(&s.views) {
            let rel = image_name(&s.id, *cam);
            let path = dir.join(&rel);
            let f = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            img.write_ppm(&mut w)
                .and_then(|_| w.flush())
                .map_err(io_err(&path))?;
            views.insert(cam.key().to_string(), rel);
        }
        let line = ManifestLine {
            id: s.id.clone(),
            views,
            question: s.question.clone(),
            answer: s.answer.clone(),
            category: s.category,
        };
        let json = serde_json::to_string(&line).expect("manifest line serialises");
        writeln!(manifest, "{json}").map_err(io_err(&manifest_path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>, DatasetError> {
    let manifest_path = dir.join(MANIFEST);
    let file = File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |detail: String| DatasetError::Parse {
            path: manifest_path.clone(),
            line: i + 1,
            detail,
        };
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let mut slots: [Option<String>; 6] = Default::default();
        for (key, rel) in rec.views {
            let cam = Camera::from_key(&key).ok_or_else(|| parse(format!("unknown camera key {key:?}")))?;
            slots[cam.index()] = Some(rel);
        }
        let mut views = Vec::with_capacity(6);
        for (cam, slot) in Camera::ALL.iter().zip(slots) {
            let rel = slot.ok_or_else(|| parse(format!("missing view {}", cam.key())))?;
            let path = dir.join(rel);
            let f = File::open(&path).map_err(io_err(&path))?;
            views.push(RgbImage::read_ppm(&mut BufReader::new(f)).map_err(io_err(&path))?);
        }
        out.push(SceneSample {
            id: rec.id,
            views,
            question: rec.question,
            answer: rec.answer,
            category: rec.category,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_split(3, Split::Train, 100, 16);
        write_dataset(&samples, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn unknown_camera_key_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&generate_split(1, Split::Test, 2, 8), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let second = lines[1].replace("CAM_BACK_LEFT", "CAM_ROOF");
        fs::write(&path, format!("{}\n{second}\n", lines[0])).unwrap();
        match read_dataset(dir.path()) {
            Err(DatasetError::Parse { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("CAM_ROOF"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "{not json\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_split(1, Split::Train, 1, 8);
        write_dataset(&samples, dir.path()).unwrap();
        let victim = dir.path().join(image_name(&samples[0].id, Camera::Back));
        fs::remove_file(&victim).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("CAM_BACK.ppm"), "{err}");
    }

    #[test]
    fn train_and_test_ids_are_disjoint() {
        let train: HashSet<String> = (0..512).map(|i| format!("{:016x}", sample_seed(1, Split::Train, i))).collect();
        let test: HashSet<String> = (0..128).map(|i| format!("{:016x}", sample_seed(1, Split::Test, i))).collect();
        assert_eq!(train.len(), 512);
        assert!(train.is_disjoint(&test));
    }
}

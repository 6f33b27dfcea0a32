//! Dataset ingestion.
//!
//! A [`DatasetManifest`] is a deterministic list of image files, optionally
//! labelled. Two directory layouts are understood:
//!
//! * **class-per-directory** — `root/<class_name>/<image>`; class indices
//!   are assigned by sorting the directory names, so they are stable across
//!   machines and runs;
//! * **flat** — all images directly under `root`, unlabelled.
//!
//! Files that fail a cheap decodability check are not fatal: they land in
//! the manifest's skip report with a reason. Subsampling (for fixed-budget
//! evaluation protocols) is seeded and happens *after* sorting, so the same
//! `(seed, size)` always selects the same images.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How image files are organised on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    /// `root/<class_name>/<image>`, labels from directory names.
    ClassDirs,
    /// All images directly under `root`, no labels.
    Flat,
}

impl std::str::FromStr for DatasetLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_dirs" => Ok(DatasetLayout::ClassDirs),
            "flat" => Ok(DatasetLayout::Flat),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown dataset layout '{other}' (expected 'class_dirs' or 'flat')"),
            }),
        }
    }
}

/// One usable image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// Ground-truth class index (class-per-directory layouts only).
    pub class_index: Option<usize>,
}

/// A file that was found but not ingested, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Deterministic subsampling request: shuffle under `seed`, keep `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub seed: u64,
    pub size: usize,
}

/// The ingested dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: DatasetLayout,
    /// Sorted class names (class-per-directory layouts only).
    pub class_names: Vec<String>,
    /// Usable images, sorted by path.
    pub entries: Vec<ManifestEntry>,
    /// Files rejected during ingestion.
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when every entry carries a ground-truth label.
    pub fn is_labeled(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.class_index.is_some())
    }

    /// Errors unless the manifest is labelled (operations that need ground
    /// truth call this first).
    pub fn require_labels(&self) -> Result<()> {
        if self.is_labeled() {
            Ok(())
        } else {
            Err(Error::MissingClassLabels)
        }
    }

    /// A copy keeping a seeded `size`-entry subset (everything when the
    /// manifest is smaller), re-sorted by path. This is the one subsampling
    /// convention in the crate; evaluation budgets use it too.
    pub fn subsample(&self, spec: SubsetSpec) -> Result<DatasetManifest> {
        if spec.size == 0 {
            return Err(Error::InvalidConfig {
                detail: "subset size must be positive".into(),
            });
        }
        let mut out = self.clone();
        if spec.size < out.entries.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            out.entries.shuffle(&mut rng);
            out.entries.truncate(spec.size);
            out.entries.sort_by(|a, b| a.path.cmp(&b.path));
        }
        Ok(out)
    }
}

/// Walks `root` under the given layout and builds a manifest.
///
/// Every candidate file must pass a header-level decode check
/// (`image::image_dimensions`); failures are recorded in the skip report.
/// With `subset`, a seeded shuffle keeps `size` entries (all of them if the
/// dataset is smaller) and the result is re-sorted by path.
pub fn ingest_dataset(
    root: &Path,
    layout: DatasetLayout,
    subset: Option<SubsetSpec>,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut class_names = Vec::new();

    match layout {
        DatasetLayout::Flat => {
            for path in sorted_files(root)? {
                consider(path, None, &mut entries, &mut skipped);
            }
        }
        DatasetLayout::ClassDirs => {
            let mut dirs: Vec<PathBuf> = read_dir(root)?
                .into_iter()
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            class_names = dirs
                .iter()
                .map(|d| {
                    d.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default()
                })
                .collect();
            for (index, dir) in dirs.iter().enumerate() {
                for path in sorted_files(dir)? {
                    consider(path, Some(index), &mut entries, &mut skipped);
                }
            }
        }
    }

    if entries.is_empty() {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        layout,
        class_names,
        entries,
        skipped,
    };
    match subset {
        Some(spec) => manifest.subsample(spec),
        None => Ok(manifest),
    }
}

fn consider(
    path: PathBuf,
    class_index: Option<usize>,
    entries: &mut Vec<ManifestEntry>,
    skipped: &mut Vec<SkippedFile>,
) {
    match image::image_dimensions(&path) {
        Ok((w, h)) if w > 0 && h > 0 => entries.push(ManifestEntry { path, class_index }),
        Ok(_) => skipped.push(SkippedFile {
            path,
            reason: "image has zero area".into(),
        }),
        Err(e) => skipped.push(SkippedFile {
            path,
            reason: format!("not a decodable image: {e}"),
        }),
    }
}

fn read_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let it = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in it {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = read_dir(dir)?.into_iter().filter(|p| p.is_file()).collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, shade: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(6, 6, image::Rgb([shade, 0, 0]))
            .save(path)
            .unwrap();
    }

    fn class_fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (class, n) in [("cat", 3), ("dog", 2), ("eel", 4)] {
            for i in 0..n {
                write_png(&dir.path().join(class).join(format!("img{i}.png")), i as u8);
            }
        }
        dir
    }

    #[test]
    fn class_dirs_layout_sorts_names_and_labels_entries() {
        let dir = class_fixture();
        let m = ingest_dataset(dir.path(), DatasetLayout::ClassDirs, None).unwrap();
        assert_eq!(m.class_names, vec!["cat", "dog", "eel"]);
        assert_eq!(m.len(), 9);
        assert!(m.is_labeled());
        m.require_labels().unwrap();
        // Entries are path-sorted and labelled by directory.
        for e in &m.entries {
            let parent = e.path.parent().unwrap().file_name().unwrap().to_str().unwrap();
            let want = match parent {
                "cat" => 0,
                "dog" => 1,
                _ => 2,
            };
            assert_eq!(e.class_index, Some(want));
        }
        let paths: Vec<_> = m.entries.iter().map(|e| e.path.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn flat_layout_is_unlabelled_and_rejects_label_demands() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 1);
        write_png(&dir.path().join("b.png"), 2);
        let m = ingest_dataset(dir.path(), DatasetLayout::Flat, None).unwrap();
        assert_eq!(m.len(), 2);
        assert!(!m.is_labeled());
        assert!(matches!(m.require_labels(), Err(Error::MissingClassLabels)));
    }

    #[test]
    fn undecodable_files_land_in_the_skip_report() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("ok.png"), 7);
        std::fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        std::fs::write(dir.path().join("broken.png"), b"\x89PNG but not really").unwrap();
        let m = ingest_dataset(dir.path(), DatasetLayout::Flat, None).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.skipped.len(), 2);
        assert!(m.skipped.iter().all(|s| s.reason.contains("not a decodable image")));
    }

    #[test]
    fn empty_roots_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_dataset(dir.path(), DatasetLayout::Flat, None),
            Err(Error::EmptyDataset { .. })
        ));
        std::fs::write(dir.path().join("junk.bin"), b"junk").unwrap();
        assert!(matches!(
            ingest_dataset(dir.path(), DatasetLayout::Flat, None),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn subsets_are_seeded_sorted_and_stable() {
        let dir = class_fixture();
        let spec = SubsetSpec { seed: 5, size: 4 };
        let a = ingest_dataset(dir.path(), DatasetLayout::ClassDirs, Some(spec)).unwrap();
        let b = ingest_dataset(dir.path(), DatasetLayout::ClassDirs, Some(spec)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        // Sorted after sampling.
        let paths: Vec<_> = a.entries.iter().map(|e| e.path.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        // A different seed (almost surely) picks a different subset, and a
        // size beyond the dataset keeps everything.
        let c = ingest_dataset(
            dir.path(),
            DatasetLayout::ClassDirs,
            Some(SubsetSpec { seed: 6, size: 4 }),
        )
        .unwrap();
        assert_ne!(a, c);
        let all = ingest_dataset(
            dir.path(),
            DatasetLayout::ClassDirs,
            Some(SubsetSpec { seed: 1, size: 100 }),
        )
        .unwrap();
        assert_eq!(all.len(), 9);
    }
}

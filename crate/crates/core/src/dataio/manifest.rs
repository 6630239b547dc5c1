//! Manifest ingestion. Each row names an image, its mask, the labeled task
//! and the magnification; rows sharing a `group_id` are four 256×256
//! patches stitched in row order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image_io::{read_mask, read_patch};
use super::stitch::{stitch4, stitch4_masks};
use crate::datamodel::{Registries, Sample, Source, Split};
use crate::error::{Error, Result};
use crate::training::SampleSource;

pub const MANIFEST_HEADER: [&str; 7] =
    ["image_path", "mask_path", "task", "magnification", "split", "source", "group_id"];
pub const DATA_ROOT_ENV: &str = "OMNISEG_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub mask_path: String,
    pub task: String,
    pub magnification: u32,
    pub split: Split,
    pub source: Source,
    #[serde(default)]
    pub group_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the row paths are relative to.
    pub root: PathBuf,
    /// Kept rows with their 1-based row number in the file.
    pub rows: Vec<(usize, ManifestRow)>,
    /// NEPTUNE rows destined for TEST, dropped at ingestion.
    pub dropped: usize,
}

fn row_err(row: usize, message: impl Into<String>) -> Error {
    Error::ManifestRow {
        row,
        message: message.into(),
    }
}

impl Manifest {
    /// Loads with the root taken from `OMNISEG_DATA_ROOT` when set, else the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        Self::load_with_root(path, root)
    }

    pub fn load_with_root(path: &Path, root: Option<PathBuf>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = root.unwrap_or_else(|| {
            path.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
        });
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::invalid(format!(
                "{}: header must be `{}`, found `{}`",
                path.display(),
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut dropped = 0;
        for (i, record) in reader.records().enumerate() {
            let n = i + 1;
            let record = record.map_err(|e| row_err(n, e.to_string()))?;
            let row: ManifestRow = record
                .deserialize(Some(&csv::StringRecord::from(MANIFEST_HEADER.to_vec())))
                .map_err(|e| row_err(n, e.to_string()))?;
            if row.source == Source::Neptune && row.split == Split::Test {
                dropped += 1;
                continue;
            }
            for p in [&row.image_path, &row.mask_path] {
                if !root.join(p).is_file() {
                    return Err(row_err(n, format!("file `{}` does not exist", root.join(p).display())));
                }
            }
            rows.push((n, row));
        }
        Ok(Self { root, rows, dropped })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for (_, row) in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|(_, r)| r.split == split).count()
    }
}

/// Reads one row into a sample with ids resolved against `registries`.
pub fn load_sample(manifest: &Manifest, index: usize, registries: &Registries) -> Result<Sample> {
    let (n, row) = &manifest.rows[index];
    let n = *n;
    let task = registries.classes.by_name(&row.task).map_err(|e| row_err(n, e.to_string()))?;
    let scale = registries
        .scales
        .by_magnification(row.magnification)
        .map_err(|e| row_err(n, e.to_string()))?;
    let image = read_patch(&manifest.resolve(&row.image_path)).map_err(|e| row_err(n, e.to_string()))?;
    let mask = read_mask(&manifest.resolve(&row.mask_path)).map_err(|e| row_err(n, e.to_string()))?;
    Sample::new(image, mask, task.id, scale.id, row.source, row.split).map_err(|e| row_err(n, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Item {
    /// Indices into `Manifest::rows`; one row or a stitch group of four.
    rows: Vec<usize>,
    task_id: usize,
}

/// Lazily loaded view of one split.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    manifest: Manifest,
    registries: Registries,
    items: Vec<Item>,
}

impl ManifestDataset {
    pub fn new(manifest: Manifest, registries: Registries, split: Split) -> Result<Self> {
        let mut items = Vec::new();
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut group_order = Vec::new();
        for (i, (n, row)) in manifest.rows.iter().enumerate() {
            let task = registries.classes.by_name(&row.task).map_err(|e| row_err(*n, e.to_string()))?;
            registries
                .scales
                .by_magnification(row.magnification)
                .map_err(|e| row_err(*n, e.to_string()))?;
            if row.split != split {
                continue;
            }
            if row.group_id.is_empty() {
                items.push((i, Item { rows: vec![i], task_id: task.id }));
            } else {
                let g = groups.entry(row.group_id.as_str()).or_default();
                if g.is_empty() {
                    group_order.push((i, row.group_id.as_str()));
                }
                g.push(i);
            }
        }
        for (first, id) in group_order {
            let members = &groups[id];
            let (n, head) = &manifest.rows[first];
            if members.len() != 4 {
                return Err(row_err(
                    *n,
                    format!("group `{id}` has {} rows, stitching needs 4", members.len()),
                ));
            }
            for &m in members {
                let (mn, r) = &manifest.rows[m];
                if r.task != head.task || r.magnification != head.magnification || r.source != head.source {
                    return Err(row_err(*mn, format!("row disagrees with the rest of group `{id}`")));
                }
            }
            let task_id = registries.classes.by_name(&head.task)?.id;
            items.push((first, Item { rows: members.clone(), task_id }));
        }
        items.sort_by_key(|(first, _)| *first);
        Ok(Self {
            items: items.into_iter().map(|(_, it)| it).collect(),
            manifest,
            registries,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn registries(&self) -> &Registries {
        &self.registries
    }
}

impl SampleSource for ManifestDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn task_id(&self, index: usize) -> usize {
        self.items[index].task_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let item = &self.items[index];
        if let [only] = item.rows[..] {
            return load_sample(&self.manifest, only, &self.registries);
        }
        let parts = item
            .rows
            .iter()
            .map(|&r| load_sample(&self.manifest, r, &self.registries))
            .collect::<Result<Vec<_>>>()?;
        let n = self.manifest.rows[item.rows[0]].0;
        let images: Vec<_> = parts.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<_> = parts.iter().map(|s| s.mask.clone()).collect();
        let image = stitch4(&images).map_err(|e| row_err(n, e.to_string()))?;
        let mask = stitch4_masks(&masks).map_err(|e| row_err(n, e.to_string()))?;
        let head = &parts[0];
        Sample::new(image, mask, head.task_id, head.scale_id, head.source, head.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::image_io::{write_mask, write_patch};
    use crate::dataio::stitch::STITCH_PATCH_SIDE;
    use crate::datamodel::{Mask, Patch};

    fn write_pair(root: &Path, stem: &str, size: usize, value: f32) {
        write_patch(&root.join(format!("{stem}_image.png")), &Patch::filled(size, size, [value; 3])).unwrap();
        let mut m = Mask::zeros(size, size);
        m.set(0, 0, true);
        write_mask(&root.join(format!("{stem}_mask.png")), &m).unwrap();
    }

    fn write_manifest(root: &Path, body: &str) -> PathBuf {
        let path = root.join("manifest.csv");
        std::fs::write(&path, format!("{}\n{body}", MANIFEST_HEADER.join(","))).unwrap();
        path
    }

    #[test]
    fn rows_resolve_against_registries() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 8, 0.5);
        let path = write_manifest(
            dir.path(),
            "a_image.png,a_mask.png,CAP,20,TRAIN,NEPTUNE,\n\
             a_image.png,a_mask.png,TUFT,5,TEST,NEPTUNE,\n\
             a_image.png,a_mask.png,HUBMAP_MV,40,TEST,HUBMAP,\n",
        );
        let m = Manifest::load_with_root(&path, None).unwrap();
        assert_eq!(m.dropped, 1);
        assert_eq!(m.rows.len(), 2);
        let s = load_sample(&m, 0, &Registries::default()).unwrap();
        assert_eq!((s.task_id, s.scale_id), (1, 2));
        assert_eq!(s.mask.count(), 1);
        let test = ManifestDataset::new(m, Registries::default(), Split::Test).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(test.load(0).unwrap().source, Source::Hubmap);
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 8, 0.5);
        let path = write_manifest(
            dir.path(),
            "a_image.png,a_mask.png,CAP,20,TRAIN,NEPTUNE,\nmissing.png,a_mask.png,CAP,20,TRAIN,NEPTUNE,\n",
        );
        let err = Manifest::load_with_root(&path, None).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");

        let path = write_manifest(dir.path(), "a_image.png,a_mask.png,GLOM,20,TRAIN,NEPTUNE,\n");
        let m = Manifest::load_with_root(&path, None).unwrap();
        let err = ManifestDataset::new(m, Registries::default(), Split::Train).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("row 1") && text.contains("TUFT"), "{text}");

        let path = write_manifest(dir.path(), "a_image.png,a_mask.png,CAP,twenty,TRAIN,NEPTUNE,\n");
        assert!(Manifest::load_with_root(&path, None).unwrap_err().to_string().contains("row 1"));
    }

    #[test]
    fn groups_are_stitched_in_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for q in 0..4 {
            write_pair(dir.path(), &format!("q{q}"), STITCH_PATCH_SIDE, q as f32 / 3.0);
            body += &format!("q{q}_image.png,q{q}_mask.png,PT,10,TRAIN,NEPTUNE,g1\n");
        }
        write_pair(dir.path(), "solo", 16, 0.2);
        body += "solo_image.png,solo_mask.png,PT,10,TRAIN,NEPTUNE,\n";
        let path = write_manifest(dir.path(), &body);
        let ds = ManifestDataset::new(Manifest::load_with_root(&path, None).unwrap(), Registries::default(), Split::Train)
            .unwrap();
        assert_eq!(ds.len(), 2);
        let s = ds.load(0).unwrap();
        assert_eq!((s.height(), s.width()), (512, 512));
        assert_eq!(s.image.pixel(300, 300)[0], 1.0);
        assert_eq!(s.mask.count(), 4);
        assert_eq!(ds.load(1).unwrap().height(), 16);
    }

    #[test]
    fn short_group_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", STITCH_PATCH_SIDE, 0.1);
        let path = write_manifest(dir.path(), "a_image.png,a_mask.png,PT,10,TRAIN,NEPTUNE,g\n");
        let m = Manifest::load_with_root(&path, None).unwrap();
        assert!(ManifestDataset::new(m, Registries::default(), Split::Train).is_err());
    }
}

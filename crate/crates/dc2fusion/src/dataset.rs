//! On-disk datasets of synthetic pairs:
//! `<root>/<split>/<id>_mri.vol3`, `<root>/<split>/<id>_pet.vol3` and a
//! `<root>/manifest.csv` listing `id,split,seed,size`.

use std::fs;
use std::path::{Path, PathBuf};

use dc2fusion_core::phantom::{generate_phantom_pair, make_splits, PhantomSpec, VolumePair};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vol3::{load_volume, save_volume};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub size: usize,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

fn pair_paths(root: &Path, split: Split, id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(split.dir_name());
    (dir.join(format!("{id}_mri.vol3")), dir.join(format!("{id}_pet.vol3")))
}

/// Generates `count` phantom pairs of edge `size` and writes them with a
/// 0.8/0.1/0.1 split. Everything is derived from `seed`.
pub fn generate_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    let splits = make_splits(count, seed)?;
    // Fail on a bad size before touching the filesystem.
    generate_phantom_pair(&PhantomSpec::new(seed, size))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    let mut split_of = vec![Split::Train; count];
    for &i in &splits.val {
        split_of[i] = Split::Val;
    }
    for &i in &splits.test {
        split_of[i] = Split::Test;
    }

    for s in Split::ALL {
        let dir = root.join(s.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let id = sample_id(i);
        let pair = generate_phantom_pair(&PhantomSpec::new(seeds[i], size))?;
        let (m, p) = pair_paths(root, split_of[i], &id);
        save_volume(&m, &pair.mri)?;
        save_volume(&p, &pair.pet)?;
        manifest.push(ManifestEntry {
            id,
            split: split_of[i],
            seed: seeds[i],
            size,
        });
    }
    write_manifest(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("id,split,seed,size\n");
    for e in entries {
        text.push_str(&format!("{},{},{},{}\n", e.id, e.split.dir_name(), e.seed, e.size));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize, what: &str| Error::Dataset(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("id,split,seed,size") {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2, "expected 4 fields"));
            }
            let split = Split::ALL
                .into_iter()
                .find(|s| s.dir_name() == f[1])
                .ok_or_else(|| bad(i + 2, "unknown split"))?;
            Ok(ManifestEntry {
                id: f[0].to_string(),
                split,
                seed: f[2].parse().map_err(|_| bad(i + 2, "bad seed"))?,
                size: f[3].parse().map_err(|_| bad(i + 2, "bad size"))?,
            })
        })
        .collect()
}

/// Loads every pair of one split, ordered by id.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<(String, VolumePair)>> {
    let dir = root.join(split.dir_name());
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&dir, err))?;
        if let Some(id) = e.file_name().to_str().and_then(|n| n.strip_suffix("_mri.vol3")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (m, p) = pair_paths(root, split, &id);
        let pair = VolumePair {
            mri: load_volume(&m)?,
            pet: load_volume(&p)?,
        };
        if pair.mri.shape() != pair.pet.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{id}: MRI {:?} vs PET {:?}",
                pair.mri.shape(),
                pair.pet.shape()
            )));
        }
        for (what, v) in [("MRI", &pair.mri), ("PET", &pair.pet)] {
            if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Dataset(format!("{id}: {what} values outside [0, 1]")));
            }
        }
        out.push((id, pair));
    }
    Ok(out)
}

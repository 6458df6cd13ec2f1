use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ppm, Dataset, Sample, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    split: String,
    class: String,
}

/// Writes `images/<id>.ppm`, `labels/<id>.ppm` and `manifest.jsonl`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for (split, samples) in ds.splits() {
        for s in samples {
            ppm::write(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
            ppm::write(&dir.join("labels").join(format!("{}.ppm", s.id)), &s.label)?;
            let rec = ManifestRecord {
                id: s.id.clone(),
                split: split.as_str().to_string(),
                class: s.class_tag.clone(),
            };
            serde_json::to_writer(&mut manifest, &rec).expect("manifest record serializes");
            manifest.push(b'\n');
        }
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.jsonl");
    let f = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut ds = Dataset::default();
    let mut side = None;
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::malformed(&manifest_path, format!("line {}: {e}", lineno + 1))
        })?;
        let split: Split = rec.split.parse().map_err(|_| {
            Error::malformed(
                &manifest_path,
                format!("line {}: unknown split `{}`", lineno + 1, rec.split),
            )
        })?;
        let image = ppm::read(&dir.join("images").join(format!("{}.ppm", rec.id)))?;
        let label_path = dir.join("labels").join(format!("{}.ppm", rec.id));
        let label = ppm::read(&label_path)?;
        let s = *side.get_or_insert(image.side());
        if image.side() != s || label.side() != s {
            return Err(Error::malformed(
                &label_path,
                format!("sample `{}` does not match side {s}", rec.id),
            ));
        }
        let sample = Sample {
            id: rec.id,
            image,
            label,
            class_tag: rec.class,
        };
        match split {
            Split::QueryTrain => ds.train_queries.push(sample),
            Split::QueryTest => ds.test_queries.push(sample),
            Split::Prompt => ds.prompt_db.push(sample),
        }
    }
    Ok(ds)
}

//! Dataset directories: `{train,val,test}/NNNN_img.ppm`, `NNNN_mask.pgm`,
//! a per-split `meta.jsonl`, plus `config.json` and `manifest.json` at the root.

use super::{Dataset, GenConfig, Sample, SampleMeta};
use crate::bagging::LabeledImage;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// SHA-256 of every written file, keyed by path relative to the root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn record(&mut self, root: &Path, rel: &str) -> Result<()> {
        let bytes = std::fs::read(root.join(rel))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }
}

pub fn write_dataset(ds: &Dataset, cfg: &GenConfig, root: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    manifest.record(root, "config.json")?;
    for (name, split) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        let mut meta = Vec::new();
        for s in split {
            let img = format!("{:04}_img.ppm", s.meta.id);
            let mask = format!("{:04}_mask.pgm", s.meta.id);
            s.image.pixels.write_ppm(&dir.join(&img))?;
            s.image.mask.write_pgm(&dir.join(&mask))?;
            manifest.record(root, &format!("{name}/{img}"))?;
            manifest.record(root, &format!("{name}/{mask}"))?;
            serde_json::to_writer(&mut meta, &s.meta)?;
            meta.push(b'\n');
        }
        let mut f = std::fs::File::create(dir.join("meta.jsonl"))?;
        f.write_all(&meta)?;
        manifest.record(root, &format!("{name}/meta.jsonl"))?;
    }
    std::fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&std::fs::read(root.join("manifest.json"))?)?)
}

/// Loads one split (`"train"`, `"val"` or `"test"`) in `meta.jsonl` order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}")));
    }
    let dir = root.join(split);
    let text = std::fs::read_to_string(dir.join("meta.jsonl"))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let meta: SampleMeta = serde_json::from_str(line)?;
        let pixels = Image::read_ppm(&dir.join(format!("{:04}_img.ppm", meta.id)))?;
        let mask = Mask::read_pgm(&dir.join(format!("{:04}_mask.pgm", meta.id)))?;
        let image = LabeledImage::new(meta.id, pixels, mask)?;
        if image.class_label != meta.class {
            return Err(Error::ImageFormat(format!(
                "sample {} mask implies class {} but metadata says {}",
                meta.id, image.class_label, meta.class
            )));
        }
        out.push(Sample { image, meta });
    }
    Ok(out)
}

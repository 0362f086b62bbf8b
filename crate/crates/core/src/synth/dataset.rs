//! On-disk corpus layout: one directory per split holding `manifest.jsonl`
//! (one JSON object per question record) and an `images/` directory of
//! binary netpbm files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    CanvasSpec, GenParams, Image, Layout, ObjectAttributes, QARecord, RenderedScene, SceneKind,
    Task, PRNG_ALGORITHM,
};
use crate::vocab::Vocab;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene_id: String,
    pub kind: SceneKind,
    pub layout: Layout,
    pub count: usize,
    pub centers: Vec<(f64, f64)>,
    pub attributes: Vec<ObjectAttributes>,
    pub task: Task,
    pub prompt: String,
    pub answer: String,
    pub image_file: String,
    pub sha256: String,
    pub canvas_px: usize,
    pub patch_px: usize,
    pub generator: GenParams,
    pub prng: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<RenderedScene>,
    pub records: Vec<QARecord>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&RenderedScene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Records paired with their scenes, in record order.
    pub fn pairs(&self) -> Result<Vec<(&RenderedScene, &QARecord)>> {
        let index: HashMap<&str, &RenderedScene> =
            self.scenes.iter().map(|s| (s.id.as_str(), s)).collect();
        self.records
            .iter()
            .map(|r| {
                index
                    .get(r.scene_id.as_str())
                    .map(|s| (*s, r))
                    .ok_or_else(|| Error::Data(format!("record {} has no scene {}", r.id, r.scene_id)))
            })
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_name(scene: &RenderedScene) -> String {
    let ext = if scene.image.channels == 1 { "pgm" } else { "ppm" };
    format!("images/{}.{ext}", scene.id)
}

/// Writes every scene referenced by `records` plus the manifest. Returns
/// the manifest path.
pub fn write_dataset(dir: &Path, scenes: &[RenderedScene], records: &[QARecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let vocab = Vocab;
    let by_id: HashMap<&str, &RenderedScene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    if by_id.len() != scenes.len() {
        return Err(Error::Contract("scene ids must be unique within a split".into()));
    }
    let mut hashes: BTreeMap<&str, (String, String)> = BTreeMap::new();
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut out = BufWriter::new(fs::File::create(&manifest_path)?);
    for record in records {
        let scene = by_id.get(record.scene_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("record {} references unknown scene {}", record.id, record.scene_id))
        })?;
        if !hashes.contains_key(scene.id.as_str()) {
            let bytes = scene.image.to_netpbm();
            let name = image_name(scene);
            fs::write(dir.join(&name), &bytes)?;
            hashes.insert(scene.id.as_str(), (name, sha256_hex(&bytes)));
        }
        let (image_file, sha256) = hashes[scene.id.as_str()].clone();
        let entry = ManifestEntry {
            id: record.id.clone(),
            scene_id: scene.id.clone(),
            kind: scene.kind,
            layout: scene.layout,
            count: scene.count,
            centers: scene.centers.clone(),
            attributes: scene.attributes.clone(),
            task: record.task,
            prompt: vocab.decode(&record.prompt),
            answer: vocab.decode(&record.answer),
            image_file,
            sha256,
            canvas_px: scene.canvas.canvas_px,
            patch_px: scene.canvas.patch_px,
            generator: scene.generator,
            prng: PRNG_ALGORITHM.into(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest_path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(dir.join(MANIFEST_FILE))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

/// Loads a split, verifying every image against its manifest checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocab;
    let entries = read_manifest(dir)?;
    let mut dataset = Dataset::default();
    let mut loaded: HashMap<String, usize> = HashMap::new();
    for e in entries {
        if !loaded.contains_key(&e.scene_id) {
            let path = dir.join(&e.image_file);
            let bytes = fs::read(&path)?;
            let actual = sha256_hex(&bytes);
            if actual != e.sha256 {
                return Err(Error::Checksum { path, expected: e.sha256.clone(), actual });
            }
            let image = Image::from_netpbm(&bytes)?;
            let canvas = CanvasSpec::new(e.canvas_px, e.patch_px)?;
            if image.width != canvas.canvas_px || image.height != canvas.canvas_px {
                return Err(Error::Data(format!("{} does not match the canvas size", e.image_file)));
            }
            if e.centers.len() != e.count || e.attributes.len() != e.count {
                return Err(Error::Data(format!("record {} has inconsistent object lists", e.id)));
            }
            loaded.insert(e.scene_id.clone(), dataset.scenes.len());
            dataset.scenes.push(RenderedScene {
                id: e.scene_id.clone(),
                generator: e.generator,
                kind: e.kind,
                layout: e.layout,
                canvas,
                seed: e.generator.seed(),
                count: e.count,
                centers: e.centers.clone(),
                attributes: e.attributes.clone(),
                image,
            });
        }
        let encode = |text: &str| {
            vocab
                .encode(text)
                .ok_or_else(|| Error::Data(format!("record {} has out-of-vocabulary text {text:?}", e.id)))
        };
        dataset.records.push(QARecord {
            id: e.id.clone(),
            scene_id: e.scene_id.clone(),
            task: e.task,
            prompt: encode(&e.prompt)?,
            answer: encode(&e.answer)?,
        });
    }
    Ok(dataset)
}

/// Re-runs the generator recorded for a manifest entry and returns the
/// regenerated image bytes' sha256.
pub fn regenerate(entry: &ManifestEntry) -> Result<(RenderedScene, String)> {
    if entry.prng != PRNG_ALGORITHM {
        return Err(Error::Data(format!("unsupported generator {:?}", entry.prng)));
    }
    let mut scene = entry
        .generator
        .generate(CanvasSpec::new(entry.canvas_px, entry.patch_px)?)?;
    scene.id = entry.scene_id.clone();
    let sha = sha256_hex(&scene.image.to_netpbm());
    Ok((scene, sha))
}

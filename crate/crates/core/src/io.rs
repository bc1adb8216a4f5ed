//! JSON-lines records and on-disk splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use conceptdet_tensor::container::{AnyTensor, Container};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{BenchmarkSplit, SyntheticScene};

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Blank lines are ignored; a malformed line is an input error naming it.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::input(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Split-level fields stored next to the scene index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitHeader {
    name: String,
    categories: Vec<usize>,
    phrases: Vec<String>,
    held_out: Vec<usize>,
}

/// One index line: the scene plus its phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    #[serde(flatten)]
    pub scene: SyntheticScene,
    pub phrases: Vec<String>,
}

pub const SPLIT_FILE: &str = "split.json";
pub const INDEX_FILE: &str = "index.jsonl";
pub const IMAGES_FILE: &str = "images.bin";

/// Writes `split.json`, `index.jsonl` and the rendered images.
pub fn save_split(split: &BenchmarkSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let header = SplitHeader { name: split.name.clone(), categories: split.categories.clone(), phrases: split.phrases.clone(), held_out: split.held_out.clone() };
    std::fs::write(dir.join(SPLIT_FILE), serde_json::to_vec_pretty(&header)?)?;
    let records: Vec<SceneRecord> = split.scenes.iter().map(|s| SceneRecord { scene: s.clone(), phrases: s.phrases(&split.phrases) }).collect();
    write_jsonl(dir.join(INDEX_FILE), &records)?;
    let mut c = Container::new(serde_json::json!({ "split": split.name }));
    for (i, s) in split.scenes.iter().enumerate() {
        c.push(format!("scene{i}"), AnyTensor::from_tensor(&s.image()));
    }
    c.save(dir.join(IMAGES_FILE))?;
    Ok(())
}

/// Reads a split; images are re-rendered from the objects when the image
/// file is absent.
pub fn load_split(dir: impl AsRef<Path>) -> Result<BenchmarkSplit> {
    let dir = dir.as_ref();
    let header: SplitHeader = serde_json::from_slice(&std::fs::read(dir.join(SPLIT_FILE))?)?;
    let records: Vec<SceneRecord> = read_jsonl(dir.join(INDEX_FILE))?;
    let images = if dir.join(IMAGES_FILE).exists() { Some(Container::load(dir.join(IMAGES_FILE))?) } else { None };
    let mut scenes = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let mut s = SyntheticScene::from_objects(r.scene.seed, r.scene.size, r.scene.objects);
        if let Some(img) = images.as_ref().and_then(|c| c.get(&format!("scene{i}"))) {
            s.image = Some(img.to());
        }
        scenes.push(s);
    }
    Ok(BenchmarkSplit { name: header.name, scenes, categories: header.categories, phrases: header.phrases, held_out: header.held_out })
}

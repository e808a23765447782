//! Base ("real") splits, scene lookup and JSONL persistence.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::pseudo_query::{AugmentedDataset, Margins, QuerySample, RelationLabel, Source};
use crate::scene::{sample_base_scene, SceneSpec};
use crate::seeds;

/// Scenes with their queries. Every sample's `scene_id` is present in `scenes`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneSpec>,
    pub samples: Vec<QuerySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn store(&self) -> SceneStore {
        SceneStore::new(self.scenes.iter().cloned())
    }

    /// Writes `<stem>.scenes.jsonl` and `<stem>.samples.jsonl`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(format!("{stem}.scenes.jsonl")), &self.scenes)?;
        write_jsonl(&dir.join(format!("{stem}.samples.jsonl")), &self.samples)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let d = Self {
            scenes: read_jsonl(&dir.join(format!("{stem}.scenes.jsonl")))?,
            samples: read_jsonl(&dir.join(format!("{stem}.samples.jsonl")))?,
        };
        let store = d.store();
        for s in &d.samples {
            store.get(&s.scene_id)?;
        }
        Ok(d)
    }
}

impl From<AugmentedDataset> for Dataset {
    fn from(a: AugmentedDataset) -> Self {
        Self {
            scenes: a.scenes,
            samples: a.samples,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SceneStore {
    scenes: HashMap<String, SceneSpec>,
}

impl SceneStore {
    pub fn new(scenes: impl IntoIterator<Item = SceneSpec>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.scene_id.clone(), s)).collect(),
        }
    }

    pub fn extend(&mut self, scenes: impl IntoIterator<Item = SceneSpec>) {
        self.scenes
            .extend(scenes.into_iter().map(|s| (s.scene_id.clone(), s)));
    }

    pub fn get(&self, id: &str) -> Result<&SceneSpec> {
        self.scenes
            .get(id)
            .ok_or_else(|| LabError::MissingScene(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// `n` base scenes, one query each. `stream` keeps train and test disjoint.
pub fn build_base_split(n: usize, stream: u64, seed: u64, margins: Margins) -> Result<Dataset> {
    let mut out = Dataset::default();
    for i in 0..n {
        let scene_seed = seeds::derive(seed, &[stream, i as u64]);
        let (scene, q) = sample_base_scene(scene_seed, margins)?;
        out.samples.push(QuerySample {
            scene_id: scene.scene_id.clone(),
            tokens: q.tokens,
            target_box: scene.objects[q.target].bbox,
            source: Source::Real,
            distractor_count: scene.distractor_count(),
            relation: q.relation,
        });
        out.scenes.push(scene);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Relation labels with their query words, for external tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationEntry {
    pub label: RelationLabel,
    pub words: Vec<String>,
}

pub fn relation_vocabulary() -> Vec<RelationEntry> {
    RelationLabel::ALL
        .iter()
        .map(|&label| RelationEntry {
            label,
            words: label.words().iter().map(|w| w.to_string()).collect(),
        })
        .collect()
}

//! Paired 2D/3D sequences and the on-disk dataset layout.
//!
//! A dataset directory holds `index.json` plus two canonical sequence files
//! per entry (`<name>.2d.poseseq`, `<name>.3d.poseseq`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{get_topology, load_sequence, save_sequence, PoseSequence};

pub const DATASET_SCHEMA: &str = "occlift-dataset/1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// 2D observations and 3D ground truth of one sequence, frame-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSequence {
    pub name: String,
    pub action: String,
    pub label: usize,
    pub subject: usize,
    pub input2d: PoseSequence,
    pub target3d: PoseSequence,
}

impl PairedSequence {
    pub fn new(
        name: impl Into<String>,
        action: impl Into<String>,
        label: usize,
        subject: usize,
        input2d: PoseSequence,
        target3d: PoseSequence,
    ) -> Result<Self> {
        let name = name.into();
        if input2d.dims != 2 || target3d.dims != 3 {
            return Err(Error::ShapeMismatch(format!(
                "pair {name} needs 2D input and 3D target, got dims {} and {}",
                input2d.dims, target3d.dims
            )));
        }
        if input2d.len() != target3d.len() || input2d.topology.name != target3d.topology.name {
            return Err(Error::ShapeMismatch(format!(
                "pair {name} is misaligned: {} frames of {} vs {} frames of {}",
                input2d.len(),
                input2d.topology.name,
                target3d.len(),
                target3d.topology.name
            )));
        }
        Ok(Self {
            name,
            action: action.into(),
            label,
            subject,
            input2d,
            target3d,
        })
    }

    pub fn len(&self) -> usize {
        self.input2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input2d.is_empty()
    }

    /// Target frame `f` with the root joint subtracted from every joint.
    pub fn root_relative_target(&self, f: usize) -> Vec<f64> {
        root_relative(self.target3d.frame(f), self.target3d.topology.root)
    }
}

pub fn root_relative(frame: &[f64], root: usize) -> Vec<f64> {
    let r = [frame[root * 3], frame[root * 3 + 1], frame[root * 3 + 2]];
    frame
        .chunks_exact(3)
        .flat_map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub split: Split,
    pub action: String,
    pub label: usize,
    pub subject: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema: String,
    pub topology: String,
    pub actions: Vec<String>,
    /// Generator settings (camera, seed, ...) recorded verbatim.
    pub source: serde_json::Value,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topology: String,
    pub actions: Vec<String>,
    pub source: serde_json::Value,
    pub train: Vec<PairedSequence>,
    pub test: Vec<PairedSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self) -> DatasetIndex {
        let entry = |p: &PairedSequence, split| IndexEntry {
            name: p.name.clone(),
            split,
            action: p.action.clone(),
            label: p.label,
            subject: p.subject,
            frames: p.len(),
        };
        DatasetIndex {
            schema: DATASET_SCHEMA.to_string(),
            topology: self.topology.clone(),
            actions: self.actions.clone(),
            source: self.source.clone(),
            entries: self
                .train
                .iter()
                .map(|p| entry(p, Split::Train))
                .chain(self.test.iter().map(|p| entry(p, Split::Test)))
                .collect(),
        }
    }
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    for p in ds.train.iter().chain(&ds.test) {
        save_sequence(&p.input2d, dir.join(format!("{}.2d.poseseq", p.name)))?;
        save_sequence(&p.target3d, dir.join(format!("{}.3d.poseseq", p.name)))?;
    }
    let index = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&ds.index())?;
    fs::write(&index, text + "\n").map_err(|e| Error::file(&index, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::file(&index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    if index.schema != DATASET_SCHEMA {
        return Err(Error::Version {
            found: index.schema,
            expected: DATASET_SCHEMA.to_string(),
        });
    }
    get_topology(&index.topology)?;
    let mut ds = Dataset {
        topology: index.topology.clone(),
        actions: index.actions.clone(),
        source: index.source.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &index.entries {
        let input2d = load_sequence(dir.join(format!("{}.2d.poseseq", e.name)))?;
        let target3d = load_sequence(dir.join(format!("{}.3d.poseseq", e.name)))?;
        let pair = PairedSequence::new(&e.name, &e.action, e.label, e.subject, input2d, target3d)?;
        match e.split {
            Split::Train => ds.train.push(pair),
            Split::Test => ds.test.push(pair),
        }
    }
    Ok(ds)
}

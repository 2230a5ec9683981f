//! Synthetic video datasets in memory and on disk.
//!
//! Layout under the dataset root:
//!
//! ```text
//! dataset.toml              index: classes, instance classes, sequence dirs (written last)
//! train/seq_000/
//!   frame_000.nwt           1x3xHxW frame
//!   label_000.pgm           class labels (absent for unlabeled frames)
//!   inst_000.pgm            instance ids
//!   flow_001.flo            ground-truth reverse flow (frames >= 1)
//!   occ_001.pgm             occlusion mask (frames >= 1)
//!   manifest.txt            one line per frame, `-` for absent files (written last)
//! test/seq_000/ ...
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{read_flo, write_flo, FlowField};
use crate::labels::LabelMap;
use crate::synth::{random_scene, RandomSceneConfig, SceneSequence, INSTANCE_CLASSES, NUM_CLASSES};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "dataset.toml";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Recipe for a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Keep labels only on every N-th training frame (1 keeps all).
    pub labels_every: usize,
    pub scene: RandomSceneConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { seed: 0, train_sequences: 24, test_sequences: 8, labels_every: 1, scene: RandomSceneConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<Option<LabelMap>>,
    pub instances: Vec<Option<LabelMap>>,
    pub gt_flow: Vec<Option<FlowField<f32>>>,
    pub occlusion: Vec<Option<LabelMap>>,
}

impl Sequence {
    pub fn from_scene(name: impl Into<String>, scene: SceneSequence, labels_every: usize) -> Self {
        let keep = |t: usize| labels_every <= 1 || t % labels_every == 0;
        Sequence {
            name: name.into(),
            labels: scene.labels.into_iter().enumerate().map(|(t, l)| keep(t).then_some(l)).collect(),
            instances: scene.instances.into_iter().enumerate().map(|(t, l)| keep(t).then_some(l)).collect(),
            frames: scene.frames,
            gt_flow: scene.gt_flow,
            occlusion: scene.occlusion,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub instance_classes: Vec<u8>,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    num_classes: usize,
    instance_classes: Vec<u8>,
    train: Vec<String>,
    test: Vec<String>,
}

/// Generates every sequence of `spec` in memory.
pub fn build(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.train_sequences == 0 || spec.test_sequences == 0 {
        return Err(invalid!("dataset needs at least one train and one test sequence"));
    }
    let make = |split: &str, count: usize, offset: u64, labels_every: usize| -> Result<Vec<Sequence>> {
        (0..count)
            .map(|i| {
                let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
                let (_, scene) = random_scene(&spec.scene, seed)?;
                Ok(Sequence::from_scene(format!("{split}/seq_{i:03}"), scene, labels_every))
            })
            .collect()
    };
    Ok(Dataset {
        num_classes: NUM_CLASSES,
        instance_classes: INSTANCE_CLASSES.to_vec(),
        train: make("train", spec.train_sequences, 0, spec.labels_every)?,
        test: make("test", spec.test_sequences, 500_000, 1)?,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for t in 0..seq.len() {
        let frame = format!("frame_{t:03}.nwt");
        write_file(&dir.join(&frame), |o| seq.frames[t].write_to(o))?;
        let mut cols = vec![frame];
        for (opt, prefix) in [(&seq.labels[t], "label"), (&seq.instances[t], "inst")] {
            cols.push(match opt {
                Some(m) => {
                    let name = format!("{prefix}_{t:03}.pgm");
                    write_file(&dir.join(&name), |o| m.write_pgm(o))?;
                    name
                }
                None => "-".into(),
            });
        }
        cols.push(match &seq.gt_flow[t] {
            Some(f) => {
                let name = format!("flow_{t:03}.flo");
                write_flo(&dir.join(&name), f)?;
                name
            }
            None => "-".into(),
        });
        cols.push(match &seq.occlusion[t] {
            Some(m) => {
                let name = format!("occ_{t:03}.pgm");
                write_file(&dir.join(&name), |o| m.write_pgm(o))?;
                name
            }
            None => "-".into(),
        });
        manifest.push_str(&cols.join(" "));
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Writes `data` under `root`; the index is written after every sequence.
pub fn save(data: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for seq in data.train.iter().chain(&data.test) {
        write_sequence(&root.join(&seq.name), seq)?;
    }
    let index = Index {
        num_classes: data.num_classes,
        instance_classes: data.instance_classes.clone(),
        train: data.train.iter().map(|s| s.name.clone()).collect(),
        test: data.test.iter().map(|s| s.name.clone()).collect(),
    };
    let text = toml::to_string(&index).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(root.join(INDEX_FILE), text)?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_sequence(root: &Path, name: &str) -> Result<Sequence> {
    let dir: PathBuf = root.join(name);
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Format(format!("{}: missing or unreadable manifest ({e})", dir.display())))?;
    let mut seq = Sequence {
        name: name.to_string(),
        frames: Vec::new(),
        labels: Vec::new(),
        instances: Vec::new(),
        gt_flow: Vec::new(),
        occlusion: Vec::new(),
    };
    for (lineno, line) in manifest.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("{}:{}: expected 5 columns", dir.join(MANIFEST_FILE).display(), lineno + 1)));
        }
        let opt = |c: &str| (c != "-").then(|| dir.join(c));
        seq.frames.push(Tensor::read_from(&mut open(&dir.join(cols[0]))?)?);
        let pgm = |p: Option<PathBuf>| -> Result<Option<LabelMap>> { p.map(|p| LabelMap::read_pgm(&mut open(&p)?)).transpose() };
        seq.labels.push(pgm(opt(cols[1]))?);
        seq.instances.push(pgm(opt(cols[2]))?);
        seq.gt_flow.push(opt(cols[3]).map(|p| read_flo(&p)).transpose()?);
        seq.occlusion.push(pgm(opt(cols[4]))?);
    }
    if seq.is_empty() {
        return Err(Error::Format(format!("{}: empty manifest", dir.display())));
    }
    Ok(seq)
}

pub fn load(root: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(root.join(INDEX_FILE))
        .map_err(|e| Error::Config(format!("{}: no dataset index ({e})", root.display())))?;
    let index: Index = toml::from_str(&text).map_err(|e| Error::Format(format!("{INDEX_FILE}: {e}")))?;
    let read = |names: &[String]| names.iter().map(|n| read_sequence(root, n)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        num_classes: index.num_classes,
        instance_classes: index.instance_classes,
        train: read(&index.train)?,
        test: read(&index.test)?,
    })
}

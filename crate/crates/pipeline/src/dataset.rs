//! Phantom datasets and their on-disk manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uvforge_core::phantom::{gen_subject, SplitSizes, Style, SubjectSpec};
use uvforge_core::rng::{derive_seed, tag};
use uvforge_core::volume::{load_label, load_scalar, save_label, save_scalar};
use uvforge_core::{LabelVolume, ScalarVolume, Shape3};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::store::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "uvforge-dataset-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Source => "src",
            Split::TargetTrain => "tgt",
            Split::TargetTest => "test",
        }
    }

    fn style(self) -> Style {
        match self {
            Split::Source => Style::DomainA,
            Split::TargetTrain | Split::TargetTest => Style::DomainB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub style: String,
    /// Paths relative to the manifest directory.
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub seed: u64,
    pub image: ScalarVolume,
    /// Ground truth. Target-train labels are only read by the upper-bound
    /// baseline; everything else treats that split as unlabelled.
    pub label: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub num_classes: usize,
    pub source: Vec<Subject>,
    pub target_train: Vec<Subject>,
    pub target_test: Vec<Subject>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Subject] {
        match split {
            Split::Source => &self.source,
            Split::TargetTrain => &self.target_train,
            Split::TargetTest => &self.target_test,
        }
    }

    pub fn target_images(&self) -> Vec<ScalarVolume> {
        self.target_train.iter().map(|s| s.image.clone()).collect()
    }

    pub fn test_images(&self) -> Vec<ScalarVolume> {
        self.target_test.iter().map(|s| s.image.clone()).collect()
    }
}

const SPLITS: [Split; 3] = [Split::Source, Split::TargetTrain, Split::TargetTest];

/// Subject seeds for the three splits, in split order.
fn subject_seeds(cfg: &RunConfig) -> [Vec<u64>; 3] {
    let sizes = SplitSizes {
        source: cfg.n_source,
        target_train: cfg.n_target_train,
        target_test: cfg.n_target_test,
    };
    // leave headroom so consecutive seeds never wrap
    let base = derive_seed(cfg.seed, &[tag("phantom")]) >> 16;
    let bases = sizes.seed_bases(base);
    let counts = [sizes.source, sizes.target_train, sizes.target_test];
    std::array::from_fn(|k| (0..counts[k] as u64).map(|i| bases[k] + i).collect())
}

/// Renders the phantom dataset described by `cfg` in memory.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let shape = cfg.shape()?;
    let seeds = subject_seeds(cfg);
    let mut splits: [Vec<Subject>; 3] = Default::default();
    for (k, split) in SPLITS.into_iter().enumerate() {
        for (i, &seed) in seeds[k].iter().enumerate() {
            let (image, label) = gen_subject(&SubjectSpec::new(seed, shape, cfg.num_classes, split.style()))?;
            splits[k].push(Subject {
                id: format!("{}_{i:03}", split.prefix()),
                seed,
                image,
                label,
            });
        }
    }
    let [source, target_train, target_test] = splits;
    Ok(Dataset {
        shape,
        num_classes: cfg.num_classes,
        source,
        target_train,
        target_test,
    })
}

/// Writes volumes under `dir/data/` and the manifest at `dir/manifest.json`.
pub fn write(data: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut subjects = Vec::new();
    for split in SPLITS {
        let sub = Path::new("data").join(split.prefix());
        std::fs::create_dir_all(dir.join(&sub)).map_err(Error::io(dir.join(&sub)))?;
        for s in data.split(split) {
            let image = sub.join(format!("{}_image.uvf", s.id));
            let label = sub.join(format!("{}_label.uvf", s.id));
            save_scalar(dir.join(&image), &s.image)?;
            save_label(dir.join(&label), &s.label)?;
            subjects.push(SubjectEntry {
                id: s.id.clone(),
                split,
                seed: s.seed,
                style: split.style().name().to_string(),
                image: image.to_string_lossy().replace('\\', "/"),
                label: label.to_string_lossy().replace('\\', "/"),
            });
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        shape: data.shape.dims(),
        num_classes: data.num_classes,
        subjects,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads the dataset listed in `dir/manifest.json`.
pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingInput {
            path,
            hint: "run the phantom stage first or set data_dir",
        });
    }
    let manifest: Manifest = read_json(&path)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Artifact {
            path,
            message: format!("unknown format `{}`", manifest.format),
        });
    }
    let [d, h, w] = manifest.shape;
    let shape = Shape3::new(d, h, w)?;
    let mut splits: [Vec<Subject>; 3] = Default::default();
    for e in &manifest.subjects {
        let image = load_scalar(dir.join(&e.image))?;
        let label = load_label(dir.join(&e.label))?;
        if image.shape() != shape || label.shape() != shape || label.num_classes() != manifest.num_classes {
            return Err(Error::Artifact {
                path: dir.join(&e.image),
                message: format!("subject {} does not match the manifest shape or class count", e.id),
            });
        }
        let k = SPLITS.iter().position(|&s| s == e.split).expect("known split");
        splits[k].push(Subject {
            id: e.id.clone(),
            seed: e.seed,
            image,
            label,
        });
    }
    let [source, target_train, target_test] = splits;
    if source.is_empty() || target_train.is_empty() || target_test.is_empty() {
        return Err(Error::Artifact {
            path,
            message: "every split needs at least one subject".into(),
        });
    }
    Ok(Dataset {
        shape,
        num_classes: manifest.num_classes,
        source,
        target_train,
        target_test,
    })
}

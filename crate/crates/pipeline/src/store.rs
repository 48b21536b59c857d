//! Layout and serialization of everything written under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use uvforge_core::metrics::MetricReport;
use uvforge_core::model::{load_params, save_params, ParamVector};
use uvforge_core::pseudolabel::{PseudoLabelMeta, PseudoLabelRecord};
use uvforge_core::volume::{load_label, load_scalar, save_label, save_scalar};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::ResultRow;
use crate::generate::{Generated, Provenance};
use crate::stage1::PseudoLabel;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput { path, hint })
    }
}

/// Paths under the run output directory.
#[derive(Debug, Clone)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo")
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.uvfp"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.json"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn save_checkpoint(&self, name: &str, params: &ParamVector) -> Result<()> {
        std::fs::create_dir_all(self.checkpoints()).map_err(Error::io(self.checkpoints()))?;
        Ok(save_params(self.checkpoint(name), params)?)
    }

    pub fn load_checkpoint(&self, name: &str, hint: &'static str) -> Result<ParamVector> {
        Ok(load_params(require(self.checkpoint(name), hint)?)?)
    }

    /// `pseudo/<id>.uvf` plus its JSON sidecar `pseudo/<id>.json`.
    pub fn save_pseudo(&self, pseudo: &[PseudoLabel]) -> Result<()> {
        let dir = self.pseudo();
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for p in pseudo {
            save_label(dir.join(format!("{}.uvf", p.id)), &p.record.label)?;
            write_json(&dir.join(format!("{}.json", p.id)), &p.record.meta())?;
        }
        Ok(())
    }

    /// Pseudo-labels for every target-train subject of `data`.
    pub fn load_pseudo(&self, data: &Dataset) -> Result<Vec<PseudoLabel>> {
        let dir = self.pseudo();
        data.target_train
            .iter()
            .map(|s| {
                let hint = "run stage1 first";
                let label = load_label(require(dir.join(format!("{}.uvf", s.id)), hint)?)?;
                let meta: PseudoLabelMeta = read_json(&require(dir.join(format!("{}.json", s.id)), hint)?)?;
                Ok(PseudoLabel {
                    id: s.id.clone(),
                    record: PseudoLabelRecord::from_parts(label, meta),
                })
            })
            .collect()
    }

    fn sample_paths(&self, name: &str) -> [PathBuf; 3] {
        let dir = self.generated();
        [
            dir.join(format!("{name}.uvf")),
            dir.join(format!("{name}_label.uvf")),
            dir.join(format!("{name}.json")),
        ]
    }

    pub fn save_sample(&self, g: &Generated) -> Result<()> {
        let dir = self.generated();
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let [image, label, prov] = self.sample_paths(&g.provenance.key().name());
        save_scalar(image, &g.image)?;
        save_label(label, &g.label)?;
        write_json(&prov, &g.provenance)
    }

    /// A stored sample, if one exists with exactly this provenance.
    pub fn cached_sample(&self, prov: &Provenance) -> Result<Option<Generated>> {
        let [image, label, meta] = self.sample_paths(&prov.key().name());
        if !(image.is_file() && label.is_file() && meta.is_file()) {
            return Ok(None);
        }
        let stored: Provenance = read_json(&meta)?;
        if stored != *prov {
            return Ok(None);
        }
        Ok(Some(Generated {
            provenance: stored,
            image: load_scalar(image)?,
            label: load_label(label)?,
        }))
    }

    /// Writes `generated/index.json`, the ordered sample list stage 3 trains on.
    pub fn save_index(&self, samples: &[&Generated]) -> Result<()> {
        let names: Vec<String> = samples.iter().map(|g| g.provenance.key().name()).collect();
        write_json(&self.generated().join("index.json"), &names)
    }

    pub fn load_index(&self) -> Result<Vec<Generated>> {
        let index = require(self.generated().join("index.json"), "run stage2 first")?;
        let names: Vec<String> = read_json(&index)?;
        names
            .iter()
            .map(|name| {
                let [image, label, meta] = self.sample_paths(name);
                let hint = "generated set is incomplete; rerun stage2";
                Ok(Generated {
                    provenance: read_json(&require(meta, hint)?)?,
                    image: load_scalar(require(image, hint)?)?,
                    label: load_label(require(label, hint)?)?,
                })
            })
            .collect()
    }

    pub fn save_metrics(&self, name: &str, report: &MetricReport) -> Result<()> {
        write_json(&self.metrics(name), report)
    }

    pub fn read_results(&self) -> Result<Vec<ResultRow>> {
        let path = self.results();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut reader = csv::Reader::from_path(&path)?;
        Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    /// Replaces rows with the same variant name and appends new ones, then
    /// rewrites `results.csv` and `report.md`.
    pub fn upsert_results(&self, rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
        let mut all = self.read_results()?;
        for row in rows {
            match all.iter_mut().find(|r| r.variant == row.variant) {
                Some(slot) => *slot = row.clone(),
                None => all.push(row.clone()),
            }
        }
        std::fs::create_dir_all(&self.root).map_err(Error::io(&self.root))?;
        let mut writer = csv::Writer::from_path(self.results())?;
        for row in &all {
            writer.serialize(row)?;
        }
        writer.flush().map_err(Error::io(self.results()))?;
        std::fs::write(self.report(), render_report(&all)).map_err(Error::io(self.report()))?;
        Ok(all)
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Markdown summary of result rows, grouped by config hash and seed.
pub fn render_report(rows: &[ResultRow]) -> String {
    let mut groups: BTreeMap<(String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.config_hash.clone(), r.seed)).or_default().push(r);
    }
    let mut out = String::from("# Results\n");
    for ((hash, seed), rows) in groups {
        out.push_str(&format!("\n## Config {hash}, seed {seed}\n\n"));
        out.push_str("| variant | source masks | target masks | deform | scale-up | labelled | generated | DSC | NSD | ASD (mm) |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.variant,
                mark(r.source_masks),
                mark(r.target_masks),
                mark(r.deform),
                r.scale_up,
                r.n_labelled,
                r.n_generated,
                fmt(r.mean_dsc),
                fmt(r.mean_nsd),
                fmt(r.mean_asd)
            ));
        }
    }
    out
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correct::VariationalOptions;
use crate::error::{Error, Result};
use crate::similarity::DEFAULT_BINS;

/// Internal correction methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Variational,
    LineAlign,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Variational => "variational",
            Method::LineAlign => "line-align",
        }
    }
}

/// Condition name of the raw, distorted series.
pub const UNCORRECTED: &str = "uncorrected";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectInputs {
    pub id: String,
    /// 4D series acquired with forward polarity.
    pub dwi: PathBuf,
    pub bval: PathBuf,
    pub bvec: PathBuf,
    /// Reversed-polarity b=0 volume, paired with the first b=0 of `dwi`.
    pub b0_reverse: PathBuf,
    pub mask: PathBuf,
    pub levels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Series corrected by outside tools, keyed by method name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Histogram bins per image for mutual information.
    pub bins: usize,
    /// Fixed centerline smoothing weight; `None` targets the barycenter quantisation variance.
    pub lambda: Option<f64>,
    /// Coarse search step (curve parameter units) for the nearest centerline point.
    pub grid_step: Option<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            bins: DEFAULT_BINS,
            lambda: None,
            grid_step: None,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Variational, Method::LineAlign]
}

fn default_sigma() -> f64 {
    2.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_raters() -> Vec<String> {
    vec!["rater1".into(), "rater2".into(), "rater3".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub subjects: Vec<SubjectInputs>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub solver: VariationalOptions,
    /// Gaussian smoothing of the line-align field, mm.
    #[serde(default = "default_sigma")]
    pub line_align_sigma_mm: f64,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seeds the montage panel shuffle.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_raters")]
    pub raters: Vec<String>,
}

impl PipelineConfig {
    /// Parses a JSON config; relative paths are taken from the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for s in &mut self.subjects {
            for p in [&mut s.dwi, &mut s.bval, &mut s.bvec, &mut s.b0_reverse, &mut s.mask, &mut s.levels] {
                fix(p);
            }
            if let Some(r) = &mut s.reference {
                fix(r);
            }
            s.external.values_mut().for_each(fix);
        }
    }

    /// Every condition evaluated per subject: uncorrected, internal methods, then external ones.
    pub fn conditions(&self) -> Vec<String> {
        let mut out = vec![UNCORRECTED.to_string()];
        out.extend(self.methods.iter().map(|m| m.name().to_string()));
        let external: BTreeSet<&String> = self.subjects.iter().flat_map(|s| s.external.keys()).collect();
        out.extend(external.into_iter().cloned());
        out
    }

    /// Corrected conditions only, as shown to raters.
    pub fn corrected_conditions(&self) -> Vec<String> {
        self.conditions().into_iter().skip(1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::InvalidConfig("no subjects".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || !ids.insert(&s.id) {
                return Err(Error::InvalidConfig(format!("bad or duplicate subject id {:?}", s.id)));
            }
            let mut paths = vec![&s.dwi, &s.bval, &s.bvec, &s.b0_reverse, &s.mask, &s.levels];
            paths.extend(s.reference.iter());
            paths.extend(s.external.values());
            for p in paths {
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!("subject {}: missing file {}", s.id, p.display())));
                }
            }
        }
        let mut names = BTreeSet::new();
        names.insert(UNCORRECTED.to_string());
        for m in &self.methods {
            if !names.insert(m.name().to_string()) {
                return Err(Error::InvalidConfig(format!("method {} listed twice", m.name())));
            }
        }
        for s in &self.subjects {
            for name in s.external.keys() {
                if names.contains(name) || name.is_empty() || name.contains(['/', '\\', ',']) {
                    return Err(Error::InvalidConfig(format!("external method name {name:?} is reserved or invalid")));
                }
            }
        }
        let extra: BTreeSet<&String> = self.subjects.iter().flat_map(|s| s.external.keys()).collect();
        for s in &self.subjects {
            if s.external.len() != extra.len() {
                return Err(Error::InvalidConfig(format!("subject {} lacks some external methods", s.id)));
            }
        }
        if self.conditions().len() - 1 > 26 {
            return Err(Error::InvalidConfig("at most 26 corrected conditions".into()));
        }
        if !(self.line_align_sigma_mm >= 0.0) || self.metrics.bins < 2 {
            return Err(Error::InvalidConfig("line_align_sigma_mm must be >= 0 and bins >= 2".into()));
        }
        if self.raters.iter().any(|r| r.is_empty() || r.contains(',')) {
            return Err(Error::InvalidConfig("rater names must be non-empty and comma-free".into()));
        }
        self.solver.validate()
    }

    pub fn subject_dir(&self, id: &str) -> PathBuf {
        self.output_dir.join(id)
    }

    pub fn condition_dir(&self, id: &str, condition: &str) -> PathBuf {
        self.output_dir.join(id).join(condition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, b"x").unwrap();
        p
    }

    fn config(dir: &Path) -> PipelineConfig {
        let json = r#"{"subjects": [{"id": "s1", "dwi": "dwi.nii.gz", "bval": "bval", "bvec": "bvec",
            "b0_reverse": "b0r.nii.gz", "mask": "mask.nii.gz", "levels": "levels.nii.gz"}]}"#;
        for f in ["dwi.nii.gz", "bval", "bvec", "b0r.nii.gz", "mask.nii.gz", "levels.nii.gz"] {
            touch(dir, f);
        }
        let p = dir.join("c.json");
        fs::write(&p, json).unwrap();
        PipelineConfig::load(&p).unwrap()
    }

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        assert_eq!(cfg.methods, default_methods());
        assert_eq!(cfg.subjects[0].dwi, dir.path().join("dwi.nii.gz"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.conditions(), ["uncorrected", "variational", "line-align"]);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_file_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        fs::remove_file(dir.path().join("bvec")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(m)) if m.contains("bvec")));
        touch(dir.path(), "bvec");

        let mut dup = cfg.clone();
        dup.methods.push(Method::Variational);
        assert!(dup.validate().is_err());
        let mut reserved = cfg.clone();
        reserved.subjects[0].external.insert("variational".into(), dir.path().join("dwi.nii.gz"));
        assert!(reserved.validate().is_err());
        let mut ext = cfg;
        ext.subjects[0].external.insert("topup".into(), dir.path().join("dwi.nii.gz"));
        ext.validate().unwrap();
        assert_eq!(ext.corrected_conditions(), ["variational", "line-align", "topup"]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"subjects": [], "colour": 1}"#);
        assert!(err.is_err());
    }
}

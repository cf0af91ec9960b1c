use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Method, MetricOptions, PipelineConfig, SubjectInputs, UNCORRECTED};
use super::fsl;
use crate::centerline::{fit_centerline, level_report, quantisation_variance, slice_barycenters, AlignmentReport, Centerline, Smoothing};
use crate::correct::{
    apply_to_series, estimate_field_line_align, estimate_field_variational, trace_csv, CorrectionResult,
};
use crate::error::{Error, Result};
use crate::nifti::{load_volume, save_volume, save_with_intent, PED_DISPLACEMENT_INTENT};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::similarity::{cross_correlation, mutual_information};
use crate::stats::{paired_tukey, pairwise_rank_logistic, rank_csv, tukey_csv, PairedSamples, PairwiseRank, RankingRecord, TukeyResult};
use crate::tensor::{eigen_decompose, fit_dti, EigenField};
use crate::volume::{AcquisitionScheme, LevelLabels, Mask, PedSign, Volume};

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save(v: &Volume, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_volume(v, path)
}

/// Files of one phantom subject, relative to its directory.
pub const FIXTURE_FILES: [&str; 7] = [
    "dwi.nii.gz",
    "bval",
    "bvec",
    "field_true.nii.gz",
    "mask.nii.gz",
    "levels.nii.gz",
    "centerline_true.csv",
];

/// Writes `subjects` phantom subjects (noise seeds `spec.seed + i`) under `out`, plus a
/// `config.json` that runs the pipeline on them. Returns the config path.
pub fn cmd_phantom(spec: &PhantomSpec, subjects: usize, out: &Path) -> Result<PathBuf> {
    if subjects == 0 {
        return Err(Error::InvalidSpec("need at least one subject".into()));
    }
    let mut entries = Vec::new();
    for s in 0..subjects {
        let id = if subjects == 1 { "phantom".to_string() } else { format!("sub-{:02}", s + 1) };
        let mut spec = spec.clone();
        spec.seed = spec.seed.wrapping_add(s as u64);
        let truth = make_phantom(&spec)?;
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&truth.dwi_forward, dir.join("dwi.nii.gz"))?;
        fsl::write_scheme(&truth.scheme, dir.join("bval"), dir.join("bvec"))?;
        save_with_intent(&truth.field.to_volume(), dir.join("field_true.nii.gz"), Some(PED_DISPLACEMENT_INTENT))?;
        save_volume(&truth.mask.to_volume(), dir.join("mask.nii.gz"))?;
        save_volume(&truth.levels.to_volume(), dir.join("levels.nii.gz"))?;
        let mut csv = String::from("z_index,x_mm,y_mm,z_mm\n");
        for c in &truth.true_centerline {
            let p = c.point_mm;
            csv.push_str(&format!("{},{},{},{}\n", c.z_index, p[0], p[1], p[2]));
        }
        write(&dir.join("centerline_true.csv"), csv)?;
        save_volume(&truth.b0_forward, dir.join("b0_forward.nii.gz"))?;
        save_volume(&truth.b0_backward, dir.join("b0_backward.nii.gz"))?;
        save_volume(&truth.clean, dir.join("reference.nii.gz"))?;
        let rel = |f: &str| PathBuf::from(&id).join(f);
        entries.push(SubjectInputs {
            id: id.clone(),
            dwi: rel("dwi.nii.gz"),
            bval: rel("bval"),
            bvec: rel("bvec"),
            b0_reverse: rel("b0_backward.nii.gz"),
            mask: rel("mask.nii.gz"),
            levels: rel("levels.nii.gz"),
            reference: Some(rel("reference.nii.gz")),
            external: BTreeMap::new(),
        });
    }
    let cfg = PipelineConfig {
        subjects: entries,
        methods: vec![Method::Variational, Method::LineAlign],
        solver: Default::default(),
        line_align_sigma_mm: 2.0,
        metrics: Default::default(),
        output_dir: PathBuf::from("results"),
        seed: spec.seed,
        raters: vec!["rater1".into(), "rater2".into(), "rater3".into()],
    };
    let path = out.join("config.json");
    write(&path, serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")?;
    Ok(path)
}

/// Inputs of one subject, loaded and checked for consistency.
pub struct SubjectData {
    pub dwi: Volume,
    pub scheme: AcquisitionScheme,
    pub b0_forward: Volume,
    pub b0_reverse: Volume,
    pub mask: Mask,
    pub levels: LevelLabels,
    pub reference: Option<Volume>,
}

pub fn load_subject(s: &SubjectInputs) -> Result<SubjectData> {
    let dwi = load_volume(&s.dwi)?;
    let scheme = fsl::read_scheme(&s.bval, &s.bvec)?;
    if scheme.len() != dwi.nvol() {
        return Err(Error::InvalidConfig(format!(
            "subject {}: {} volumes but {} b-values",
            s.id,
            dwi.nvol(),
            scheme.len()
        )));
    }
    let first_b0 = *scheme
        .b0_indices()
        .first()
        .ok_or_else(|| Error::InvalidConfig(format!("subject {}: no b=0 volume", s.id)))?;
    let b0_forward = dwi.subvolume(first_b0);
    let b0_reverse = load_volume(&s.b0_reverse)?.with_ped(dwi.ped_axis, PedSign::Backward);
    b0_reverse.grid().ensure_matches(dwi.grid(), "reverse b=0 vs DWI")?;
    let mask_vol = load_volume(&s.mask)?;
    mask_vol.grid().ensure_matches(dwi.grid(), "mask vs DWI")?;
    let mask = Mask::from_threshold(&mask_vol, 0.5);
    let levels = LevelLabels::from_volume(&load_volume(&s.levels)?)?;
    levels.grid().ensure_matches(dwi.grid(), "levels vs DWI")?;
    let reference = match &s.reference {
        Some(p) => {
            let r = load_volume(p)?;
            r.grid().ensure_matches(dwi.grid(), "reference vs DWI")?;
            Some(r)
        }
        None => None,
    };
    Ok(SubjectData {
        dwi,
        scheme,
        b0_forward,
        b0_reverse,
        mask,
        levels,
        reference,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRun {
    pub subject: String,
    pub method: String,
    pub converged: bool,
    pub iterations: usize,
    pub flagged_lines: usize,
}

pub const FIELD_FILE: &str = "field.nii.gz";
pub const CORRECTED_FILE: &str = "dwi_corrected.nii.gz";
pub const TRACE_FILE: &str = "trace.csv";

/// Runs every internal method on every subject and copies external series through.
///
/// All subjects' inputs are loaded before any solve, so a bad input fails fast.
/// Runs that hit the iteration cap still write their outputs; check `converged`.
pub fn cmd_correct(cfg: &PipelineConfig) -> Result<Vec<CorrectionRun>> {
    cfg.validate()?;
    let data: Vec<SubjectData> = cfg.subjects.iter().map(load_subject).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    for (s, d) in cfg.subjects.iter().zip(&data) {
        for &m in &cfg.methods {
            let result = run_method(cfg, m, d)?;
            let dir = cfg.condition_dir(&s.id, m.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_with_intent(&result.field.to_volume(), dir.join(FIELD_FILE), Some(PED_DISPLACEMENT_INTENT))?;
            let corrected = apply_to_series(&d.dwi, &result.field)?;
            save_volume(&corrected, dir.join(CORRECTED_FILE))?;
            write(&dir.join(TRACE_FILE), trace_csv(&result.trace))?;
            runs.push(CorrectionRun {
                subject: s.id.clone(),
                method: m.name().to_string(),
                converged: result.converged,
                iterations: result.trace.len(),
                flagged_lines: result.flagged_lines.len(),
            });
        }
        for (name, path) in &s.external {
            let v = load_volume(path)?;
            v.grid().ensure_matches(d.dwi.grid(), "external series vs DWI")?;
            save(&v, &cfg.condition_dir(&s.id, name).join(CORRECTED_FILE))?;
        }
    }
    Ok(runs)
}

fn run_method(cfg: &PipelineConfig, m: Method, d: &SubjectData) -> Result<CorrectionResult> {
    match m {
        Method::Variational => estimate_field_variational(&d.b0_forward, &d.b0_reverse, &cfg.solver),
        Method::LineAlign => estimate_field_line_align(&d.b0_forward, &d.b0_reverse, cfg.line_align_sigma_mm),
    }
}

/// Cord mask from the mean diffusion-weighted image: voxels above half of its
/// 99.9th percentile. CSF is dark at typical b-values, so this isolates the cord.
pub fn cord_mask_from_dwi(dwi: &Volume, scheme: &AcquisitionScheme) -> Result<Mask> {
    if scheme.b0_indices().len() == scheme.len() {
        return Err(Error::InvalidSpec("no diffusion-weighted volumes".into()));
    }
    let mean = dwi.mean_over_volumes(|v| !scheme.is_b0(v));
    let mut sorted = mean.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = sorted[((sorted.len() - 1) as f64 * 0.999).round() as usize];
    let mask = Mask::from_threshold(&mean, 0.5 * p);
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

pub fn fit_centerline_to_mask(mask: &Mask, opts: &MetricOptions) -> Result<Centerline> {
    let points = slice_barycenters(mask)?;
    let smoothing = match opts.lambda {
        Some(l) => Smoothing::Lambda(l),
        None => Smoothing::ResidualVariance(quantisation_variance(mask.grid().spacing)),
    };
    fit_centerline(&points, smoothing)
}

/// Tensor fit, cord mask, centerline and per-level alignment of one DWI series.
pub struct ConditionMetrics {
    pub cord_mask: Mask,
    pub eigen: EigenField,
    pub centerline: Centerline,
    pub alignment: AlignmentReport,
}

pub fn condition_metrics(
    dwi: &Volume,
    scheme: &AcquisitionScheme,
    levels: &LevelLabels,
    opts: &MetricOptions,
) -> Result<ConditionMetrics> {
    let cord_mask = cord_mask_from_dwi(dwi, scheme)?;
    let tensors = fit_dti(dwi, scheme, &Mask::full(dwi.grid().clone()))?;
    let eigen = eigen_decompose(&tensors);
    let centerline = fit_centerline_to_mask(&cord_mask, opts)?;
    let alignment = level_report(&eigen, &cord_mask, levels, &centerline, opts.grid_step)?;
    Ok(ConditionMetrics {
        cord_mask,
        eigen,
        centerline,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub alignment: AlignmentReport,
    pub cord_voxels: usize,
    pub cc: Option<f64>,
    pub mi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyEntry {
    pub metric: String,
    pub result: TukeyResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub conditions: Vec<String>,
    /// subject → condition → metrics
    pub subjects: BTreeMap<String, BTreeMap<String, ConditionSummary>>,
    pub tukey: Vec<TukeyEntry>,
    /// Metrics without a Tukey table, with the reason.
    pub tukey_skipped: BTreeMap<String, String>,
    /// Every CSV written, relative to the output directory, with its header columns.
    pub csv_files: BTreeMap<String, Vec<String>>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const ALIGNMENT_HEADER: &str = "level,label,mad_deg,acd,voxels,volume_mm3";
pub const LEVEL_VOLUME_HEADER: &str = "subject,condition,level,label,voxels,volume_mm3";
pub const SIMILARITY_HEADER: &str = "subject,condition,cc,mi";
pub const TUKEY_HEADER: &str = "metric,method,mean,std,p_value,t_statistic";

fn columns(header: &str) -> Vec<String> {
    header.split(',').map(String::from).collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Metrics for every condition of every subject, Tukey comparisons against the
/// uncorrected series across subjects, and `summary.json` tying it together.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let conditions = cfg.conditions();
    let mut subjects = BTreeMap::new();
    let mut csv_files = BTreeMap::new();
    let mut level_volume = String::from(LEVEL_VOLUME_HEADER) + "\n";
    let mut similarity = String::from(SIMILARITY_HEADER) + "\n";
    for s in &cfg.subjects {
        let d = load_subject(s)?;
        let sim_mask = d.mask.dilate(2);
        let mut per = BTreeMap::new();
        for c in &conditions {
            let series = if c == UNCORRECTED {
                d.dwi.clone()
            } else {
                let p = cfg.condition_dir(&s.id, c).join(CORRECTED_FILE);
                if !p.is_file() {
                    return Err(Error::MissingMethodOutput(format!("{c} (subject {})", s.id)));
                }
                load_volume(&p)?
            };
            series.grid().ensure_matches(d.dwi.grid(), "corrected series vs DWI")?;
            let m = condition_metrics(&series, &d.scheme, &d.levels, &cfg.metrics)?;
            let dir = cfg.condition_dir(&s.id, c);
            save(&m.eigen.md_volume(), &dir.join(MD_FILE))?;
            save(&m.cord_mask.to_volume(), &dir.join(CORD_MASK_FILE))?;
            let rel = format!("{}/{c}/alignment.csv", s.id);
            write(&cfg.output_dir.join(&rel), m.alignment.to_csv())?;
            csv_files.insert(rel, columns(ALIGNMENT_HEADER));

            let (cc, mi) = match &d.reference {
                Some(r) => {
                    let b0 = series.mean_over_volumes(|v| d.scheme.is_b0(v));
                    (
                        Some(cross_correlation(&b0, r, &sim_mask)?),
                        Some(mutual_information(&b0, r, &sim_mask, cfg.metrics.bins)?),
                    )
                }
                None => (None, None),
            };
            for l in &m.alignment.levels {
                level_volume.push_str(&format!(
                    "{},{c},{},{},{},{:.3}\n",
                    s.id, l.level, l.label, l.voxels, l.volume_mm3
                ));
            }
            similarity.push_str(&format!("{},{c},{},{}\n", s.id, opt(cc), opt(mi)));
            per.insert(
                c.clone(),
                ConditionSummary {
                    alignment: m.alignment,
                    cord_voxels: m.cord_mask.count(),
                    cc,
                    mi,
                },
            );
        }
        subjects.insert(s.id.clone(), per);
    }
    write(&cfg.output_dir.join("level_volume.csv"), level_volume)?;
    csv_files.insert("level_volume.csv".into(), columns(LEVEL_VOLUME_HEADER));
    write(&cfg.output_dir.join("similarity.csv"), similarity)?;
    csv_files.insert("similarity.csv".into(), columns(SIMILARITY_HEADER));

    let (tukey, tukey_skipped) = tukey_tables(&subjects, &conditions);
    let tables: Vec<(String, TukeyResult)> = tukey.iter().map(|t| (t.metric.clone(), t.result.clone())).collect();
    write(&cfg.output_dir.join("tukey.csv"), tukey_csv(&tables))?;
    csv_files.insert("tukey.csv".into(), columns(TUKEY_HEADER));

    let summary = EvaluationSummary {
        conditions,
        subjects,
        tukey,
        tukey_skipped,
        csv_files,
    };
    write(
        &cfg.output_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(summary)
}

pub const MD_FILE: &str = "md.nii.gz";
pub const CORD_MASK_FILE: &str = "cord_mask.nii.gz";

type Extractor = Box<dyn Fn(&ConditionSummary) -> Option<f64>>;

fn tukey_tables(
    subjects: &BTreeMap<String, BTreeMap<String, ConditionSummary>>,
    conditions: &[String],
) -> (Vec<TukeyEntry>, BTreeMap<String, String>) {
    let mut metrics: Vec<(String, Extractor)> = Vec::new();
    let first = subjects.values().next().and_then(|c| c.values().next());
    for l in first.map(|c| c.alignment.levels.clone()).unwrap_or_default() {
        let lv = l.level;
        let get = move |c: &ConditionSummary| c.alignment.get(lv).cloned();
        metrics.push((format!("mad_deg:{}", l.label), Box::new(move |c| get(c).and_then(|a| a.mad_deg))));
        metrics.push((format!("acd:{}", l.label), Box::new(move |c| get(c).and_then(|a| a.acd))));
        metrics.push((format!("volume_mm3:{}", l.label), Box::new(move |c| get(c).map(|a| a.volume_mm3))));
    }
    metrics.push(("cc".into(), Box::new(|c| c.cc)));
    metrics.push(("mi".into(), Box::new(|c| c.mi)));

    let ids: Vec<String> = subjects.keys().cloned().collect();
    let mut tables = Vec::new();
    let mut skipped = BTreeMap::new();
    for (name, f) in metrics {
        let values: Option<Vec<Vec<f64>>> = subjects
            .values()
            .map(|per| conditions.iter().map(|c| per.get(c).and_then(|s| f(s))).collect())
            .collect();
        let Some(values) = values else {
            skipped.insert(name, "missing value".into());
            continue;
        };
        let result = PairedSamples::new(conditions.to_vec(), ids.clone(), values)
            .and_then(|p| paired_tukey(&p, UNCORRECTED));
        match result {
            Ok(result) => tables.push(TukeyEntry { metric: name, result }),
            Err(e) => {
                skipped.insert(name, e.to_string());
            }
        }
    }
    (tables, skipped)
}

/// Latest ranking per (rater, subject) from a `rater,subject,method,rank` CSV.
pub fn read_rankings(path: &Path) -> Result<Vec<RankingRecord>> {
    #[derive(Deserialize)]
    struct Row {
        rater: String,
        subject: String,
        method: String,
        rank: usize,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let mut latest: BTreeMap<(String, String), BTreeMap<String, usize>> = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let r = row.map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        latest.entry((r.rater, r.subject)).or_default().insert(r.method, r.rank);
    }
    let mut records = Vec::new();
    for ((rater, subject), ranks) in latest {
        let mut order: Vec<(usize, String)> = ranks.into_iter().map(|(m, r)| (r, m)).collect();
        order.sort();
        if order.iter().enumerate().any(|(i, (r, _))| *r != i + 1) {
            return Err(Error::Malformed(format!("ranks of {rater}/{subject} are not 1..n")));
        }
        records.push(RankingRecord {
            rater,
            subject,
            ranking: order.into_iter().map(|(_, m)| m).collect(),
        });
    }
    Ok(records)
}

/// Pairwise rank comparison table from a rankings CSV, written to `out`.
pub fn cmd_rank_stats(rankings: &Path, out: &Path) -> Result<Vec<PairwiseRank>> {
    let records = read_rankings(rankings)?;
    let rows = pairwise_rank_logistic(&records)?;
    write(out, rank_csv(&rows))?;
    Ok(rows)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use cordwarp::nifti::load_volume;
use cordwarp::correct::{estimate_field_line_align, estimate_field_variational, VariationalOptions};
use cordwarp::phantom::{make_phantom, PhantomSpec};
use cordwarp::pipeline::{self, fsl, EvaluationSummary, PipelineConfig, CORRECTED_FILE, FIELD_FILE, FIXTURE_FILES};
use cordwarp::sim::DisplacementField;
use cordwarp::volume::Mask;
use cordwarp::Error;

fn small() -> PhantomSpec {
    PhantomSpec {
        dims: [40, 40, 16],
        ..Default::default()
    }
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
    }
    out
}

#[test]
fn phantom_writes_declared_fixture_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = pipeline::cmd_phantom(&small(), 1, dir.path()).unwrap();
    let sub = dir.path().join("phantom");
    for f in FIXTURE_FILES {
        assert!(sub.join(f).is_file(), "{f}");
    }
    let dwi = load_volume(sub.join("dwi.nii.gz")).unwrap();
    let scheme = fsl::read_scheme(sub.join("bval"), sub.join("bvec")).unwrap();
    assert_eq!(dwi.nvol(), scheme.len());
    for f in ["field_true.nii.gz", "mask.nii.gz", "levels.nii.gz", "b0_forward.nii.gz", "b0_backward.nii.gz"] {
        assert_eq!(load_volume(sub.join(f)).unwrap().dims(), [40, 40, 16]);
    }
    let mut rdr = csv::Reader::from_path(sub.join("centerline_true.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["z_index", "x_mm", "y_mm", "z_mm"]);
    assert_eq!(rdr.records().count(), 16);
    PipelineConfig::load(cfg_path).unwrap().validate().unwrap();
}

#[test]
fn phantom_is_bit_identical_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = PhantomSpec { seed: 7, ..small() };
    pipeline::cmd_phantom(&spec, 1, a.path()).unwrap();
    pipeline::cmd_phantom(&spec, 1, b.path()).unwrap();
    pipeline::cmd_phantom(&PhantomSpec { seed: 8, ..small() }, 1, c.path()).unwrap();
    let (fa, fb, fc) = (
        read_dir_bytes(&a.path().join("phantom")),
        read_dir_bytes(&b.path().join("phantom")),
        read_dir_bytes(&c.path().join("phantom")),
    );
    assert_eq!(fa, fb);
    assert_ne!(fa["dwi.nii.gz"], fc["dwi.nii.gz"]);
}

#[test]
fn zero_peak_pair_equals_clean_b0() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { field_peak: 0.0, noise_sigma: 0.0, ..small() };
    pipeline::cmd_phantom(&spec, 1, dir.path()).unwrap();
    let sub = dir.path().join("phantom");
    let f = load_volume(sub.join("b0_forward.nii.gz")).unwrap();
    let b = load_volume(sub.join("b0_backward.nii.gz")).unwrap();
    let c = load_volume(sub.join("reference.nii.gz")).unwrap();
    assert_eq!(f.data(), c.data());
    assert_eq!(b.data(), c.data());
}

#[test]
fn missing_bvec_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::load(pipeline::cmd_phantom(&small(), 1, dir.path()).unwrap()).unwrap();
    fs::remove_file(dir.path().join("phantom/bvec")).unwrap();
    assert!(matches!(pipeline::cmd_correct(&cfg), Err(Error::InvalidConfig(m)) if m.contains("bvec")));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn zero_field_fixture_gives_near_zero_fields() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { field_peak: 0.0, noise_sigma: 0.0, ..small() };
    let cfg = PipelineConfig::load(pipeline::cmd_phantom(&spec, 1, dir.path()).unwrap()).unwrap();
    for run in pipeline::cmd_correct(&cfg).unwrap() {
        let f = load_volume(cfg.condition_dir("phantom", &run.method).join(FIELD_FILE)).unwrap();
        let rms = (f.data().iter().map(|x| x * x).sum::<f64>() / f.data().len() as f64).sqrt();
        assert!(rms < 0.05, "{}: {rms}", run.method);
    }
}

// With noise the flat background carries no signal to anchor the field, so only
// the neighbourhood of the cord is held to a bound.
#[test]
fn noisy_zero_field_stays_small_near_cord() {
    let spec = PhantomSpec { field_peak: 0.0, ..small() };
    let t = make_phantom(&spec).unwrap();
    let near = t.mask.dilate(3);
    let zero = DisplacementField::zeros(t.clean.grid().clone(), 1);
    let v = estimate_field_variational(&t.b0_forward, &t.b0_backward, &VariationalOptions::default()).unwrap();
    assert!(v.field.rms_difference(&zero, Some(&near)) < 0.15);
    let l = estimate_field_line_align(&t.b0_forward, &t.b0_backward, 2.0).unwrap();
    assert!(l.field.rms_difference(&zero, Some(&near)) < 0.05);
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PipelineConfig,
    summary: EvaluationSummary,
}

/// Two subjects, both internal methods, plus two external "methods" that are
/// copies of the uncorrected series.
fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg_path = pipeline::cmd_phantom(&small(), 2, &root).unwrap();
        let mut cfg = PipelineConfig::load(&cfg_path).unwrap();
        for s in &mut cfg.subjects {
            s.external.insert("copy-a".into(), s.dwi.clone());
            s.external.insert("copy-b".into(), s.dwi.clone());
        }
        let runs = pipeline::cmd_correct(&cfg).unwrap();
        assert_eq!(runs.len(), 4);
        let summary = pipeline::cmd_evaluate(&cfg).unwrap();
        Run { _dir: dir, root, cfg, summary }
    })
}

#[test]
fn corrected_fields_recover_truth() {
    let r = shared_run();
    for s in &r.cfg.subjects {
        let truth = DisplacementField::from_volume(&load_volume(r.root.join(&s.id).join("field_true.nii.gz")).unwrap()).unwrap();
        let mask = Mask::from_threshold(&load_volume(&s.mask).unwrap(), 0.5);
        for (method, tol) in [("variational", 0.5), ("line-align", 1.0)] {
            let f = load_volume(r.cfg.condition_dir(&s.id, method).join(FIELD_FILE)).unwrap();
            let f = DisplacementField::from_volume(&f).unwrap();
            let rmse = f.rms_difference(&truth, Some(&mask));
            assert!(rmse < tol, "{} {method}: {rmse}", s.id);
        }
        // external series are copied through unchanged
        let copy = load_volume(r.cfg.condition_dir(&s.id, "copy-a").join(CORRECTED_FILE)).unwrap();
        assert_eq!(copy.data(), load_volume(&s.dwi).unwrap().data());
    }
}

#[test]
fn correction_improves_end_levels() {
    let r = shared_run();
    let last = r.summary.subjects["sub-01"]["uncorrected"].alignment.levels.len() as u16;
    for per in r.summary.subjects.values() {
        for level in [1, last] {
            let before = per["uncorrected"].alignment.get(level).unwrap();
            let after = per["variational"].alignment.get(level).unwrap();
            assert!(after.mad_deg.unwrap() <= before.mad_deg.unwrap());
            assert!(after.acd.unwrap() >= before.acd.unwrap());
        }
        assert!(per["variational"].cc.unwrap() > per["uncorrected"].cc.unwrap());
    }
}

#[test]
fn uncorrected_copy_has_tukey_p_one() {
    let r = shared_run();
    assert!(!r.summary.tukey.is_empty());
    for t in &r.summary.tukey {
        for row in t.result.rows.iter().filter(|row| row.condition.starts_with("copy-")) {
            assert_eq!(row.p_value, Some(1.0), "{}", t.metric);
        }
    }
}

#[test]
fn declared_csvs_exist_and_parse() {
    let r = shared_run();
    let on_disk: EvaluationSummary =
        serde_json::from_str(&fs::read_to_string(r.cfg.output_dir.join(pipeline::SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk.csv_files, r.summary.csv_files);
    assert!(on_disk.csv_files.len() >= 2 * 5 + 3);
    for (rel, header) in &on_disk.csv_files {
        let mut rdr = csv::Reader::from_path(r.cfg.output_dir.join(rel)).unwrap();
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), *header, "{rel}");
        let width = header.len();
        for rec in rdr.records() {
            assert_eq!(rec.unwrap().len(), width, "{rel}");
        }
    }
}

#[test]
fn montage_has_shuffled_panels_and_reference() {
    let r = shared_run();
    let cfg = &r.cfg;
    let session = pipeline::cmd_montage(&cfg).unwrap();
    let case = &session.cases[0];
    assert_eq!(case.panels.len(), 4);
    let img_dir = cfg.output_dir.join("rating/images").join(&case.case_id);
    let decode = |p: PathBuf| {
        let mut r = png::Decoder::new(std::io::BufReader::new(fs::File::open(p).unwrap())).read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        (info.width as usize, info.height as usize, info.color_type)
    };
    let (pw, ph, ct) = decode(img_dir.join("panel_a.png"));
    assert_eq!(ct, png::ColorType::Grayscale);
    let (mw, mh, _) = decode(img_dir.join("montage.png"));
    assert_eq!((mw, mh), (5 * pw + 4, ph));

    // the key is a permutation of the corrected conditions and reproducible
    let mut methods: Vec<&String> = session.key[&case.case_id].values().collect();
    methods.sort();
    assert_eq!(methods, ["copy-a", "copy-b", "line-align", "variational"]);
    let again = pipeline::cmd_montage(&cfg).unwrap();
    assert_eq!(again.key, session.key);
    assert_eq!(pipeline::RatingSession::load(&cfg.output_dir.join("rating")).unwrap(), again);
}

#[test]
fn montage_requires_evaluated_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::load(pipeline::cmd_phantom(&small(), 1, dir.path()).unwrap()).unwrap();
    assert!(matches!(pipeline::cmd_montage(&cfg), Err(Error::MissingMethodOutput(_))));
}

fn write_rankings(dir: &Path, rows: &[(&str, &str, &[&str])]) -> PathBuf {
    let mut s = String::from("rater,subject,method,rank\n");
    for (rater, subject, order) in rows {
        for (i, m) in order.iter().enumerate() {
            s.push_str(&format!("{rater},{subject},{m},{}\n", i + 1));
        }
    }
    let p = dir.join("rankings.csv");
    fs::write(&p, s).unwrap();
    p
}

#[test]
fn rank_stats_examples() {
    let dir = tempfile::tempdir().unwrap();
    let subjects: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
    let rows: Vec<(&str, &str, &[&str])> = subjects
        .iter()
        .map(|s| ("r1", s.as_str(), &["X", "Y", "Z"][..]))
        .chain(subjects.iter().take(10).map(|s| ("r2", s.as_str(), &["X", "Z", "Y"][..])))
        .collect();
    let out = dir.path().join("stats.csv");
    let res = pipeline::cmd_rank_stats(&write_rankings(dir.path(), &rows), &out).unwrap();
    for r in res.iter().filter(|r| r.method1 == "X" || r.method2 == "X") {
        assert!(r.fallback, "{} vs {}", r.method1, r.method2);
    }
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["method1", "method2", "wins1", "wins2", "p_value", "fallback_flag"]);
    assert_eq!(rdr.records().count(), 3);

    // 76 vs 11 on two methods
    let names: Vec<String> = (0..87).map(|i| format!("s{i}")).collect();
    let rows: Vec<(&str, &str, &[&str])> = names
        .iter()
        .enumerate()
        .map(|(i, s)| ("r", s.as_str(), if i < 76 { &["A", "B"][..] } else { &["B", "A"][..] }))
        .collect();
    let res = pipeline::cmd_rank_stats(&write_rankings(dir.path(), &rows), &out).unwrap();
    assert!(res[0].p_value < 1e-4);

    let rows: Vec<(&str, &str, &[&str])> = names
        .iter()
        .take(40)
        .enumerate()
        .map(|(i, s)| ("r", s.as_str(), if i % 2 == 0 { &["A", "B", "C"][..] } else { &["C", "B", "A"][..] }))
        .collect();
    let res = pipeline::cmd_rank_stats(&write_rankings(dir.path(), &rows), &out).unwrap();
    assert!(res.iter().all(|r| r.p_value >= 0.05));

    let empty = write_rankings(dir.path(), &[]);
    assert!(matches!(pipeline::cmd_rank_stats(&empty, &out), Err(Error::NoRecords)));
}

#[test]
fn later_ranking_rows_supersede_earlier_ones() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_rankings(dir.path(), &[("r", "s1", &["A", "B"]), ("r", "s1", &["B", "A"])]);
    let recs = pipeline::read_rankings(&p).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].ranking, ["B", "A"]);
}

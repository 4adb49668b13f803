use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use xlct::pipeline::*;
use xlct::Error;

const SMALL: &str = r#"
seed = 3

[phantom]
diameter = 3.2
height = 0.1
voxel_size = 0.1
uptake = 0.1

[[phantom.targets]]
center = [0.5, 0.3, 0.0]
radius = 0.3
height = 0.1
concentration = 1.0

[protocol]
n_angles = 4
fov = 3.6
stage_speed = 5.0
bin_time = 0.02
quadrature_q = 3

[source]
count_scale = 1.0e6

[solver]
algorithm = "mlem"
max_iters = 20
"#;

fn small(out: &Path, extra: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(&format!("{SMALL}{extra}")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn demo_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml")
}

fn digests(m: &RunManifest) -> Vec<(String, String)> {
    m.artifacts
        .iter()
        .flat_map(|a| a.files.iter().map(|f| (f.path.clone(), f.sha256.clone())))
        .collect()
}

fn digest_of(m: &RunManifest, path: &str) -> String {
    digests(m).into_iter().find(|(p, _)| p == path).unwrap().1
}

#[test]
fn demo_manifest_lists_exactly_the_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config(&demo_path()).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let m = run_pipeline(&cfg).unwrap();
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ARTIFACTS);
    assert_eq!(m.status, "complete");
    assert_eq!(m.timings.len(), 5);

    let on_disk = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk.artifacts, m.artifacts);
    on_disk.verify(dir.path()).unwrap();
    assert_eq!(on_disk.config_hash, cfg.hash().unwrap());

    let listed: BTreeSet<String> = digests(&m).into_iter().map(|(p, _)| p).collect();
    let written: BTreeSet<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    assert_eq!(listed, written);

    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let kv = parse_metrics(&metrics);
    for key in ["xlct_cnr", "xlct_dice", "ct_interior_mean", "scan_time_per_slice", "cnr_below_threshold_at"] {
        assert!(kv.iter().any(|(k, _)| k == key), "{key} missing");
    }
    assert!(metrics.contains("concentration,cnr"));
}

#[test]
fn same_seed_same_digests_and_tampering_detected() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_pipeline(&small(a.path(), "")).unwrap();
    let mb = run_pipeline(&small(b.path(), "")).unwrap();
    assert_eq!(digests(&ma), digests(&mb));
    fs::write(a.path().join("xlct_recon.f32"), b"tampered").unwrap();
    assert!(ma.verify(a.path()).is_err());
}

#[test]
fn seed_changes_counts_but_not_noiseless_ct() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c1 = small(a.path(), "");
    c1.seed = 1;
    let mut c2 = small(b.path(), "");
    c2.seed = 2;
    let m1 = run_pipeline(&c1).unwrap();
    let m2 = run_pipeline(&c2).unwrap();
    assert_ne!(digest_of(&m1, "counts.u32"), digest_of(&m2, "counts.u32"));
    assert_eq!(digest_of(&m1, "counts-means.f64"), digest_of(&m2, "counts-means.f64"));
    assert_eq!(digest_of(&m1, "sinogram.f32"), digest_of(&m2, "sinogram.f32"));
    assert_eq!(digest_of(&m1, "ct_recon.f32"), digest_of(&m2, "ct_recon.f32"));
}

#[test]
fn noisy_ct_depends_on_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c1 = small(a.path(), "[ct]\nnoise = 0.01\n");
    c1.seed = 1;
    let mut c2 = small(b.path(), "[ct]\nnoise = 0.01\n");
    c2.seed = 2;
    run_pipeline(&c1).unwrap();
    run_pipeline(&c2).unwrap();
    assert_ne!(fs::read(a.path().join("sinogram.f32")).unwrap(), fs::read(b.path().join("sinogram.f32")).unwrap());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c1 = small(a.path(), "");
    c1.threads = 1;
    c1.solver.algorithm = Algorithm::Fista;
    let mut c8 = c1.clone();
    c8.threads = 8;
    c8.output_dir = b.path().to_path_buf();
    assert_eq!(digests(&run_pipeline(&c1).unwrap()), digests(&run_pipeline(&c8).unwrap()));
}

#[test]
fn failed_stage_is_flagged_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "");
    cfg.max_nonzeros = 10;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "simulate", .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let m = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("simulate"));
    assert!(m.error.as_deref().unwrap().contains("exceeds"));
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["phantom"]);
    m.verify(dir.path()).unwrap();
}

#[test]
fn protruding_target_fails_phantom_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(
        dir.path(),
        "[[phantom.targets]]\ncenter = [1.5, 0.0, 0.0]\nradius = 0.3\nheight = 0.1\nconcentration = 1.0\n",
    );
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "phantom", .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stages_run_separately_match_the_pipeline() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let whole = run_pipeline(&small(a.path(), "")).unwrap();
    let cfg = small(b.path(), "");
    let mut parts = Vec::new();
    for stage in Stage::ALL {
        parts.extend(run_stage(stage, &cfg, b.path()).unwrap());
    }
    assert_eq!(parts, whole.artifacts);
}

#[test]
fn per_slice_mode_reconstructs_each_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "");
    cfg.phantom.as_mut().unwrap().height = Some(0.4);
    cfg.phantom.as_mut().unwrap().targets[0].height = 0.4;
    cfg.protocol.slices = vec![-0.15, 0.15];
    cfg.solver.per_slice = true;
    run_pipeline(&cfg).unwrap();
    let v = xlct::io::read_volume(&dir.path().join("xlct_recon.hdr")).unwrap();
    let layer = v.grid.dims[0] * v.grid.dims[1];
    let sums: Vec<f64> = v.values.chunks(layer).map(|l| l.iter().sum()).collect();
    assert_eq!(sums.len(), 4);
    assert!(sums[0] > 0.0 && sums[3] > 0.0);
    assert_eq!(sums[1], 0.0);
    assert_eq!(sums[2], 0.0);

    cfg.protocol.slices = vec![0.1, 0.11];
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }));
    assert_eq!(err.exit_code(), 2);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xlct"))
}

#[test]
fn cli_runs_pipeline_and_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, SMALL).unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["pipeline", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "11", "--threads", "2"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let m = RunManifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config.seed, 11);
    assert!(String::from_utf8_lossy(&status.stdout).contains("xlct_cnr"));

    let single = dir.path().join("single");
    for sub in ["phantom", "simulate", "recon-xlct", "recon-ct", "metrics"] {
        let s = bin().arg(sub).arg("--config").arg(&cfg_path).arg("--out").arg(&single).args(["--seed", "11"]).output().unwrap().status;
        assert!(s.success(), "{sub}");
    }
    for f in ["counts.u32", "xlct_recon.f32", "ct_recon.f32", "metrics.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(single.join(f)).unwrap(), "{f}");
    }

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{SMALL}\n[detectors]\ncolour = 1\n")).unwrap();
    let s = bin().arg("pipeline").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(s.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&s.stderr).contains("colour"));

    let cap = dir.path().join("cap.toml");
    fs::write(&cap, format!("max_nonzeros = 5\n{SMALL}")).unwrap();
    let s = bin().arg("pipeline").arg("--config").arg(&cap).arg("--out").arg(dir.path().join("cap")).output().unwrap().status;
    assert_eq!(s.code(), Some(3));

    let miss = dir.path().join("miss.toml");
    fs::write(&miss, SMALL.replace("quadrature_q = 3", "quadrature_q = 3\nslices = [5.0]").replace("algorithm = \"mlem\"", "algorithm = \"fista\"")).unwrap();
    let s = bin().arg("pipeline").arg("--config").arg(&miss).arg("--out").arg(dir.path().join("miss")).output().unwrap().status;
    assert_eq!(s.code(), Some(4));

    let s = bin().arg("recon-ct").arg("--config").arg(&cfg_path).arg("--out").arg(dir.path().join("empty")).output().unwrap().status;
    assert_eq!(s.code(), Some(5));
}

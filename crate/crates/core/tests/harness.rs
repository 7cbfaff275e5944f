use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::OnceLock;

use blurattack::attack::blurred_input;
use blurattack::harness::{self, io, Command, ExperimentSpec, SpecOverrides, SweepAxis};
use blurattack::{evaluate, grid, DatasetKind, Error, Network};

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("harness").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn overrides(kind: DatasetKind, model: &Path, out: &Path) -> SpecOverrides {
    SpecOverrides {
        model: Some(model.to_path_buf()),
        out: Some(out.to_path_buf()),
        dataset: Some(kind),
        data_seed: Some(7),
        ..SpecOverrides::default()
    }
}

fn trained(kind: DatasetKind) -> PathBuf {
    static IMAGES: OnceLock<PathBuf> = OnceLock::new();
    static SPIRALS: OnceLock<PathBuf> = OnceLock::new();
    let cell = match kind {
        DatasetKind::Images => &IMAGES,
        DatasetKind::Spirals => &SPIRALS,
    };
    cell.get_or_init(|| {
        let dir = scratch(&format!("model_{kind:?}"));
        let model = dir.join("model.bin");
        let spec = ExperimentSpec::resolve(Command::Train, overrides(kind, &model, &dir.join("out"))).unwrap();
        harness::run_train(&spec).unwrap();
        model
    })
    .clone()
}

fn spec(command: Command, kind: DatasetKind, out: &Path, extra: SpecOverrides) -> ExperimentSpec {
    ExperimentSpec::resolve(command, overrides(kind, &trained(kind), out).overlay(extra)).unwrap()
}

#[test]
fn ps_final_inputs_reevaluate_to_adversarial_label() {
    let out = scratch("ps_consistency");
    let spec = spec(
        Command::Attack,
        DatasetKind::Images,
        &out,
        SpecOverrides {
            max_samples: Some(200),
            ..SpecOverrides::default()
        },
    );
    let run = harness::run_attack(&spec).unwrap();
    assert_eq!(run.records.len(), 200);
    let net = Network::load(&spec.model).unwrap();
    for r in run.records.iter().filter(|r| r.success) {
        let text = fs::read_to_string(out.join("final").join(format!("sample_{:04}.txt", r.sample))).unwrap();
        let x = grid::from_text(&text).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(evaluate(&net, &x).unwrap().0, r.adversarial_label, "sample {}", r.sample);
        assert_ne!(r.adversarial_label, r.label);
    }
    assert_eq!(io::read_results(&out.join("results.jsonl")).unwrap(), run.records);
    assert_eq!(io::read_attack_summary(&out.join("summary.json")).unwrap(), run.summary);
    let first = &run.records[0];
    let (conf, peak) = io::read_attack_trace(&out.join("traces").join(format!("sample_{:04}.csv", first.sample))).unwrap();
    assert_eq!(conf.len(), first.iterations_used + 1);
    assert_eq!(peak[0], first.initial_peak);
    assert_eq!(*peak.last().unwrap(), first.final_peak);
}

#[test]
fn blur_final_input_is_recomputable_from_sigmas() {
    let out = scratch("blur_recompute");
    let spec = spec(
        Command::Attack,
        DatasetKind::Images,
        &out,
        SpecOverrides {
            mode: Some("blur".parse().unwrap()),
            max_samples: Some(12),
            max_iters: Some(200),
            sigma_init: Some(0.5),
            ..SpecOverrides::default()
        },
    );
    let data = spec.dataset.test_set().unwrap();
    let run = harness::run_attack(&spec).unwrap();
    for r in &run.records {
        let sigmas = r.final_sigmas.as_ref().expect("blur records carry σ");
        let recomputed = blurred_input(&data.samples[r.sample].input, sigmas, spec.attack.kernel_scale, spec.attack.padding).unwrap();
        let text = fs::read_to_string(out.join("final").join(format!("sample_{:04}.txt", r.sample))).unwrap();
        assert_eq!(grid::from_text(&text).unwrap().data(), recomputed.data());
        if !r.success {
            assert_eq!(r.iterations_used, 200);
        }
    }
}

#[test]
fn zero_samples_is_a_vacuous_run() {
    let out = scratch("vacuous");
    let spec = spec(
        Command::Attack,
        DatasetKind::Images,
        &out,
        SpecOverrides {
            max_samples: Some(0),
            ..SpecOverrides::default()
        },
    );
    let run = harness::run_attack(&spec).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(run.summary.attacked, 0);
    assert_eq!(run.summary.error_rate, 0.0);
    assert_eq!(fs::read_to_string(out.join("results.jsonl")).unwrap(), "");
}

#[test]
fn model_dataset_mismatch_is_rejected() {
    let out = scratch("mismatch");
    let o = overrides(DatasetKind::Images, &trained(DatasetKind::Spirals), &out);
    let spec = ExperimentSpec::resolve(Command::Attack, o).unwrap();
    assert!(matches!(harness::run_attack(&spec), Err(Error::Config(_))));
    assert!(!out.join("results.jsonl").exists());
}

#[test]
fn failed_write_leaves_no_partial_file() {
    let dir = scratch("atomic");
    let target = dir.join("occupied");
    fs::create_dir(&target).unwrap();
    assert!(io::write_text(&target, "data").is_err());
    let names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("occupied")]);
    assert!(io::write_text(&dir.join("missing").join("f.txt"), "data").is_err());
    assert!(!dir.join("missing").exists());
}

#[test]
fn sweep_marks_failed_values_and_round_trips() {
    let out = scratch("sweep_failed");
    let spec = spec(
        Command::Sweep,
        DatasetKind::Images,
        &out,
        SpecOverrides {
            mode: Some("blur".parse().unwrap()),
            max_samples: Some(6),
            max_iters: Some(50),
            sweep_axis: Some(SweepAxis::KernelScale),
            sweep_values: Some(vec![3.0, 33.0, 35.0]),
            ..SpecOverrides::default()
        },
    );
    let rows = harness::run_sweep(&spec).unwrap();
    assert!(harness::sweep_failed(&rows));
    assert!(rows[0].stats.is_some());
    assert!(rows[1].stats.is_none() && rows[2].stats.is_none());
    assert_eq!(io::read_sweep(&out.join("sweep.csv")).unwrap(), rows);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with('#'));
    assert!(text.contains("failed"));
}

#[test]
fn manifold_summary_round_trips() {
    let out = scratch("manifold_io");
    let spec = spec(
        Command::Manifold,
        DatasetKind::Spirals,
        &out,
        SpecOverrides {
            max_samples: Some(20),
            ..SpecOverrides::default()
        },
    );
    let studies = harness::run_manifold(&spec).unwrap();
    let rows: Vec<_> = studies.iter().map(|s| s.row.clone()).collect();
    assert_eq!(io::read_manifold_summary(&out.join("manifold_summary.csv")).unwrap(), rows);
    assert_eq!(fs::read_dir(out.join("traces")).unwrap().count(), 20);
}

fn cli() -> Process {
    Process::new(env!("CARGO_BIN_EXE_blurattack"))
}

#[test]
fn cli_trains_and_reports_errors() {
    let dir = scratch("cli");
    let model = dir.join("spirals.bin");
    let status = cli()
        .args(["train", "--dataset", "spirals", "--data-seed", "2"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(dir.join("train"))
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(model.exists() && dir.join("train").join("train_report.json").exists());

    let mismatch = cli()
        .args(["attack", "--dataset", "images"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(dir.join("attack"))
        .output()
        .unwrap();
    assert!(!mismatch.status.success());
    assert!(!String::from_utf8_lossy(&mismatch.stderr).is_empty());

    let images = dir.join("images.bin");
    let trained = cli()
        .args(["train", "--epochs", "2"])
        .arg("--model")
        .arg(&images)
        .arg("--out")
        .arg(dir.join("train_images"))
        .output()
        .unwrap();
    assert!(trained.status.success());
    let sweep = cli()
        .args(["sweep", "--mode", "blur", "--max-samples", "3", "--max-iters", "5"])
        .args(["--axis", "kernel-scale", "--values", "3,33"])
        .arg("--model")
        .arg(&images)
        .arg("--out")
        .arg(dir.join("sweep"))
        .output()
        .unwrap();
    assert!(!sweep.status.success());
    let rows = io::read_sweep(&dir.join("sweep").join("sweep.csv")).unwrap();
    assert!(rows[0].stats.is_some() && rows[1].stats.is_none());

    let rejected = cli()
        .args(["sweep", "--mode", "blur", "--axis", "kernel-scale", "--values", "3,4"])
        .arg("--model")
        .arg(&images)
        .arg("--out")
        .arg(dir.join("rejected"))
        .output()
        .unwrap();
    assert!(!rejected.status.success());
    assert!(!dir.join("rejected").exists());

    let bad = cli().args(["attack", "--padding", "mirror"]).output().unwrap();
    assert!(!bad.status.success());
}

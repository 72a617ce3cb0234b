use std::fs;
use std::path::Path;
use std::process::Command;

use mmseg::cli::{self, RunManifest};
use mmseg::data::nifti::{write_nifti, NiftiImage};
use mmseg::data::{generate_phantoms, list_subjects, load_dataset};
use mmseg::evaluation::parse_report_csv;

const TINY: &str = r#"{"depth":3,"base_width":2,"pathway_width":1,
 "train":{"epochs":1,"batches_per_epoch":1,"batch_size":1,"input_side":44,"checkpoint_every":0},
 "pretrain":{"path_epochs":1,"fusion_epochs":1},"eval_input_side":60}"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["mmseg"];
    argv.extend_from_slice(args);
    cli::main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, subjects: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    assert_eq!(run(&["synth", "--seed", "1", "--subjects", &subjects.to_string(), "--side", "32", "--out", s(&data)]), 0);
    data
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]), 0);
    for sub in ["synth", "ingest", "train", "eval", "visualize", "report", "repro-toy"] {
        assert_eq!(run(&[sub, "--help"]), 0, "{sub}");
    }
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["synth", "--bogus", "1", "--out", "x"]), 2);
    assert_eq!(run(&["train", "--arch", "resnet", "--data", "d", "--out", "o"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn binary_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mmseg"))
        .args(["eval", "--model-dir", s(&dir.path().join("none")), "--data", s(&dir.path().join("missing")), "--out", "r.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "io");

    let help = Command::new(env!("CARGO_BIN_EXE_mmseg")).args(["train", "--help"]).output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for flag in ["--arch", "--pretrain", "--dedicated", "--data", "--fold", "--config", "--preset", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag} undocumented");
    }
    let usage = Command::new(env!("CARGO_BIN_EXE_mmseg")).arg("nope").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn synth_writes_requested_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["synth", "--seed", "1", "--subjects", "20", "--side", "64", "--out", s(&data)]), 0);
    assert_eq!(list_subjects(&data).unwrap().len(), 20);
    let loaded = load_dataset(&data).unwrap();
    assert_eq!(loaded[0].volume.dims, [64; 3]);
}

#[test]
fn ingest_converts_nifti_tree() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    for subject in generate_phantoms(4, 2, 32, 4).unwrap() {
        let id = subject.id().to_string();
        let sd = raw.join(&id);
        fs::create_dir_all(&sd).unwrap();
        for (c, suffix) in ["t1", "t1ce", "t2", "flair"].iter().enumerate() {
            let img = NiftiImage { dims: subject.volume.dims, data: subject.volume.modality(c).to_vec() };
            write_nifti(&sd.join(format!("{id}_{suffix}.nii.gz")), &img).unwrap();
        }
        let seg = NiftiImage { dims: subject.labels.dims, data: subject.labels.labels.iter().map(|&l| l as f32).collect() };
        write_nifti(&sd.join(format!("{id}_seg.nii.gz")), &seg).unwrap();
    }
    let out = dir.path().join("ingested");
    assert_eq!(run(&["ingest", "--root", s(&raw), "--out", s(&out)]), 0);
    let subjects = load_dataset(&out).unwrap();
    assert_eq!(subjects.len(), 2);
    assert_eq!(subjects[0].volume.modality_names, ["T1W", "T1WC", "T2W", "FLAIR"]);
    assert_eq!(run(&["ingest", "--root", s(&raw), "--modalities", "t1", "--out", s(&out)]), 1);
}

#[test]
fn train_then_eval_gives_full_grid_and_manifests_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let runs = dir.path().join("runs");
    let train = ["train", "--arch", "sharedrep", "--pretrain", "--data", s(&data), "--fold", "0", "--preset", "toy", "--config", s(&cfg), "--out", s(&runs)];
    assert_eq!(run(&train), 0);
    let manifest_path = runs.join("sharedrep_pretrained.manifest.json");
    let first: RunManifest = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(first.subcommand, "train");
    assert!(first.data_checksum.is_some());
    assert!(!first.artifacts.is_empty());
    assert!(first.artifacts.keys().any(|k| k.contains("final")));
    assert!(chrono::DateTime::parse_from_rfc3339(&first.started_at).is_ok());

    let replay: Vec<&str> = first.command_line[1..].iter().map(String::as_str).collect();
    assert_eq!(run(&replay), 0);
    let second: RunManifest = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(first.artifacts, second.artifacts);

    let report = dir.path().join("out/fold0.csv");
    let eval = ["eval", "--model-dir", s(&runs), "--data", s(&data), "--fold", "0", "--subsets", "all", "--preset", "toy", "--config", s(&cfg), "--out", s(&report)];
    assert_eq!(run(&eval), 0);
    let text = fs::read_to_string(&report).unwrap();
    let parsed = parse_report_csv(&text, &mmseg::data::default_modality_names()).unwrap();
    assert_eq!(parsed.iter().map(|r| r.rows.len()).sum::<usize>(), 45);
    assert!(dir.path().join("out/fold0.md").exists());
    assert!(dir.path().join("out/fold0.manifest.json").exists());

    // fold 1's test subjects were used to train the fold-0 model
    let leak_out = dir.path().join("leak.csv");
    let leak = ["eval", "--model-dir", s(&runs), "--data", s(&data), "--fold", "1", "--preset", "toy", "--config", s(&cfg), "--out", s(&leak_out)];
    assert_eq!(run(&leak), 1);

    let pooled = dir.path().join("all.md");
    let pooled_csv = dir.path().join("all.csv");
    assert_eq!(run(&["report", "--inputs", s(&report), s(&report), "--out", s(&pooled), "--csv", s(&pooled_csv)]), 0);
    assert!(fs::read_to_string(&pooled).unwrap().contains("pooled"));

    let viz = dir.path().join("viz");
    let model_dir = runs.join("sharedrep_pretrained");
    let visualize = [
        "visualize", "--model-dir", s(&model_dir), "--data", s(&data), "--n-voxels", "100", "--n-patches", "2",
        "--masks", "all,T1W", "--perplexity", "5", "--iterations", "50", "--input-side", "44", "--out", s(&viz),
    ];
    assert_eq!(run(&visualize), 0);
    for f in ["embedding.csv", "predicted_label.png", "true_label.png", "mask_name.png", "meta.json", "manifest.json"] {
        assert!(viz.join(f).exists(), "{f}");
    }
}

#[test]
fn dedicated_training_writes_one_checkpoint_per_subset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let runs = dir.path().join("runs");
    let args = ["train", "--arch", "unet", "--dedicated", "T2W,T1W+FLAIR", "--data", s(&data), "--preset", "toy", "--config", s(&cfg), "--out", s(&runs)];
    assert_eq!(run(&args), 0);
    assert!(runs.join("dedicated/T2W/final/config.json").exists());
    assert!(runs.join("dedicated/T1W+FLAIR/final/config.json").exists());
    let bad = ["train", "--arch", "multipath", "--dedicated", "all", "--data", s(&data), "--out", s(&runs)];
    assert_eq!(run(&bad), 1);
}

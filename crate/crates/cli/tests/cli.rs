use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, id: &str, seed: u64) -> String {
    let out = dir.join(id);
    let o = ecgseg(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--override",
        "n_subjects=6",
        "--override",
        "per_subject=2",
        "--override",
        "template.duration_s=2.0",
        "--override",
        &format!("dataset_id=\"{id}\""),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

const TINY: &str = r#"
ratios = ["1/16"]
algorithms = ["scratch", "mt"]
backbones = ["resnet18_1d"]

[train]
epochs = 2
warmup_epochs = 1
batch_size = 4
unlabeled_batch_size = 4

[preprocess]
window_s = 2.0

[model]
decoder_hidden = 16
resnet_stem_width = 4
resnet_widths = [4, 4]
resnet_blocks = [1, 1]
"#;

fn write_spec(dir: &Path, dataset: &str) -> String {
    let path = dir.join("spec.toml");
    fs::write(&path, format!("datasets = [{dataset:?}]\n{TINY}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_bad_usage() {
    assert_eq!(code(&ecgseg(&["--help"])), 0);
    assert_eq!(code(&ecgseg(&["--version"])), 0);
    assert_eq!(code(&ecgseg(&["fly"])), 1);
    assert_eq!(code(&ecgseg(&["report"])), 1);
    assert_eq!(code(&ecgseg(&["prepare", "--adapter", "nope", "--raw", "a", "--out", "b"])), 1);
}

#[test]
fn invalid_configuration_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "alpha", 1);
    let spec = write_spec(tmp.path(), &data);
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&ecgseg(&["benchmark", "--config", &spec, "--override", "train.bogus=1", "--out", out])), 1);
    assert_eq!(code(&ecgseg(&["benchmark", "--config", &spec, "--override", "ratios=[\"1/3\"]", "--out", out])), 1);
    assert_eq!(code(&ecgseg(&["train", "--config", &spec, "--out", out])), 1);
    let missing = write_spec(&tmp.path().join("."), tmp.path().join("absent").to_str().unwrap());
    assert_eq!(code(&ecgseg(&["benchmark", "--config", &missing, "--out", out])), 1);
    assert!(!tmp.path().join("out/runs").exists());
}

#[test]
fn train_evaluate_benchmark_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "alpha", 1);
    let spec = write_spec(tmp.path(), &data);
    let out = tmp.path().join("sweep");
    let out_s = out.to_str().unwrap();

    let o = ecgseg(&["train", "--config", &spec, "--algorithm", "scratch", "--seed", "3", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let ckpt = runs[0].join("best.ckpt");
    assert!(ckpt.exists());

    let eval_out = tmp.path().join("eval");
    let args = |backbone: &str| {
        vec![
            "evaluate".to_string(),
            "--config".into(),
            spec.clone(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--dataset".into(),
            data.clone(),
            "--backbone".into(),
            backbone.into(),
            "--out".into(),
            eval_out.to_str().unwrap().into(),
        ]
    };
    let a = args("resnet18_1d");
    let o = ecgseg(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mIoU"));
    assert_eq!(
        fs::read(eval_out.join("rows.csv")).unwrap(),
        fs::read(runs[0].join("rows.csv")).unwrap()
    );
    let b = args("vit_tiny_1d");
    assert_eq!(code(&ecgseg(&b.iter().map(String::as_str).collect::<Vec<_>>())), 1);

    let gone = tmp.path().join("gone.ckpt");
    let mut c = args("resnet18_1d");
    c[4] = gone.to_str().unwrap().into();
    assert_eq!(code(&ecgseg(&c.iter().map(String::as_str).collect::<Vec<_>>())), 2);

    let o = ecgseg(&["benchmark", "--config", &spec, "--seeds", "3", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 trained, 1 already complete"));

    let report = tmp.path().join("report");
    let o = ecgseg(&["report", out_s, "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("## In-domain"));
    assert!(report.join("results.csv").exists() && report.join("tables.md").exists());

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&ecgseg(&["report", empty.to_str().unwrap(), "--out", report.to_str().unwrap()])), 1);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("synth_") {
            let defaults = ecgseg::CorpusSpec::new(ecgseg::SynthConfig::default(), 16, 4);
            ecgseg::experiments::layered(&defaults, Some(&path), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            ecgseg::ExperimentSpec::load(Some(&path), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        n += 1;
    }
    assert_eq!(n, 6);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in a second
views = 2
wglim_blocks = 1
height = 16
width = 16
conv_channels = 2
patch = 2
dim = 18
heads = 2
ffn_ratio = 1
epochs = 2
batch_size = 4
n_per_class = 4
split_ratio = 0.5
";

fn wglin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wglin")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_three_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = wglin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["model.wgln", "train_log.csv", "config.resolved"] {
        let (x, y) = (fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file}");
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,train_acc\n"));
    assert_eq!(log.lines().count(), 3);
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("dim = 18") && resolved.contains("d_k = 9"));

    let ckpt = a.join("model.wgln");
    let ckpt = ckpt.to_str().unwrap();
    let first = wglin(&["eval", "--checkpoint", ckpt]);
    assert!(first.status.success(), "{}", stderr(&first));
    let csv = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(csv.starts_with("acc,prec,spec,kappa,f1,auc\n"));
    assert_eq!(csv.lines().filter(|l| !l.is_empty()).count(), 2 + 1 + 5);
    let out = dir.path().join("report.csv");
    let second = wglin(&["eval", "--checkpoint", ckpt, "--data", "synthetic:test", "--out", out.to_str().unwrap()]);
    assert!(second.status.success());
    assert_eq!(fs::read(&out).unwrap(), first.stdout);
}

#[test]
fn damaged_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("run");
    assert!(wglin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let ckpt = out.join("model.wgln");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = wglin(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn mismatched_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("run");
    assert!(wglin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let other = write_config(dir.path(), "other.cfg", &TINY.replace("conv_channels = 2", "conv_channels = 4"));
    let ckpt = out.join("model.wgln");
    let o = wglin(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &other]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let cfg = write_config(dir.path(), "d100.cfg", "dim = 100\nheads = 4\n");
    let o = wglin(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3x3"), "{}", stderr(&o));
    assert!(!Path::new(out).join("model.wgln").exists());

    let cfg = write_config(dir.path(), "unknown.cfg", "seed = 1\n\nlearning_rat = 0.1\n");
    let o = wglin(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = wglin(&["ablate", "--config", &cfg, "--variants", "full,wide", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = wglin(&["train", "--config", dir.path().join("missing.cfg").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}data = {}\n", dir.path().join("nowhere").display());
    let cfg = write_config(dir.path(), "dir.cfg", &text.replace("epochs = 2", "epochs = 1"));
    let o = wglin(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergent_training_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{TINY}learning_rate = 1e300\n"));
    let o = wglin(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn generated_directory_trains_like_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = TINY.replace("epochs = 2", "epochs = 1");
    let cfg = write_config(dir.path(), "tiny.cfg", &tiny);
    let data = dir.path().join("data");
    let o = wglin(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("train/0").is_dir() && data.join("test/4").is_dir());

    let dcfg = write_config(dir.path(), "dir.cfg", &format!("{tiny}data = {}\n", data.display()));
    let run = dir.path().join("run");
    let o = wglin(&["train", "--config", &dcfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("model.wgln");
    let o = wglin(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ablation_defaults_to_all_seven_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("abl");
    let o = wglin(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,acc,prec,spec,kappa,f1");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no-wglim", "no-cvfm", "bc-only", "bt-only", "stage1-only", "stage2-only"]);

    let out2 = dir.path().join("abl2");
    let o = wglin(&["ablate", "--config", &cfg, "--variants", "bc-only,full", "--out", out2.to_str().unwrap()]);
    assert!(o.status.success());
    let two = fs::read_to_string(out2.join("ablation.csv")).unwrap();
    assert_eq!(two.lines().count(), 3);
    // same seed and data stream: rows match the seven-variant run
    for row in two.lines().skip(1) {
        assert!(lines.contains(&row), "{row}");
    }
}

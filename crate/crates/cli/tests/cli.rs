use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[data]
source = "synthetic"

[data.synthetic]
classes = 3
train_per_class = 16
val_per_class = 4
test_per_class = 8
image_size = 16

[train]
epochs = 2
batch_size = 16
schedule = { initial = 0.02, decay = 0.2, milestones = [1] }

[teacher]
depth_blocks = 1
width = 2
num_classes = 3
input_size = 16
base_width = 4

[student]
depth_blocks = 1
width = 1
num_classes = 3
input_size = 16
base_width = 4
"#;

fn spkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    Fixture { _tmp: tmp, root, config }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn train_teacher(f: &Fixture) -> PathBuf {
    let out = f.root.join("teacher");
    ok(&spkd(&["train-teacher", "--config", s(&f.config), "--out", s(&out)]));
    out.join("ckpt_final")
}

fn without_wall_time(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| if l.starts_with('#') { l } else { l.rsplit_once(',').unwrap().0 })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn training_writes_the_output_tree_and_reproduces_from_resolved_config() {
    let f = fixture();
    let teacher = train_teacher(&f);
    let a = f.root.join("a");
    ok(&spkd(&["distill", "--config", s(&f.config), "--teacher", s(&teacher), "--method", "kd+sp", "--gamma", "50", "--out", s(&a)]));
    for file in ["config.resolved", "metrics.csv", "ckpt_best", "ckpt_final"] {
        assert!(a.join(file).exists(), "missing {file}");
    }
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("method = \"kd+sp\""));
    assert!(resolved.contains("gamma = 50.0"));

    let b = f.root.join("b");
    ok(&spkd(&["distill", "--config", s(&a.join("config.resolved")), "--out", s(&b)]));
    assert_eq!(without_wall_time(&a.join("metrics.csv")), without_wall_time(&b.join("metrics.csv")));
    assert_eq!(fs::read(a.join("ckpt_final")).unwrap(), fs::read(b.join("ckpt_final")).unwrap());
    assert_eq!(fs::read(a.join("config.resolved")).unwrap(), fs::read(b.join("config.resolved")).unwrap());
}

#[test]
fn eval_and_exports() {
    let f = fixture();
    let teacher = train_teacher(&f);
    let out = f.root.join("x");
    let o = spkd(&["eval", "--config", s(&f.config), "--checkpoint", s(&teacher), "--out", s(&out)]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("test_error = "));

    ok(&spkd(&[
        "export-gram", "--config", s(&f.config), "--checkpoint", s(&teacher), "--batch-size", "12", "--sort-by-class", "--out", s(&out),
    ]));
    let exports = out.join("exports");
    let csv = fs::read_to_string(exports.join("gram_last_conv_b0_sorted.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().all(|l| l.split(',').count() == 12));
    let pgm = fs::read(exports.join("gram_last_conv_b0_sorted.pgm")).unwrap();
    let header = b"P5\n12 12\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 144);
    assert!(fs::read_to_string(exports.join("gram_last_conv_b0_sorted.scale.txt")).unwrap().starts_with("min = "));
    let labels = fs::read_to_string(exports.join("gram_last_conv_b0_sorted.labels.txt")).unwrap();
    let labels: Vec<usize> = labels.lines().map(|l| l.parse().unwrap()).collect();
    assert!(labels.windows(2).all(|w| w[0] <= w[1]));

    ok(&spkd(&["export-activations", "--config", s(&f.config), "--checkpoint", s(&teacher), "--layer", "stage3.last", "--out", s(&out)]));
    let act = fs::read_to_string(exports.join("activations_stage3_last.csv")).unwrap();
    let header: Vec<&str> = act.lines().next().unwrap().split(',').collect();
    // stage 3 width = base 4 · k 2 · 4
    assert_eq!(header.len(), 1 + 32);
    assert_eq!(act.lines().count(), 1 + 24);

    let bad = spkd(&["export-activations", "--config", s(&f.config), "--checkpoint", s(&teacher), "--layer", "nope", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn lsp_error_export_reports_rows_and_skips() {
    let f = fixture();
    let teacher = train_teacher(&f);
    let run = f.root.join("student");
    ok(&spkd(&["distill", "--config", s(&f.config), "--teacher", s(&teacher), "--out", s(&run)]));
    let out = f.root.join("lsp");
    let table = out.join("exports").join("lsp_error.csv");

    let empty = spkd(&["export-lsp-error", "--config", s(&f.config), "--teacher", s(&teacher), "--out", s(&out)]);
    assert_eq!(empty.status.code(), Some(8));
    assert_eq!(fs::read_to_string(&table).unwrap(), "run,lsp,test_error\n");

    ok(&spkd(&["export-lsp-error", "--config", s(&f.config), "--teacher", s(&teacher), "--out", s(&out), s(&run)]));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 2);

    let missing = f.root.join("missing");
    let partial = spkd(&["export-lsp-error", "--config", s(&f.config), "--teacher", s(&teacher), "--out", s(&out), s(&run), s(&missing)]);
    assert_eq!(partial.status.code(), Some(7));
    assert!(String::from_utf8_lossy(&partial.stderr).contains("missing"));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 2);
}

#[test]
fn gamma_sweep_writes_runs_and_selection() {
    let f = fixture();
    let teacher = train_teacher(&f);
    let out = f.root.join("sweep");
    let o = spkd(&["sweep-gamma", "--config", s(&f.config), "--teacher", s(&teacher), "--gammas", "0,10", "--jobs", "2", "--epochs", "1", "--out", s(&out)]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected gamma = "));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 3);
    assert!(out.join("gamma_10").join("ckpt_final").exists());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let f = fixture();
    let out = f.root.join("o");
    assert_eq!(spkd(&["distill", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(spkd(&["train-teacher", "--config", s(&f.config), "--alpha", "2", "--out", s(&out)]).status.code(), Some(2));

    let cifar = f.root.join("cifar");
    fs::create_dir_all(&cifar).unwrap();
    for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
        fs::write(cifar.join(name), vec![0u8; 3072]).unwrap();
    }
    let bad_data = spkd(&["train-teacher", "--dataset", "cifar10", "--data-dir", s(&cifar), "--out", s(&out)]);
    assert_eq!(bad_data.status.code(), Some(3), "{}", String::from_utf8_lossy(&bad_data.stderr));

    let teacher = train_teacher(&f);
    let numeric = spkd(&["distill", "--config", s(&f.config), "--teacher", s(&teacher), "--gamma", "1e308", "--out", s(&out)]);
    assert_eq!(numeric.status.code(), Some(4), "{}", String::from_utf8_lossy(&numeric.stderr));

    let truncated = f.root.join("trunc");
    let bytes = fs::read(&teacher).unwrap();
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let o = spkd(&["eval", "--config", s(&f.config), "--checkpoint", s(&truncated), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(6));
}

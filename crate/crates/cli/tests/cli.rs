use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
data.depth = 16
data.height = 16
data.width = 16
model.widths = 2,4
train.steps = 5
train.eval_every = 0
saliency.k = 10
saliency.patch = 4
metrics.bins = 16
plot.bins = 8
output.run = tiny
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymaudit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let run_dir = dir.path().join("runs").join("tiny");
    (dir, run_dir)
}

fn pipeline(dir: &Path) {
    for verb in ["synth", "stack", "train"] {
        ok(dir, &[verb, "--config", "tiny.cfg"]);
    }
}

#[test]
fn audit_is_byte_identical_on_rerun() {
    let (dir, run_dir) = setup();
    pipeline(dir.path());
    let args = ["audit", "--config", "tiny.cfg", "--unstable", "--set",
        "saliency.methods=foreground,full_output,foreground100,full_output100,occlusion,gradcampp_channel"];
    ok(dir.path(), &args);
    let names = ["bias.csv", "pairwise.csv", "quality.csv", "audit.json"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(run_dir.join("audit").join(n)).unwrap()).collect();
    ok(dir.path(), &[&args[..], &["--force", "--sequential"]].concat());
    for (n, before) in names.iter().zip(&first) {
        assert_eq!(&fs::read(run_dir.join("audit").join(n)).unwrap(), before, "{n} changed");
    }
    let json = String::from_utf8(first[3].clone()).unwrap();
    assert!(json.contains("\"unstable\""));
}

#[test]
fn golden_csv_headers() {
    let (dir, run_dir) = setup();
    pipeline(dir.path());
    ok(dir.path(), &["surgery", "uniform-green", "--config", "tiny.cfg"]);
    let ug = run_dir.join("surgery-uniform-green");
    let model_args = format!("random={}", run_dir.join("checkpoint").display());
    let ug_args = format!("uniform-green={}", ug.display());
    ok(dir.path(), &["audit", "--config", "tiny.cfg", "--model", &model_args, "--model", &ug_args]);
    let read = |n: &str| fs::read_to_string(run_dir.join("audit").join(n)).unwrap();
    let bias = read("bias.csv");
    assert_eq!(
        bias.lines().next().unwrap(),
        "pretrain,foreground_swd,foreground_fwd,full_output_swd,full_output_fwd,\
foreground100_swd,foreground100_fwd,full_output100_swd,full_output100_fwd,\
occlusion_swd,occlusion_fwd,best,worst"
    );
    assert_eq!(bias.lines().count(), 3);
    assert!(bias.lines().nth(2).unwrap().starts_with("uniform-green,"));
    assert_eq!(read("pairwise.csv").lines().next().unwrap(), "pretrain,method,metric,i,j,value");
    assert_eq!(
        read("quality.csv").lines().next().unwrap(),
        "pretrain,dice,dice_se,iou,iou_se,precision,precision_se,recall,recall_se,\
accuracy,accuracy_se,n_images,se_basis,best,worst"
    );
    assert_eq!(
        fs::read_to_string(run_dir.join("history.csv")).unwrap().lines().next().unwrap(),
        "step,train_loss,val_dice"
    );
}

#[test]
fn refuses_overwrite_without_force() {
    let (dir, _) = setup();
    ok(dir.path(), &["synth", "--config", "tiny.cfg"]);
    let again = run(dir.path(), &["synth", "--config", "tiny.cfg"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(dir.path(), &["synth", "--config", "tiny.cfg", "--force"]);
}

#[test]
fn synth_is_deterministic_and_honors_extents() {
    let (dir, run_dir) = setup();
    ok(dir.path(), &["synth", "--config", "tiny.cfg", "--set", "data.depth=20"]);
    let img = run_dir.join("volume").join("image.ntf");
    let a = fs::read(&img).unwrap();
    // 4 magic + dtype + ndim + 3 extents + 20·16·16 f32 values
    assert_eq!(a.len(), 6 + 24 + 4 * 20 * 16 * 16);
    ok(dir.path(), &["synth", "--config", "tiny.cfg", "--set", "data.depth=20", "--force"]);
    assert_eq!(fs::read(&img).unwrap(), a);
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let bad_key = run(dir.path(), &["synth", "--config", "tiny.cfg", "--set", "train.stepz=3"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let missing = run(dir.path(), &["train", "--config", "tiny.cfg"]);
    assert_eq!(missing.status.code(), Some(3));
    ok(dir.path(), &["synth", "--config", "tiny.cfg"]);
    ok(dir.path(), &["stack", "--config", "tiny.cfg"]);
    let diverge = run(dir.path(), &["train", "--config", "tiny.cfg", "--set", "train.lr=1e30"]);
    assert_eq!(diverge.status.code(), Some(4));
    let usage = run(dir.path(), &["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn surgery_uniform_green_is_idempotent() {
    let (dir, run_dir) = setup();
    pipeline(dir.path());
    ok(dir.path(), &["surgery", "uniform-green", "--config", "tiny.cfg"]);
    let once = run_dir.join("surgery-uniform-green");
    let twice = run_dir.join("twice");
    ok(dir.path(), &[
        "surgery", "uniform-green", "--config", "tiny.cfg",
        "--checkpoint", once.to_str().unwrap(), "--out", twice.to_str().unwrap(),
    ]);
    let w = |d: &Path| fs::read(d.join("enc0.conv1.weight.ntf")).unwrap();
    assert_eq!(w(&once), w(&twice));
    assert_ne!(w(&once), w(&run_dir.join("checkpoint")));
    let bad = run(dir.path(), &["surgery", "uniform-purple", "--config", "tiny.cfg", "--force"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn saliency_and_plots() {
    let (dir, run_dir) = setup();
    pipeline(dir.path());
    ok(dir.path(), &["saliency", "--config", "tiny.cfg", "--set", "saliency.methods=foreground,occlusion"]);
    let fg = run_dir.join("saliency").join("foreground");
    let maps: Vec<_> = fs::read_dir(&fg).unwrap().collect();
    assert!(!maps.is_empty());
    ok(dir.path(), &["audit", "--config", "tiny.cfg", "--set", "saliency.methods=foreground,occlusion"]);
    ok(dir.path(), &["plot", "--config", "tiny.cfg"]);
    let plots = run_dir.join("plots");
    let svg = fs::read_to_string(plots.join("foreground-profile.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"series\"").count(), 3);
    assert!(plots.join("occlusion-hist.svg").is_file());
    assert!(plots.join("bias-random.svg").is_file());
    let metrics_before = fs::read(run_dir.join("audit").join("bias.csv")).unwrap();
    ok(dir.path(), &["plot", "--config", "tiny.cfg", "--force", "--set", "plot.equalize=true"]);
    let svg_eq = fs::read_to_string(plots.join("foreground-profile.svg")).unwrap();
    assert_ne!(svg, svg_eq);
    assert_eq!(fs::read(run_dir.join("audit").join("bias.csv")).unwrap(), metrics_before);
}

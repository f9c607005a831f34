use std::path::Path;
use std::process::{Command, Output};

use rescbam::attention::AttentionVariant;
use rescbam::model::{build_model, save_weights, ModelSpec};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rescbam"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn untrained(dir: &Path, name: &str, nc: usize, attention: AttentionVariant) {
    let m = build_model::<f32>(&ModelSpec::nano(nc, attention), 0).unwrap();
    save_weights(&m, &dir.join(name)).unwrap();
}

#[test]
fn generate_train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = run(d, &["gen-data", "--out", "ds", "--n", "12", "--classes", "2", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(d.join("ds/split.txt").exists() && d.join("ds/classes.txt").exists());

    std::fs::write(d.join("cfg.txt"), "num_classes = 2\nepochs = 1\nbatch_size = 4\n").unwrap();
    let o = run(
        d,
        &["train", "--config", "cfg.txt", "--data", "ds", "--out", "run", "--epochs", "2", "--seed=9"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("run/train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch    1  lr 0.010000  bce "));
    let cfg = std::fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(cfg.contains("epochs = 2\n") && cfg.contains("seed = 9\n") && cfg.contains("batch_size = 4\n"));
    for f in ["best.rcbm", "last.rcbm", "split.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    // Same seed and config reproduce the log exactly.
    let o = run(
        d,
        &["train", "--config", "cfg.txt", "--data", "ds", "--out", "run2", "--epochs", "2", "--seed=9"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(d.join("run2/train_log.txt")).unwrap(), log);

    let o = run(d, &["eval", "--weights", "run/last.rcbm", "--data", "ds", "--split", "train", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for key in ["map50 ", "map5095 ", "f1 ", "params ", "flops ", "inference_ms "] {
        assert!(out.lines().any(|l| l.starts_with(key)), "missing {key} in {out}");
    }
    let csv = std::fs::read_to_string(d.join("ev/pr_curves.csv")).unwrap();
    assert!(csv.starts_with("class,recall,precision\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').skip(1).all(|v| v.split('.').nth(1).map(str::len) == Some(6))));
    assert!(std::fs::read_to_string(d.join("ev/report.kv")).unwrap().contains("map50 = "));

    let o = run(
        d,
        &["predict", "--weights", "run/last.rcbm", "--image", "ds/images/synth_00000.ppm", "--conf", "0.01", "--draw", "boxes.ppm"],
    );
    assert_eq!(code(&o), 0);
    let confs: Vec<f64> = stdout(&o)
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.rsplitn(6, ' ').collect();
            let coords: Vec<f64> = f[..4].iter().map(|v| v.parse().unwrap()).collect();
            assert!(coords.iter().all(|c| (0.0..=64.0).contains(c)), "{l}");
            f[4].parse().unwrap()
        })
        .collect();
    assert!(confs.windows(2).all(|w| w[0] >= w[1]));
    assert!(d.join("boxes.ppm").exists());
}

#[test]
fn blank_image_untrained_model_predicts_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    untrained(d, "w.rcbm", 2, AttentionVariant::ResCbam);
    let mut blank = b"P6\n64 64\n255\n".to_vec();
    blank.extend(std::iter::repeat(0u8).take(64 * 64 * 3));
    std::fs::write(d.join("blank.ppm"), blank).unwrap();
    let o = run(d, &["predict", "--weights", "w.rcbm", "--image", "blank.ppm", "--conf", "0.99"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["train", "--synthetic", "2", "--bogus_key", "1"])), 1);
    assert_eq!(code(&run(d, &["train", "--synthetic", "2", "--input_size", "50"])), 1);
    assert_eq!(code(&run(d, &["gradcheck", "--scope", "everything"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);

    untrained(d, "w2.rcbm", 2, AttentionVariant::None);
    assert_eq!(code(&run(d, &["predict", "--weights", "w2.rcbm", "--image", "missing.ppm"])), 2);
    assert_eq!(code(&run(d, &["eval", "--weights", "missing.rcbm", "--data", "ds"])), 2);

    // One image: everything lands in train, the test split is empty.
    assert_eq!(code(&run(d, &["gen-data", "--out", "one", "--n", "1"])), 0);
    let o = run(d, &["eval", "--weights", "w2.rcbm", "--data", "one"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no samples"));

    // Three classes on disk, two in the model.
    assert_eq!(code(&run(d, &["gen-data", "--out", "three", "--n", "4", "--classes", "3"])), 0);
    let o = run(d, &["eval", "--weights", "w2.rcbm", "--data", "three", "--split", "all"]);
    assert_eq!(code(&o), 2);

    // Initial weights that disagree with the config.
    let o = run(d, &["train", "--synthetic", "4", "--init", "w2.rcbm", "--num_classes", "3", "--epochs", "1"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_reports_more_params_with_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(d, &["gen-data", "--out", "ds", "--n", "3"])), 0);
    let mut params = Vec::new();
    for (name, a) in [("none", AttentionVariant::None), ("rescbam", AttentionVariant::ResCbam)] {
        let file = format!("{name}.rcbm");
        untrained(d, &file, 2, a);
        let o = run(d, &["eval", "--weights", &file, "--data", "ds", "--split", "all", "--out", name]);
        assert_eq!(code(&o), 0);
        let line = stdout(&o).lines().find(|l| l.starts_with("params ")).unwrap().to_string();
        params.push(line[7..].parse::<usize>().unwrap());
    }
    assert!(params[1] > params[0], "{params:?}");
}

#[test]
fn gradcheck_op_scope_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gradcheck", "--scope", "op"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("max_rel_err") && out.contains("conv2d") && out.contains("all 36 checks passed"));
}

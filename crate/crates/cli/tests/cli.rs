use std::path::Path;
use std::process::{Command, Output};

fn ecrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecrf")).args(args).env_remove("ECRF_THREADS").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value(out: &str, key: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with(&format!("{key}="))).unwrap_or_else(|| panic!("{key} missing in\n{out}"));
    line[key.len() + 1..].parse().unwrap()
}

const SMALL_NET: [&str; 8] = [
    "--set",
    "conv_channels=4,6",
    "--set",
    "conv_kernels=3,3",
    "--set",
    "conv_strides=2,2",
    "--set",
    "window=2",
];

#[test]
fn gen_train_eval_bcwc_crf_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(ecrf(&["gen-data", "--out", p(&data), "--num-images", "4", "--size", "32", "--classes", "4", "--seed", "3"]));
    assert!(data.join("image_0003.png").exists() && data.join("label_0003.png").exists());

    for mode in ["baseline", "joint", "ecrf"] {
        let ckpt = dir.path().join(format!("{mode}.ckpt"));
        let log = dir.path().join(format!("{mode}.csv"));
        let mut args = vec!["train", "--data", p(&data), "--out", p(&ckpt), "--mode", mode, "--iters", "3", "--batch", "2"];
        args.extend(["--log", p(&log), "--set", "sp_blocks=8"]);
        args.extend(SMALL_NET);
        let out = ok(ecrf(&args));
        assert!(out.contains(&format!("# mode={mode}")), "config echo missing:\n{out}");
        assert!(value(&out, "final_loss").is_finite());
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

        let out = ok(ecrf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]));
        let miou = value(&out, "miou");
        assert!((0.0..=1.0).contains(&miou));
    }

    let ckpt = dir.path().join("baseline.ckpt");
    let csv = dir.path().join("bcwc.csv");
    let svg = dir.path().join("bcwc.svg");
    ok(ecrf(&["bcwc", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&csv), "--svg", p(&svg)]));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("adjacency_rank,class,partner,count,similarity"));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));

    for mode in ["vanilla", "joint"] {
        let out = ok(ecrf(&["crf", "--checkpoint", p(&ckpt), "--data", p(&data), "--mode", mode, "--steps", "2", "--window", "2"]));
        assert!((0.0..=1.0).contains(&value(&out, "crf_miou")));
    }
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(ecrf(&["gen-data", "--out", p(&data), "--num-images", "2", "--size", "32", "--classes", "3"]));
    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let mut args = vec!["train", "--data", p(&data), "--out", p(&ckpt), "--mode", "ecrf", "--iters", "2", "--seed", "5"];
        args.extend(["--set", "sp_blocks=8"]);
        args.extend(SMALL_NET);
        ok(ecrf(&args));
        std::fs::read(ckpt).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
}

#[test]
fn superpixel_command_writes_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(ecrf(&["gen-data", "--out", p(&data), "--num-images", "1", "--size", "48", "--classes", "3"]));
    let out_path = dir.path().join("sp.png");
    let out = ok(ecrf(&["superpixel", "--image", p(&data.join("image_0000.png")), "--blocks", "9", "--out", p(&out_path)]));
    let blocks = value(&out, "block_count");
    assert!((1.0..=18.0).contains(&blocks));
    assert!(out_path.exists());
}

#[test]
fn verification_commands_pass() {
    let out = ok(ecrf(&["gradcheck", "--seeds", "5"]));
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("angles.csv");
    ok(ecrf(&["angles", "--sweep", "5", "--out", p(&csv)]));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6);
    let out = ok(ecrf(&["bench", "--sizes", "4,8"]));
    assert!(out.starts_with("op,size,seconds,cells_per_second"));
    assert_eq!(out.lines().count(), 1 + 2 * 6);
}

#[test]
fn exit_codes() {
    assert_eq!(ecrf(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(ecrf(&["gradcheck", "--seeds", "0"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let data = dir.path().join("data");
    ok(ecrf(&["gen-data", "--out", p(&data), "--num-images", "1", "--size", "32", "--classes", "3"]));
    assert_eq!(ecrf(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]).status.code(), Some(3));
    let ckpt = dir.path().join("x.ckpt");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&ckpt), "--iters", "1"];
    args.extend(SMALL_NET);
    ok(ecrf(&args));
    let missing = dir.path().join("nowhere");
    assert_eq!(ecrf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&missing)]).status.code(), Some(3));
    let o = ecrf(&["train", "--data", p(&data), "--out", p(&ckpt), "--set", "lr0=-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ecrf(&["train", "--data", p(&data), "--out", p(&ckpt), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(3));
}

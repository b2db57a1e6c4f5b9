use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use np_robust::bottleneck::EmbeddingTable;
use np_robust::checkpoint::{Checkpoint, ModelTag};
use np_robust::config::KeyValues;
use np_robust::data::load_idx;
use np_robust::network::{BottleneckKind, Network, NetworkSpec};
use np_robust::tensor::Tensor;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("np-robust-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(out: &Path, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_np-robust"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} exited with {:?}", o.status.code());
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes blobs and returns the data directory.
fn blobs(dir: &Path, kind: &str, n: &str, test_n: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&data, &["synth", "--kind", kind, "--n", n, "--test-n", test_n, "--noise", "0.1"]);
    data
}

const QUICK: [&str; 8] = ["--epochs", "2", "--encoder-warmup-epochs", "1", "--init-epochs", "5", "--lr", "0.01"];

fn train(dir: &Path, data: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data)];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    run(dir, &args)
}

fn without_clock(kv: &KeyValues) -> Vec<(String, String)> {
    kv.iter()
        .filter(|(k, _)| *k != "wall_clock_secs")
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn np_table_holds_every_training_point() {
    let dir = scratch("np-size");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "300", "60");
    assert!(train(&dir, &data, &["--bottleneck", "np", "--dim", "2", "--subset", "120"]).status.success());
    let ck = Checkpoint::load(&dir.join("np2")).unwrap();
    assert_eq!(ck.tag, ModelTag::Np);
    assert_eq!(ck.network.table().unwrap().len(), 120);
    assert_eq!(ck.table_labels.as_ref().map(Vec::len), Some(120));
    let loss = std::fs::read_to_string(dir.join("np2-loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,L_C,L_G,L_full\n"));
    assert_eq!(loss.lines().count(), 3);
    assert!(dir.join("np2-graph.edges").exists());
    let m = KeyValues::read(&dir.join("train-run.manifest")).unwrap();
    assert_eq!(m.get("command"), Some("train"));
    assert_eq!(m.get("config.samples"), Some("120"));
    assert_eq!(m.get("config.adv_eps"), Some("none"));
}

#[test]
fn fc_bottleneck_is_a_dense_map_from_features_to_dim() {
    let dir = scratch("fc-shape");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "150", "30");
    assert!(train(&dir, &data, &["--bottleneck", "fc", "--dim", "16"]).status.success());
    let ck = Checkpoint::load(&dir.join("fc16")).unwrap();
    assert_eq!(ck.tag, ModelTag::Fc);
    let np_robust::network::Bottleneck::Dense(d) = &ck.network.bottleneck else {
        panic!("expected a dense bottleneck");
    };
    // stored as out x in
    assert_eq!(d.params()[0].shape(), &[16, 6]);
    assert_eq!(d.params()[1].shape(), &[16]);
}

#[test]
fn reruns_reproduce_every_output() {
    let dir = scratch("rerun");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "150", "30");
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        assert!(train(out, &data, &["--seed", "7", "--dim", "2"]).status.success());
        ok(out, &["--seed", "7", "eval", "--data", s(&data), "--model", s(&out.join("np2")), "--eps", "0,0.05"]);
    }
    for f in ["np2-loss.csv", "np2.bin", "np2.manifest", "np2-eval.csv", "np2-graph.edges"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    for m in ["train-run.manifest", "eval-run.manifest"] {
        let ka = KeyValues::read(&a.join(m)).unwrap();
        let kb = KeyValues::read(&b.join(m)).unwrap();
        let differs = |k: &str| k.starts_with("checkpoint.") || k.starts_with("output.") || k == "config.model";
        let strip = |kv: &KeyValues| -> Vec<_> { without_clock(kv).into_iter().filter(|(k, _)| !differs(k)).collect() };
        assert_eq!(strip(&ka), strip(&kb), "{m}");
    }
}

#[test]
fn adversarial_budget_without_steps_is_a_usage_error() {
    let dir = scratch("usage");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "60", "30");
    let o = train(&dir, &data, &["--dim", "2", "--adv-eps", "0.1", "--steps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = train(&dir, &data, &["--dim", "2", "--steps", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.join("np2.manifest").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = scratch("config");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "60", "30");
    let cfg = dir.join("train.cfg");
    std::fs::write(&cfg, "alpha=0.5\nbatch=16\nepochs=9\n").unwrap();
    let mut args = vec!["--config", s(&cfg), "train", "--data", s(&data), "--dim", "2"];
    args.extend_from_slice(&QUICK);
    ok(&dir, &args);
    let m = KeyValues::read(&dir.join("train-run.manifest")).unwrap();
    assert_eq!(m.get("config.alpha"), Some("0.5"));
    assert_eq!(m.get("config.batch"), Some("16"));
    assert_eq!(m.get("config.epochs"), Some("2"));

    std::fs::write(&cfg, "learning_rate=0.1\n").unwrap();
    let o = run(&dir, &["--config", s(&cfg), "train", "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_uses_the_default_grid_and_matches_clean_accuracy() {
    let dir = scratch("eval");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "150", "45");
    assert!(train(&dir, &data, &["--bottleneck", "fc", "--dim", "4"]).status.success());
    let model = dir.join("fc4");
    ok(&dir, &["eval", "--data", s(&data), "--model", s(&model)]);
    let csv = std::fs::read_to_string(dir.join("fc4-eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "eps,model,accuracy,n");
    let eps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(eps, ["0", "0.01", "0.05", "0.1", "0.2"]);

    let stdout = ok(&dir, &["eval", "--data", s(&data), "--model", s(&model), "--eps", "0"]);
    let fields: Vec<&str> = stdout.trim().split(',').collect();
    assert_eq!(fields[1], "FC4");
    assert_eq!(fields[3], "45");
    let test = load_idx(&data.join("t10k-images-idx3-ubyte"), &data.join("t10k-labels-idx1-ubyte")).unwrap();
    let ck = Checkpoint::load(&model).unwrap();
    let want = ck.network.accuracy(&test.images, &test.labels).unwrap();
    assert_eq!(fields[2], format!("{want:.6}"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = scratch("missing");
    let data = blobs(&dir, "gaussian_blobs(2,3)", "20", "10");
    let o = run(&dir, &["eval", "--data", s(&data), "--model", s(&dir.join("nothing"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn attack_output_stays_inside_the_budget() {
    let dir = scratch("attack");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "150", "30");
    assert!(train(&dir, &data, &["--bottleneck", "np", "--dim", "2"]).status.success());
    let out = ok(&dir, &["attack", "--data", s(&data), "--model", s(&dir.join("np2")), "--eps", "0.05", "--steps", "10", "--random-start"]);
    assert!(out.starts_with("0.05,NP2,"));
    let clean = load_idx(&data.join("t10k-images-idx3-ubyte"), &data.join("t10k-labels-idx1-ubyte")).unwrap();
    let adv = load_idx(&dir.join("np2-adv-eps0.05-images-idx3-ubyte"), &dir.join("np2-adv-eps0.05-labels-idx1-ubyte")).unwrap();
    assert_eq!(adv.labels, clean.labels);
    assert!(clean.images.max_abs_diff(&adv.images) <= 0.05 + 1e-9);
    assert!(adv.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let m = KeyValues::read(&dir.join("attack-run.manifest")).unwrap();
    assert_eq!(m.get("config.alpha"), Some("0.005"));
    assert_eq!(m.get("config.random_start"), Some("true"));
}

#[test]
fn default_compression_keeps_a_hundred_references_per_class() {
    let dir = scratch("compress");
    let data = blobs(&dir, "gaussian_blobs(10,4)", "1100", "50");
    assert!(train(&dir, &data, &["--bottleneck", "np", "--dim", "2"]).status.success());
    ok(&dir, &["compress", "--model", s(&dir.join("np2"))]);
    let ck = Checkpoint::load(&dir.join("np2-ref")).unwrap();
    assert_eq!(ck.tag, ModelTag::Ref);
    assert_eq!(ck.network.table().unwrap().len(), 1000);
    let labels = ck.table_labels.unwrap();
    for c in 0..10 {
        assert_eq!(labels.iter().filter(|&&l| l == c).count(), 100);
    }
}

#[test]
fn one_cluster_per_point_changes_nothing() {
    let dir = scratch("lossless");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "120", "30");
    // a stratified subset of 60 leaves 20 points per class
    assert!(train(&dir, &data, &["--bottleneck", "np", "--dim", "2", "--subset", "60"]).status.success());
    ok(&dir, &["compress", "--model", s(&dir.join("np2")), "--clusters-per-class", "20"]);
    let full = ok(&dir, &["eval", "--data", s(&data), "--model", s(&dir.join("np2")), "--eps", "0"]);
    let small = ok(&dir, &["eval", "--data", s(&data), "--model", s(&dir.join("np2-ref")), "--eps", "0"]);
    let acc = |line: &str| line.trim().split(',').nth(2).unwrap().to_string();
    assert_eq!(acc(&full), acc(&small));
}

#[test]
fn fc_checkpoints_cannot_be_compressed() {
    let dir = scratch("compress-fc");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "60", "30");
    assert!(train(&dir, &data, &["--bottleneck", "fc", "--dim", "2"]).status.success());
    let o = run(&dir, &["compress", "--model", s(&dir.join("fc2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.join("fc2-ref.manifest").exists());
}

#[test]
fn synthetic_weight_check_holds_for_every_seed() {
    let dir = scratch("analyze-fc");
    let out = ok(&dir, &["analyze", "--synthetic-fc", "20"]);
    assert!(out.contains("FC trials holding the bound: 20/20"), "{out}");
    let trials = std::fs::read_to_string(dir.join("analyze-fc-trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 21);
    assert!(trials.lines().skip(1).all(|l| l.ends_with(",0")));
    let m = KeyValues::read(&dir.join("analyze-run.manifest")).unwrap();
    assert_eq!(m.get("config.fc_p"), Some("100"));
}

#[test]
fn zero_table_has_a_zero_bound_and_no_violations() {
    let dir = scratch("analyze-np");
    let data = blobs(&dir, "gaussian_blobs(2,4)", "40", "20");
    let train = load_idx(&data.join("train-images-idx3-ubyte"), &data.join("train-labels-idx1-ubyte")).unwrap();
    let low = Tensor::zeros(&[train.len(), 2]);
    let table = EmbeddingTable::new(train.flat(), low, 15).unwrap();
    let spec = NetworkSpec::vector(4, 2, BottleneckKind::NeighborPreserving(2));
    let net = Network::new(spec, Some(table), 0).unwrap();
    let stem = dir.join("constant");
    Checkpoint::new(net).save(&stem).unwrap();

    let out = ok(&dir, &["analyze", "--data", s(&data), "--model", s(&stem), "--points", "10", "--dirs", "20", "--synthetic-fc", "1"]);
    assert!(out.contains("violations = 0"));
    assert!(out.contains("T1 / T2 = 0"), "{out}");
    let csv = KeyValues::parse(
        &std::fs::read_to_string(dir.join("analyze-np.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| l.starts_with("T1,") || l.starts_with("violations,"))
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{}={}", f[0], f[3])
            })
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    assert_eq!(csv.parsed::<f64>("T1").unwrap(), Some(0.0));
    assert_eq!(csv.parsed::<f64>("violations").unwrap(), Some(0.0));
}

#[test]
fn init_embed_writes_one_row_per_point() {
    let dir = scratch("init-embed");
    let data = blobs(&dir, "gaussian_blobs(3,6)", "90", "30");
    ok(&dir, &["init-embed", "--data", s(&data), "--dim", "3", "--init-epochs", "10"]);
    let csv = std::fs::read_to_string(dir.join("init-embed.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,label,y0,y1,y2"));
    assert_eq!(lines.count(), 90);
    assert!(dir.join("init-embed.edges").exists());
}

#[test]
fn synth_splits_share_one_draw() {
    let dir = scratch("synth");
    let data = blobs(&dir, "two_moons", "80", "20");
    let train = load_idx(&data.join("train-images-idx3-ubyte"), &data.join("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(&data.join("t10k-images-idx3-ubyte"), &data.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!((train.len(), test.len()), (80, 20));
    assert_eq!(train.images.shape(), &[80, 1, 1, 2]);
    assert_eq!(test.classes, 2);
    let m = KeyValues::read(&data.join("synth-run.manifest")).unwrap();
    assert_eq!(m.get("config.kind"), Some("two_moons"));
    assert!(m.get("dataset.train").is_some() && m.get("dataset.t10k").is_some());
}

#[test]
fn unknown_synthetic_kind_is_a_usage_error() {
    let dir = scratch("synth-bad");
    let o = run(&dir, &["synth", "--kind", "spirals"]);
    assert_eq!(o.status.code(), Some(2));
}

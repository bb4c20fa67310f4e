use std::path::Path;
use std::process::{Command, Output};

use changenet::data::{self, GenConfig};
use changenet::ddr::{DdrVariant, NormConfig};
use changenet::network::{NetConfig, SdNetwork};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_changenet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_DATA: &str = r#"{"train": 4, "val": 2, "test": 2, "seed": 5,
    "generator": {"size": 32, "num_shapes": 3}}"#;

fn tiny_train_config(extra: &str) -> String {
    format!(
        r#"{{"width": "tiny", "batch_size": 2, "epochs": 1, {extra}
            "synthetic": {SMALL_DATA}}}"#
    )
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["eval", "--bogus"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    let o = run(&["stylize", "--xa", "a", "--xb", "b", "--mode", "sideways", "--out-dir", "x"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = run(&["eval", "--checkpoint", p(&missing), "--manifest", p(&missing)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, SMALL_DATA).unwrap();
    let out = dir.path().join("data");
    assert_eq!(code(&run(&["gen-data", "--config", p(&cfg), "--out", p(&out)])), 0);
    for (split, n) in [("train", 4), ("val", 2), ("test", 2)] {
        let entries = data::read_manifest(&out.join(format!("{split}.tsv"))).unwrap();
        assert_eq!(entries.len(), n);
        let pair = data::load_pair(&entries[0]).unwrap();
        assert_eq!(pair.xa.shape(), &[3, 32, 32]);
    }
}

#[test]
fn train_with_zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, tiny_train_config(r#""epochs": 0,"#).replace(r#""epochs": 1,"#, "")).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    SdNetwork::<f32>::load(&out.join("init.ckpt")).unwrap();
    assert!(!out.join("last.ckpt").exists());
}

#[test]
fn train_then_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, tiny_train_config(r#""ddr_variant": "gln","#)).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("best.ckpt");
    assert!(ckpt.exists() && out.join("history.json").exists());

    let samples = data::generate_dataset(&GenConfig { size: 32, ..GenConfig::default() }, 2, 9).unwrap();
    let manifest = data::write_split(dir.path(), "eval", &samples).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let total: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| report[k].as_u64().unwrap()).sum();
    assert_eq!(total, 2 * 32 * 32);

    let map = dir.path().join("p.pgm");
    let e = &data::read_manifest(&manifest).unwrap()[0];
    let o = run(&["infer", "--checkpoint", p(&ckpt), "--xa", p(&e.xa), "--xb", p(&e.xb), "--out", p(&map)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data::read_image(&map).unwrap().shape(), &[1, 32, 32]);
}

#[test]
fn eval_on_perfect_predictions_reports_f1_one() {
    let dir = tempfile::tempdir().unwrap();
    let norm = NormConfig { variant: DdrVariant::Gln, ..NormConfig::default() };
    let mut net = SdNetwork::<f32>::new(NetConfig::tiny(norm), 0).unwrap();
    let slot = net.head_bias_slot();
    net.params.tensor_mut(slot).data_mut()[0] = -50.0;
    let ckpt = dir.path().join("neg.ckpt");
    net.save(&ckpt).unwrap();

    let mut samples = data::generate_dataset(&GenConfig { size: 32, ..GenConfig::default() }, 2, 3).unwrap();
    for s in &mut samples {
        s.xb = s.xa.clone();
        s.mask = changenet::Tensor::zeros(s.mask.shape());
    }
    let manifest = data::write_split(dir.path(), "same", &samples).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--threshold", "0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["f1"].as_f64(), Some(1.0));
    assert_eq!(report["oa"].as_f64(), Some(1.0));
}

#[test]
fn stylize_bst_twice_restores_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    // Mid-range pair with a mild style gap.
    let mut state = 7u64;
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let xa = changenet::Tensor::from_fn(&[3, 64, 64], |_| 0.3 + 0.4 * next());
    let xb = changenet::Tensor::from_fn(&[3, 64, 64], |i| 0.9 * xa.data()[i] + 0.02 + 0.05 * next());
    let e = data::ManifestEntry { xa: dir.path().join("a.ppm"), xb: dir.path().join("b.ppm"), mask: dir.path().join("m") };
    data::write_image(&e.xa, &xa).unwrap();
    data::write_image(&e.xb, &xb).unwrap();
    let once = dir.path().join("once");
    let twice = dir.path().join("twice");
    let o = run(&["stylize", "--xa", p(&e.xa), "--xb", p(&e.xb), "--mode", "bst", "--lambda-prime", "8",
        "--seed", "1", "--out-dir", p(&once)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["stylize", "--xa", p(&once.join("xa.ppm")), "--xb", p(&once.join("xb.ppm")), "--mode", "bst",
        "--out-dir", p(&twice)]);
    assert_eq!(code(&o), 0);
    let side = std::fs::read_to_string(once.join("stylize.txt")).unwrap();
    assert_eq!(side.trim(), "mode=bst donor=none");
    for (orig, back) in [(&e.xa, "xa.ppm"), (&e.xb, "xb.ppm")] {
        let a = data::read_image(orig).unwrap();
        let b = data::read_image(&twice.join(back)).unwrap();
        let d = a.max_abs_diff(&b);
        assert!(d <= 1.0 / 255.0 + 1e-9, "{back}: {d}");
    }
}

#[test]
fn stylize_ibst_needs_and_records_donor() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::generate_dataset(&GenConfig { size: 32, ..GenConfig::default() }, 2, 4).unwrap();
    let m = data::read_manifest(&data::write_split(dir.path(), "s", &samples).unwrap()).unwrap();
    let out = dir.path().join("o");
    let base = ["stylize", "--xa", p(&m[0].xa), "--xb", p(&m[0].xb), "--mode", "ibst", "--out-dir", p(&out)];
    assert_eq!(code(&run(&base)), 1);
    let mut args = base.to_vec();
    args.extend(["--xc", p(&m[1].xa), "--xd", p(&m[1].xb)]);
    assert_eq!(code(&run(&args)), 0);
    let side = std::fs::read_to_string(out.join("stylize.txt")).unwrap();
    assert_eq!(side.trim(), "mode=ibst donor=1");
}

#[test]
fn style_stats_csv_has_a_row_per_region_channel() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::generate_dataset(&GenConfig::default(), 1, 2).unwrap();
    let m = data::read_manifest(&data::write_split(dir.path(), "s", &samples).unwrap()).unwrap();
    let csv = dir.path().join("s.csv");
    let o = run(&["style-stats", "--xa", p(&m[0].xa), "--xb", p(&m[0].xb), "--lambda-prime", "4", "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "region,channel,mu_a,std_a,mu_b,std_b");
    assert_eq!(lines.len(), 1 + 16 * 3);
}

#[test]
fn nan_loss_exits_3_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, tiny_train_config(r#""lr0": 1e30, "ddr_variant": "gln", "ctst_enabled": false, "epochs": 3,"#)
        .replace(r#""epochs": 1,"#, ""))
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    SdNetwork::<f32>::load(&out.join("init.ckpt")).unwrap();
}

#[test]
fn ablate_emits_a_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"base": {{"width": "tiny", "batch_size": 2, "epochs": 1}}, "seeds": [0], "data": {SMALL_DATA}}}"#),
    )
    .unwrap();
    let out = dir.path().join("table.json");
    let o = run(&["ablate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["base", "gln", "glw", "glw_ctst"]);
    assert!(rows.iter().all(|r| r["median_f1"].is_number()));
}

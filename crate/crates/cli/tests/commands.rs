use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use half::f16;
use harmonia_cli::bfp_file;
use harmonia_cli::report::{shape_signature, validate_report};
use harmonia_cli::tensor_file::{TensorData, TensorFile};
use harmonia_core::grouping::{group_tensor, GroupAxis};
use harmonia_core::pipeline::{build_toy_model, ModelConfig};
use harmonia_core::{BfpConfig, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/small.json")
}

fn harmonia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmonia"))
        .args(args)
        .env_remove("HARMONIA_SEED")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn write_tensor(dir: &TempDir, name: &str, t: &TensorFile) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, t.to_bytes()).unwrap();
    p
}

#[test]
fn convert_ones() {
    let dir = TempDir::new().unwrap();
    let input = write_tensor(
        &dir,
        "x.hrmt",
        &TensorFile::new(vec![1, 32], TensorData::F16(vec![f16::ONE; 32])).unwrap(),
    );
    let out = dir.path().join("x.hbfp");
    let stdout = ok(&harmonia(&[
        "convert",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--group-size",
        "32",
        "--mantissa-bits",
        "8",
        "--axis",
        "token",
    ]));
    assert!(stdout.contains("groups: 1"));
    let t = bfp_file::from_bytes(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(t.groups().len(), 1);
    let g = &t.groups()[0];
    assert_eq!(g.shared_exponent(), 0);
    assert!(g.magnitudes().iter().all(|&m| m == 128));
    // header is 44 bytes; the first record starts with the biased exponent
    assert_eq!(std::fs::read(&out).unwrap()[44], 15);
}

#[test]
fn convert_then_dequantize_matches_library() {
    let dir = TempDir::new().unwrap();
    let x = Tensor::from_fn(37, 64, |r, c| {
        ((r * 64 + c) as f64 * 0.37).sin() * (1 + c % 5) as f64
    });
    let input = write_tensor(&dir, "x.hrmt", &TensorFile::from_matrix_f64(&x));
    let out = dir.path().join("x.hbfp");
    let deq = dir.path().join("x_deq.hrmt");
    let deq2 = dir.path().join("x_deq2.hrmt");
    ok(&harmonia(&[
        "convert",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--axis",
        "channel",
        "--mantissa-bits",
        "4",
        "--dequantize",
        s(&deq),
    ]));
    ok(&harmonia(&[
        "dequantize",
        "--input",
        s(&out),
        "--output",
        s(&deq2),
    ]));
    let expected = group_tensor(&x, GroupAxis::PerChannel, &BfpConfig::new(32, 4).unwrap())
        .unwrap()
        .dequantize();
    for p in [&deq, &deq2] {
        let got = TensorFile::from_bytes(&std::fs::read(p).unwrap())
            .unwrap()
            .to_matrix()
            .unwrap();
        assert_eq!(got, expected);
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a tensor").unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        code(&harmonia(&[
            "convert",
            "--input",
            s(&junk),
            "--output",
            s(&out)
        ])),
        2
    );
    assert_eq!(
        code(&harmonia(&[
            "convert",
            "--input",
            s(&dir.path().join("missing")),
            "--output",
            s(&out)
        ])),
        2
    );

    let ragged = write_tensor(
        &dir,
        "r.hrmt",
        &TensorFile::new(vec![2, 20], TensorData::F32(vec![1.0; 40])).unwrap(),
    );
    assert_eq!(
        code(&harmonia(&[
            "convert",
            "--input",
            s(&ragged),
            "--output",
            s(&out),
            "--axis",
            "token"
        ])),
        3
    );
    assert_eq!(
        code(&harmonia(&[
            "convert",
            "--input",
            s(&ragged),
            "--output",
            s(&out),
            "--mantissa-bits",
            "11"
        ])),
        3
    );

    assert_eq!(
        code(&harmonia(&[
            "ema", "--M", "64", "--K", "32", "--N", "48", "--tile-m", "15", "--tile-n", "16"
        ])),
        3
    );

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"hidden": 48, "head_dim": 48}"#).unwrap();
    let report = dir.path().join("rep.json");
    assert_eq!(
        code(&harmonia(&[
            "attn-sim",
            "--config",
            s(&bad_cfg),
            "--report",
            s(&report)
        ])),
        3
    );
    std::fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(
        code(&harmonia(&[
            "attn-sim",
            "--config",
            s(&bad_cfg),
            "--report",
            s(&report)
        ])),
        2
    );
    assert!(!report.exists());
}

#[test]
fn ema_examples() {
    let run = |args: &[&str]| ok(&harmonia(&[&["ema"], args].concat()));
    let a = run(&[
        "--M", "64", "--K", "32", "--N", "48", "--tile-m", "16", "--tile-n", "16",
    ]);
    assert!(
        a.contains("column_first: 7680")
            && a.contains("row_first: 8192")
            && a.contains("policy: column_first")
    );
    assert!(a.contains("energy_pJ: 479232"));
    let b = run(&[
        "--M", "16", "--K", "32", "--N", "128", "--tile-m", "16", "--tile-n", "16",
    ]);
    assert!(b.contains("row_first: 4608") && b.contains("policy: row_first"));
    let c = run(&[
        "--M", "32", "--K", "8", "--N", "32", "--tile-m", "16", "--tile-n", "16",
    ]);
    assert!(c.contains("policy: column_first"));

    let dir = TempDir::new().unwrap();
    let json = dir.path().join("ema.json");
    run(&[
        "--M",
        "64",
        "--K",
        "32",
        "--N",
        "48",
        "--tile-m",
        "16",
        "--tile-n",
        "16",
        "--policy",
        "row",
        "--json",
        s(&json),
    ]);
    let v = read_json(&json);
    assert_eq!(v["policy"], "row_first");
    assert_eq!(
        v["elements_A"].as_u64().unwrap() + v["elements_B"].as_u64().unwrap(),
        8192
    );
}

fn signature_text(v: &Value) -> String {
    let mut out = shape_signature(v).join("\n");
    out.push('\n');
    out
}

#[test]
fn attn_sim_report_is_valid_and_stable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&harmonia(&[
        "attn-sim",
        "--config",
        s(&small_config()),
        "--report",
        s(&a),
    ]));
    ok(&harmonia(&[
        "attn-sim",
        "--config",
        s(&small_config()),
        "--report",
        s(&b),
    ]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let report = read_json(&a);
    validate_report(&report).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["tokens"], 66);
    assert_eq!(report["smoothing"]["S"].as_array().unwrap().len(), 64);
    assert!(report["flags"]["all_finite"].as_bool().unwrap());

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/report_shape.txt");
    if std::env::var_os("HARMONIA_BLESS").is_some() {
        std::fs::write(&golden, signature_text(&report)).unwrap();
    }
    assert_eq!(
        signature_text(&report),
        std::fs::read_to_string(golden).unwrap()
    );
}

#[test]
fn seed_override() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("r.json");
    let o = Command::new(env!("CARGO_BIN_EXE_harmonia"))
        .args([
            "attn-sim",
            "--config",
            s(&small_config()),
            "--report",
            s(&p),
        ])
        .env("HARMONIA_SEED", "11")
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(read_json(&p)["seed"], 11);
    let o = Command::new(env!("CARGO_BIN_EXE_harmonia"))
        .args([
            "attn-sim",
            "--config",
            s(&small_config()),
            "--report",
            s(&p),
        ])
        .env("HARMONIA_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn ablation_pairs_record_seeds() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("abl.json");
    ok(&harmonia(&[
        "attn-sim",
        "--config",
        s(&small_config()),
        "--report",
        s(&p),
        "--ablation",
        "--seeds",
        "1,2",
    ]));
    let v = read_json(&p);
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 2);
    for (pair, seed) in pairs.iter().zip([1, 2]) {
        assert_eq!(pair["seed"], seed);
        for arm in ["enabled", "naive"] {
            assert_eq!(pair[arm]["seed"], seed);
            assert_eq!(pair[arm]["report"]["seed"], seed);
            validate_report(&pair[arm]["report"]).unwrap();
        }
        assert_eq!(pair["naive"]["toggles"]["asym_alloc"], false);
        assert_eq!(pair["enabled"]["toggles"]["online_smooth"], true);
        let d = pair["enabled"]["attention_error"].as_f64().unwrap()
            - pair["naive"]["attention_error"].as_f64().unwrap();
        assert!((d - pair["attention_error_delta"].as_f64().unwrap()).abs() < 1e-15);
    }
}

#[test]
fn sweep_csv_is_monotone_in_mantissa_bits() {
    let dir = TempDir::new().unwrap();
    let rep = dir.path().join("r.json");
    let csv_path = dir.path().join("sweep.csv");
    ok(&harmonia(&[
        "attn-sim",
        "--config",
        s(&small_config()),
        "--report",
        s(&rep),
        "--sweep",
        s(&csv_path),
        "--group-sizes",
        "16,32,64",
        "--mantissa-bits",
        "2,4,6,8,10",
    ]));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "group_size",
            "mantissa_bits",
            "k_mse",
            "v_mse",
            "pipeline_max_rel"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    for gs in rows.chunks(5) {
        for col in [2, 3] {
            let vals: Vec<f64> = gs.iter().map(|r| r[col].parse().unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
        }
        // only 8-bit points run the full pipeline
        for r in gs {
            assert_eq!(r[4].is_empty(), &r[1] != "8");
        }
    }
}

#[test]
fn calibrate_sidecar() {
    let dir = TempDir::new().unwrap();
    let cfg: ModelConfig = serde_json::from_slice(&std::fs::read(small_config()).unwrap()).unwrap();
    let x = build_toy_model(&cfg).unwrap().sample_inputs(48);
    let samples = write_tensor(&dir, "samples.hrmt", &TensorFile::from_matrix_f64(&x));

    let out = dir.path().join("cal.json");
    ok(&harmonia(&[
        "calibrate",
        "--config",
        s(&small_config()),
        "--samples",
        s(&samples),
        "--out",
        s(&out),
    ]));
    let v = read_json(&out);
    assert!(v["objective"].as_f64().unwrap() <= v["initial_objective"].as_f64().unwrap());
    assert_eq!(
        v["active_channels"].as_array().unwrap().len(),
        cfg.smoothing.top_k
    );
    let again = dir.path().join("cal2.json");
    ok(&harmonia(&[
        "calibrate",
        "--config",
        s(&small_config()),
        "--samples",
        s(&samples),
        "--out",
        s(&again),
    ]));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    // the sidecar scale drives a run without recalibrating
    let rep = dir.path().join("r.json");
    ok(&harmonia(&[
        "attn-sim",
        "--config",
        s(&small_config()),
        "--report",
        s(&rep),
        "--scales",
        s(&out),
    ]));
    let r = read_json(&rep);
    assert_eq!(r["smoothing"]["S"], v["S"]);
    assert!(r["smoothing"]["calibration"].is_null());

    let zero_cfg = dir.path().join("zero.json");
    let mut zero = cfg.clone();
    zero.smoothing.calibration.iters = 0;
    std::fs::write(&zero_cfg, serde_json::to_vec(&zero).unwrap()).unwrap();
    ok(&harmonia(&[
        "calibrate",
        "--config",
        s(&zero_cfg),
        "--samples",
        s(&samples),
        "--out",
        s(&out),
    ]));
    assert!(read_json(&out)["S"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s == 1.0));

    let wrong = write_tensor(
        &dir,
        "wrong.hrmt",
        &TensorFile::new(vec![4, 32], TensorData::F64(vec![0.0; 128])).unwrap(),
    );
    assert_eq!(
        code(&harmonia(&[
            "calibrate",
            "--config",
            s(&small_config()),
            "--samples",
            s(&wrong),
            "--out",
            s(&out)
        ])),
        3
    );
}

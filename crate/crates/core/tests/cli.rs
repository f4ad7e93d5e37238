use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("glab-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run(verb: &str, out: &Path, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_glab"))
        .args([verb, "--config", fixture().to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "0,1"])
        .args(extra)
        .output()
        .expect("binary runs")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn every_verb_writes_its_csv() {
    let cases: [(&str, &str, &str); 6] = [
        ("tradeoff", "tradeoff.csv", "defense,strength,attack,seed,pmm,psnr,ssim,evalnet,mse,time_s"),
        ("ablation", "ablation_alpha.csv", "defense,strength,attack,seed,pmm,psnr,ssim,evalnet,mse,time_s"),
        ("timing", "timing.csv", "defense,knob,value,median_s"),
        ("validate-weights", "validate_weights.csv", "experiment,setting,strength,seed,accuracy"),
        ("attack-demo", "attack_demo.csv", "defense,strength,attack,seed,pmm,psnr,ssim,evalnet,mse,time_s"),
        ("train-evalnet", "evalnet_summary.csv", "seed,mae,monotone_fraction,separation_fraction"),
    ];
    for (verb, file, head) in cases {
        let out = scratch(verb);
        let res = run(verb, &out, &[]);
        assert!(res.status.success(), "{verb}: {}", String::from_utf8_lossy(&res.stderr));
        assert_eq!(header(&out.join(file)), head, "{verb}");
        fs::remove_dir_all(out).unwrap();
    }
}

#[test]
fn tradeoff_rows_cover_sweep_times_seeds() {
    let out = scratch("rows");
    assert!(run("tradeoff", &out, &[]).status.success());
    let text = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 10));
    assert!(rows[0].starts_with("none,0,igla,0,"));
    assert!(out.join("tradeoff.svg").exists());
    fs::remove_dir_all(out).unwrap();
}

#[test]
fn attack_demo_dumps_images() {
    let out = scratch("demo");
    assert!(run("attack-demo", &out, &[]).status.success());
    for prefix in ["original", "reconstructed", "robust"] {
        let (img, shape) = glab::pnm::read(&out.join(format!("{prefix}_s0_u0_0.ppm"))).unwrap();
        assert_eq!(shape, [3, 8, 8]);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    fs::remove_dir_all(out).unwrap();
}

#[test]
fn trained_evalnet_loads_back() {
    let out = scratch("evalnet");
    assert!(run("train-evalnet", &out, &[]).status.success());
    let m = glab::checkpoint::load_model(&out.join("evalnet_s1.glab")).unwrap();
    assert!(glab::evalnet::EvalNet::from_model(m).is_ok());
    fs::remove_dir_all(out).unwrap();
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    let out = scratch("bad");
    let res = Command::new(env!("CARGO_BIN_EXE_glab")).args(["tradeoff", "--seeds", "x", "--out", out.to_str().unwrap()]).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad seed"));

    let cfg = out.with_extension("toml");
    fs::write(&cfg, "[fl]\nround = 3\n").unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_glab"))
        .args(["tradeoff", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown field"));
    fs::remove_file(cfg).unwrap();
}

#[test]
fn repeated_runs_are_byte_identical() {
    for (verb, file) in [("tradeoff", "tradeoff.csv"), ("validate-weights", "validate_weights.csv"), ("train-evalnet", "evalnet_quality.csv")] {
        let (a, b) = (scratch(&format!("{verb}-a")), scratch(&format!("{verb}-b")));
        assert!(run(verb, &a, &[]).status.success());
        assert!(run(verb, &b, &[]).status.success());
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{verb}");
        fs::remove_dir_all(a).unwrap();
        fs::remove_dir_all(b).unwrap();
    }
}

#[test]
fn shipped_config_parses() {
    let cfg = glab::config::ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    assert_eq!(cfg.fl.clients_per_round, 5);
    assert!(cfg.defense.sweep.iter().all(|e| glab::config::parse_defense(e).is_ok()));
}

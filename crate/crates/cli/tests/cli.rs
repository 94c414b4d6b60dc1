use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fadeldp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fadeldp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const SIMULATE: &str = "scenario = \"delay-ou\"\n[experiment]\nkind = \"simulate\"\neps = 0.0\nt_end = 1.0\n";

#[test]
fn deterministic_run_is_byte_identical_and_manifest_hashes_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fadeldp(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let pa = fs::read(a.join("path_0.csv")).unwrap();
    assert_eq!(pa, fs::read(b.join("path_0.csv")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "simulate");
    for f in manifest["files"].as_array().unwrap() {
        let bytes = fs::read(a.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn subcommand_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let o = fadeldp(&["rate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scenario = \"ou\"\nbogus = 1\n[experiment]\nkind = \"check-model\"\n");
    let o = fadeldp(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn unstable_model_is_refused() {
    let text = r#"
[model]
family = "scalar"
a = 0.1
b = 2.0
sigma0 = 1.0
mu1 = { atoms = [[-1.0, 1.0]] }
mu2 = { atoms = [[0.0, 1.0]] }
[memory]
r = 1.0
h = 0.01
window = 1.0
tail_tol = 1e-8
[experiment]
kind = "simulate"
eps = 0.1
t_end = 1.0
"#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), text);
    let o = fadeldp(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn expensive_run_is_cached_unless_disabled() {
    let text = "seed = 3\nscenario = \"ou\"\n[experiment]\nkind = \"stationarity\"\nn_burn = 16.0\ntimes = [0.0, 0.5]\nn_replicas = 100\n";
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let hit = |extra: &[&str]| {
        let mut args = vec!["stationarity", "--config", &cfg, "--out", out, "--threads", "2"];
        args.extend_from_slice(extra);
        let o = fadeldp(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(Path::new(out).join("manifest.json")).unwrap()).unwrap();
        m["cache_hit"].as_bool().unwrap()
    };
    assert!(!hit(&[]));
    assert!(hit(&[]));
    assert!(!hit(&["--no-cache"]));
}

#[test]
fn seed_override_changes_config_hash() {
    let text = "seed = 1\nscenario = \"ou\"\n[experiment]\nkind = \"simulate\"\neps = 0.1\nt_end = 0.5\n";
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), text);
    let hash = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = fadeldp(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        (m["config_hash"].as_str().unwrap().to_owned(), m["seed"].as_u64().unwrap())
    };
    let (h1, s1) = hash("1", "x");
    let (h2, s2) = hash("2", "y");
    assert_eq!((s1, s2), (1, 2));
    assert_ne!(h1, h2);
}

#[test]
fn scenarios_lists_registry() {
    let o = fadeldp(&["scenarios"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<_> = v.as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap().to_owned()).collect();
    assert!(names.contains(&"ou".to_owned()) && names.contains(&"delay-ou".to_owned()));
}

#[test]
fn shipped_configs_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = tempfile::tempdir().unwrap();
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let name = path.file_stem().unwrap().to_str().unwrap().to_owned();
        let dest = out.path().join(&name);
        let o = fadeldp(&[&name, "--config", path.to_str().unwrap(), "--out", dest.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dest.join("manifest.json").exists());
        n += 1;
    }
    assert!(n >= 8);
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const CONFIG: &str = r#"
task = "esconv"
master_seed = 2
out_dir = "out"
scheme = "{scheme}"
init = "semantic"

[corpus]
pool = "pool.jsonl"
test = "test.jsonl"
max_test = 6

[plan]
n_train = {n_train}
n_valid = 4
n_subsets = 2
seeds_per_subset = 1

[train]
learning_rate = 1e-3
epochs = 1
batch_size = 4
warmup_steps = 0

[generation]
mode = "top_p"
min_len = 1
max_len = 6

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_positions = 384

[backbone.pretrain]
corpus = "pre.jsonl"
epochs = 1
learning_rate = 3e-3
batch_size = 8
warmup_steps = 2
seed = 1
"#;

fn gdg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn gdg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gdg(dir, args);
    assert!(
        out.status.success(),
        "gdg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(scheme: &str, n_train: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, n, seed) in [("pool", 40, "1"), ("test", 10, "2"), ("pre", 30, "3")] {
        let out = format!("{name}.jsonl");
        let n = n.to_string();
        ok(
            dir.path(),
            &[
                "synth",
                "--task",
                "esconv",
                "--samples",
                &n,
                "--seed",
                seed,
                "--id-prefix",
                name,
                "--out",
                &out,
            ],
        );
    }
    let body = CONFIG
        .replace("{scheme}", scheme)
        .replace("{n_train}", &n_train.to_string());
    std::fs::write(dir.path().join("exp.toml"), body).unwrap();
    dir
}

fn checksums(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.file_name().unwrap().to_string_lossy();
            if name == "manifest.json" || name == "config.toml" {
                continue;
            }
            let hash = Sha256::digest(std::fs::read(&p).unwrap());
            let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex);
        }
    }
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.jsonl", "b.jsonl"] {
        ok(
            dir.path(),
            &[
                "synth",
                "--task",
                "wow",
                "--samples",
                "5",
                "--seed",
                "9",
                "--out",
                out,
            ],
        );
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 5);
}

#[test]
fn full_protocol_is_byte_reproducible() {
    let dir = setup("continuous", 8);
    for out in ["out_a", "out_b"] {
        let common = ["--config", "exp.toml", "--out", out];
        let stdout = ok(dir.path(), &[&["prepare"][..], &common].concat());
        assert!(stdout.contains("prepared 2 splits"), "{stdout}");
        ok(dir.path(), &[&["run"][..], &common].concat());
        let table = ok(dir.path(), &[&["evaluate"][..], &common].concat());
        assert!(
            table.contains("Match") && table.contains("continuous__semantic"),
            "{table}"
        );
    }
    let a = checksums(&dir.path().join("out_a"));
    let b = checksums(&dir.path().join("out_b"));
    assert!(a.keys().any(|p| p.ends_with("generations.jsonl")));
    assert!(a.keys().any(|p| p.extension().is_some_and(|e| e == "ckpt")));
    assert_eq!(a, b);

    // A different master seed draws different splits.
    let c = ["--config", "exp.toml", "--out", "out_c", "--seed", "77"];
    ok(dir.path(), &[&["prepare"][..], &c].concat());
    let split = Path::new("prepare/splits/s0_r0.json");
    assert_ne!(checksums(&dir.path().join("out_c"))[split], a[split]);
}

#[test]
fn capacity_error_exits_with_code_4() {
    let dir = setup("none", 500);
    let out = gdg(dir.path(), &["prepare", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[E_CAPACITY]"), "{stderr}");
}

#[test]
fn evaluate_lists_missing_runs() {
    let dir = setup("none", 8);
    ok(dir.path(), &["prepare", "--config", "exp.toml"]);
    ok(
        dir.path(),
        &["run", "--config", "exp.toml", "--runs", "s1_r0"],
    );
    let out = gdg(dir.path(), &["evaluate", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[E_VALIDATION]"), "{stderr}");
    assert!(
        stderr.contains("s0_r0") && !stderr.contains("s1_r0"),
        "{stderr}"
    );
    ok(
        dir.path(),
        &["evaluate", "--config", "exp.toml", "--runs", "s1_r0"],
    );
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), "task = \"wow\"\n").unwrap();
    let out = gdg(dir.path(), &["prepare", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[E_CONFIG]"));
}

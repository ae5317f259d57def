use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn dnd(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnd"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let o = dnd(&["gen-data", "--seed", seed], &smoke_config(), dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path| std::fs::read(d.join("train.dnd")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"config_version": 1, "eval_samples": 0}"#).unwrap();
    let o = dnd(&["gen-data"], &bad, &tmp.path().join("out"));
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let missing = dnd(
        &["gen-data"],
        &tmp.path().join("nope.json"),
        &tmp.path().join("out"),
    );
    assert_eq!(missing.status.code(), Some(2));
    let unversioned = tmp.path().join("unversioned.json");
    std::fs::write(&unversioned, "{}").unwrap();
    assert_eq!(
        dnd(&["gen-data"], &unversioned, &tmp.path().join("out"))
            .status
            .code(),
        Some(2)
    );
}

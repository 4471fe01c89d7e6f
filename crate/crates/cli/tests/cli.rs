use std::path::Path;
use std::process::{Command, Output};

fn worldact(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_worldact"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synth(dir: &Path) {
    let o = worldact(&["synth", "--out", "room"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configuration_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = worldact(&["decompose", "--out", "run"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("paths.scene"));

    synth(dir.path());
    let o = worldact(&["decompose", "--config", "room/pipeline.json", "--backend", "bogus=mock"], dir.path());
    assert_eq!(code(&o), 2);
    let o = worldact(&["decompose", "--config", "room/pipeline.json", "--backend", "vlm=ftp://x"], dir.path());
    assert_eq!(code(&o), 2);
    std::fs::write(dir.path().join("bad.json"), r#"{"sead": 1}"#).unwrap();
    let o = worldact(&["pipeline", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn unreachable_backend_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("vlm=http://127.0.0.1:{port}");
    let o = worldact(&["decompose", "--config", "room/pipeline.json", "--backend", &url], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("room/run/run.json")).unwrap()).unwrap();
    assert_eq!(record["stages"][0]["status"], "failed");
}

#[test]
fn resume_redoes_only_the_interrupted_stage() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let run = dir.path().join("room/run");
    for stage in ["decompose", "restore"] {
        let o = worldact(&[stage, "--config", "room/pipeline.json"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = run.join("restore/restore.manifest.json");
    let before = std::fs::read(&manifest).unwrap();
    // a restore that died before writing its manifest
    std::fs::remove_file(&manifest).unwrap();
    std::fs::remove_file(run.join("restore/background.ply")).unwrap();

    let o = worldact(&["restore", "--config", "room/pipeline.json", "--resume"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Completed"));
    assert_eq!(std::fs::read(&manifest).unwrap(), before);

    let o = worldact(&["restore", "--config", "room/pipeline.json", "--resume"], dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Resumed"));
}

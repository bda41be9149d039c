use std::process::Command;

fn berezin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_berezin")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn list_examples() {
    let (code, out, _) = berezin(&["list-examples"]);
    assert_eq!(code, 0);
    for name in ["rudakov", "r14-stokes", "polar", "quadrant-q4", "square-q4"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{out}");
    }
}

#[test]
fn count_terms_prints_thirteen() {
    let (code, out, _) = berezin(&["run", "--example", "square-q4", "--count-terms"]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "13");
}

#[test]
fn report_file_is_json() {
    let dir = std::env::temp_dir().join(format!("berezin-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("interval.json");
    let (code, out, _) =
        berezin(&["verify-cov", "--example", "rudakov", "--report", path.to_str().unwrap(), "--convention", "s=half-q"]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["convention"]["s"], "half-q");
    assert_eq!(v["passed"], true);
    assert_eq!(v["quantities"]["bulk"], -1.0);
    assert!(out.contains("identity.residual"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn stokes_to_stdout() {
    let (code, out, _) = berezin(&["verify-stokes", "--example", "r14-stokes"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["quantities"]["compatible.sign_factor"], 1.0);
}

#[test]
fn exceeded_tolerance_exits_one() {
    let (code, _, _) = berezin(&["run", "--example", "quadrant-q4", "--tolerance", "1e-15"]);
    assert_eq!(code, 1);
}

#[test]
fn input_errors_exit_two() {
    assert_eq!(berezin(&["run", "--example", "missing"]).0, 2);
    assert_eq!(berezin(&["verify-stokes", "--example", "rudakov"]).0, 2);
    assert_eq!(berezin(&["run", "--example", "rudakov", "--convention", "s=bogus"]).0, 2);
    assert_eq!(berezin(&["run"]).0, 2);
    let path = std::env::temp_dir().join(format!("berezin-bad-{}.toml", std::process::id()));
    std::fs::write(&path, "name = \"x\"\nmode = \"corners\"\n[chart\n").unwrap();
    let (code, _, err) = berezin(&["run", "--scenario", path.to_str().unwrap()]);
    std::fs::remove_file(&path).unwrap();
    assert_eq!(code, 2);
    assert!(err.contains("parse error at 3:"), "{err}");
}

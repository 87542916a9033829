//! Golden-file test pinning the η report JSON schema: the sorted set of key
//! paths must match `tests/golden/eta_report_schema.txt`. Arrays contribute
//! their first element's paths under `*`.

use std::collections::BTreeSet;
use std::process::Command;

fn key_paths(value: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let p = format!("{prefix}/{k}");
                out.insert(p.clone());
                key_paths(v, &p, out);
            }
        }
        serde_json::Value::Array(items) => {
            if let Some(first) = items.first() {
                key_paths(first, &format!("{prefix}/*"), out);
            }
        }
        _ => {}
    }
}

#[test]
fn eta_report_schema_matches_golden_file() {
    let dir = std::env::temp_dir().join(format!("knudsen-schema-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 99

[cell]
family = "ellipsoid"
a1 = 1.0
a2 = 1.0
b = 1.0
eps = 0.0995
c1 = 1.0
c2 = 1.0

[channel]
r = 1.0
l = [25.0]
rho = 1.0

[truncation]
k_max = 4
l_max = 4

[binning]
n_r = 8
n_theta = 8

[monte_carlo]
n_traj = 1000
samples_per_bin = 10000
"#,
    )
    .unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_knudsen"))
        .args(["compare", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eta_report.json")).unwrap())
            .unwrap();
    let mut paths = BTreeSet::new();
    key_paths(&report, "", &mut paths);
    let actual: Vec<String> = paths.into_iter().collect();
    let golden_text = include_str!("golden/eta_report_schema.txt");
    let golden: Vec<String> = golden_text.lines().map(str::to_string).collect();
    assert_eq!(
        actual, golden,
        "eta_report.json schema drifted from the golden file"
    );
}

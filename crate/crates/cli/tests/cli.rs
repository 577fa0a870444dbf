use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn h2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2t"))
        .args(args)
        .env_remove("H2T_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = h2t(args);
    assert!(
        out.status.success(),
        "h2t {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"
feature_dim = 8
n_archetypes = 3
patches_per_slide = 36
grid_width = 6
evaluation_fraction = 0.5
mixture_concentration = 50.0

[[classes]]
label = "a"
n_slides = 10
proportions = [0.6, 0.3, 0.1]

[[classes]]
label = "b"
n_slides = 10
proportions = [0.1, 0.3, 0.6]
"#;

fn cohort(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let out = dir.join("cohort");
    let printed = ok(&["synth", "--spec", s(&spec), "--seed", "5", "--out", s(&out)]);
    let manifest = PathBuf::from(printed.trim());
    assert!(manifest.is_file());
    manifest
}

#[test]
fn stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d);
    let m = s(&manifest);
    let protos = d.join("p.h2tp");
    let cluster = ["cluster", "--manifest", m, "--k", "8", "--epochs", "3", "--seed", "1", "--out", s(&protos)];
    ok(&cluster);
    let first = std::fs::read(&protos).unwrap();
    ok(&cluster);
    assert_eq!(std::fs::read(&protos).unwrap(), first);
    assert!(ok(&["describe", s(&protos)]).starts_with("H2TP k=8 d=8 seed=1 "));

    let reps = d.join("reps");
    let p = s(&protos);
    ok(&["project", "--manifest", m, "--prototypes", p, "--variant", "h-k", "--param", "4", "--out-dir", s(&reps)]);
    let one = std::fs::read_dir(&reps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "h2tr"))
        .unwrap();
    assert!(ok(&["describe", s(&one)]).starts_with("H2TR variant=h-k(4) K=8 d=8 "));

    let report = d.join("report.json");
    let table = ok(&[
        "probe", "--manifest", m, "--repr-dir", s(&reps), "--seed", "2", "--folds", "3", "--probe-epochs", "10",
        "--lr", "0.05", "--evaluation-cohort", "evaluation", "--out", s(&report),
    ]);
    assert!(table.contains("mean±std"));
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"fold_plan\""));

    let scores = d.join("scores.csv");
    ok(&[
        "anomaly", "--train-manifest", m, "--score-manifest", m, "--repr-dir", s(&reps), "--trees", "20",
        "--subsample", "16", "--seed", "3", "--out", s(&scores),
    ]);
    let csv = std::fs::read_to_string(&scores).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("slide_id,normality_score"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|v| (0.0..=1.0).contains(v)));

    let oracle = ok(&["oracle", "--input", s(&manifest.parent().unwrap().join("slides").join(
        std::fs::read_dir(manifest.parent().unwrap().join("slides")).unwrap().next().unwrap().unwrap().file_name(),
    )), "--prototypes", p, "--pe-mode", "none", "--beta", "1e6"]);
    assert_eq!(oracle.lines().count(), 8);
    assert!(oracle.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn pam_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d);
    let protos = d.join("p.h2tp");
    ok(&["cluster", "--manifest", s(&manifest), "--k", "8", "--epochs", "2", "--seed", "1", "--out", s(&protos)]);
    let maps = d.join("maps");
    ok(&["pam", "build", "--manifest", s(&manifest), "--prototypes", s(&protos), "--out-dir", s(&maps)]);
    let map = std::fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "h2tm"))
        .unwrap();
    assert!(ok(&["describe", s(&map)]).starts_with("H2TM K=8 grid=6x6 foreground=36"));

    let hist: Vec<f64> = ok(&["pam", "hist", "--pam", s(&map)]).trim().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(hist.len(), 8);
    assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let pcm = ok(&["pam", "pcm", "--pam", s(&map), "--gamma", "1,2", "--pcm-mode", "all-centers"]);
    assert_eq!(pcm.lines().count(), 16);

    let png = d.join("map.png");
    ok(&["pam", "render", "--pam", s(&map), "--scale", "3", "--out", s(&png)]);
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    let hot = d.join("hot.h2tt");
    ok(&["pam", "onehot", "--pam", s(&map), "--out", s(&hot)]);
    assert!(ok(&["describe", s(&hot)]).contains("pam_one_hot[8, 6, 6]"));
}

#[test]
fn pipeline_caches_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d);
    let config = d.join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "discovery_manifest = {:?}\nvariants = [\"h-w\", \"hist\"]\noutput = \"run\"\n\
             [prototypes]\nk = 8\nepochs = 3\nbatch_size = 128\nseed = 1\n\
             [task]\nn_folds = 3\nseed = 2\nevaluation_cohort = \"evaluation\"\n[task.probe]\nepochs = 8\nlr = 0.05\n",
            s(&manifest)
        ),
    )
    .unwrap();
    let first = h2t(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = h2t(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&second), 0);
    assert_eq!(first.stdout, second.stdout);
    assert!(String::from_utf8_lossy(&second.stderr).contains("5 stages, 5 cached"));
    assert!(String::from_utf8_lossy(&first.stdout).contains("adjusted p-values"));

    let bad = d.join("bad.toml");
    let text = std::fs::read_to_string(&config).unwrap().replace(s(&manifest), "/nonexistent/manifest.toml");
    std::fs::write(&bad, text).unwrap();
    let out = h2t(&["pipeline", "--config", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(!d.join("run").join("partial.txt").exists());
}

#[test]
fn error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let junk = d.join("junk.h2tp");
    std::fs::write(&junk, b"H2TP\x00\x01").unwrap();
    let out = h2t(&["describe", s(&junk)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown or damaged artifact"));

    // stochastic stages refuse to run without an explicit seed
    let out = h2t(&["cluster", "--manifest", "m.toml", "--out", "p.h2tp"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));

    let out = h2t(&["cluster", "--manifest", s(&d.join("none.toml")), "--seed", "1", "--out", "p.h2tp"]);
    assert_eq!(code(&out), 2);
    let out = h2t(&["--threads", "0", "describe", s(&junk)]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_h2t"))
        .args(["describe", s(&junk)])
        .env("H2T_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexprefill::fpt;
use flexprefill::report::RunReport;

fn flexattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flexattn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    flexattn(args).status.code().expect("exit code")
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Self(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> String {
        self.0.path().join(name).display().to_string()
    }

    fn join(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }
}

fn gen(dir: &Dir, name: &str, extra: &[&str]) -> String {
    let out = dir.path(name);
    let mut args = vec!["gen", "--out", &out];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn csv_values(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(str::to_owned).collect())
        .collect()
}

#[test]
fn gen_writes_three_tensors_of_the_requested_shape() {
    let dir = Dir::new();
    let path = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "needle",
            "--seq-len",
            "4096",
            "--dim",
            "64",
            "--seed",
            "7",
        ],
    );
    let b = fpt::load(Path::new(&path)).unwrap();
    assert_eq!(b.shape(), [1, 4096, 64]);
    assert_eq!(b.names, ["q", "k", "v"]);
}

#[test]
fn gen_is_deterministic() {
    let dir = Dir::new();
    let args = [
        "--kind",
        "blocky",
        "--seq-len",
        "512",
        "--dim",
        "16",
        "--seed",
        "3",
        "--heads",
        "2",
    ];
    let a = gen(&dir, "a.fpt", &args);
    let b = gen(&dir, "b.fpt", &args);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = Dir::new();
    let out = dir.path("w.fpt");
    assert_eq!(
        code(&["gen", "--kind", "needle", "--dim", "8", "--out", &out]),
        2
    );
    assert_eq!(
        code(&[
            "gen",
            "--kind",
            "spiral",
            "--seq-len",
            "8",
            "--dim",
            "8",
            "--out",
            &out
        ]),
        2
    );
    assert_eq!(
        code(&[
            "gen",
            "--kind",
            "local",
            "--window",
            "99",
            "--seq-len",
            "8",
            "--dim",
            "8",
            "--out",
            &out
        ]),
        2
    );
    let w = gen(
        &dir,
        "ok.fpt",
        &["--kind", "random", "--seq-len", "64", "--dim", "8"],
    );
    let report = dir.path("r.json");
    assert_eq!(
        code(&[
            "run",
            "--workload",
            &w,
            "--gamma",
            "1.5",
            "--report",
            &report
        ]),
        2
    );
    assert_eq!(code(&["run", "--report", &report]), 2);
    assert_eq!(code(&["sweep", "--workload", &w, "--gamma", "0.9"]), 2);
    assert_eq!(
        code(&[
            "sweep",
            "--workload",
            &w,
            "--gamma",
            "0.9,0.95",
            "--tau",
            "0.1,0.2"
        ]),
        2
    );
}

#[test]
fn file_problems_exit_with_3() {
    let dir = Dir::new();
    let report = dir.path("r.json");
    assert_eq!(
        code(&[
            "run",
            "--workload",
            &dir.path("missing.fpt"),
            "--report",
            &report
        ]),
        3
    );
    let w = gen(
        &dir,
        "w.fpt",
        &["--kind", "random", "--seq-len", "64", "--dim", "8"],
    );
    let mut bytes = std::fs::read(&w).unwrap();
    bytes.pop();
    std::fs::write(&w, bytes).unwrap();
    let out = flexattn(&["run", "--workload", &w, "--report", &report]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated payload"));
}

#[test]
fn near_full_coverage_passes_the_bound_check() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "random",
            "--seq-len",
            "512",
            "--dim",
            "16",
            "--seed",
            "2",
        ],
    );
    let report = dir.path("r.json");
    ok(&[
        "run",
        "--workload",
        &w,
        "--gamma",
        "0.999999",
        "--min-budget",
        "0",
        "--block-size",
        "64",
        "--check-bound",
        "--report",
        &report,
    ]);
    let r = RunReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let h = &r.heads[0].report;
    assert_eq!(h.bound_violations, Some(0));
    assert!(h.error_l2.unwrap() <= 1e-4);
}

#[test]
fn separate_qkv_files_are_accepted() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "needle",
            "--seq-len",
            "300",
            "--dim",
            "8",
            "--heads",
            "2",
        ],
    );
    let b = fpt::load(Path::new(&w)).unwrap();
    for name in ["q", "k", "v"] {
        let single =
            fpt::TensorBundle::new(vec![name.into()], vec![b.get(name).unwrap().to_vec()]).unwrap();
        fpt::save(&single, &dir.join(&format!("{name}.fpt"))).unwrap();
    }
    let (a, c) = (dir.path("a.json"), dir.path("c.json"));
    ok(&["run", "--workload", &w, "--report", &a]);
    ok(&[
        "run",
        "--q",
        &dir.path("q.fpt"),
        "--k",
        &dir.path("k.fpt"),
        "--v",
        &dir.path("v.fpt"),
        "--report",
        &c,
    ]);
    let ra = RunReport::from_json(&std::fs::read_to_string(a).unwrap()).unwrap();
    let rc = RunReport::from_json(&std::fs::read_to_string(c).unwrap()).unwrap();
    assert_eq!(ra.heads, rc.heads);
    assert_eq!(rc.inputs.len(), 3);
}

#[test]
fn needle_heads_show_vertical_slash_in_the_pattern_grid() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "needle",
            "--seq-len",
            "2048",
            "--dim",
            "32",
            "--heads",
            "2",
        ],
    );
    let report = dir.path("r.json");
    ok(&[
        "run",
        "--workload",
        &w,
        "--report",
        &report,
        "--heatmap-dir",
        &dir.path("maps"),
    ]);
    let grid = std::fs::read_to_string(dir.join("maps/pattern.csv")).unwrap();
    assert_eq!(grid, "layer,h0,h1\n0,0,0\n");
    let r = RunReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.aggregates_consistent());
    assert_eq!(r.aggregates.vertical_slash, 2);
}

#[test]
fn heatmaps_have_the_right_codomain() {
    let dir = Dir::new();
    let a = gen(
        &dir,
        "a.fpt",
        &[
            "--kind",
            "blocky",
            "--seq-len",
            "1024",
            "--dim",
            "16",
            "--heads",
            "3",
        ],
    );
    let b = gen(
        &dir,
        "b.fpt",
        &[
            "--kind",
            "random",
            "--seq-len",
            "1024",
            "--dim",
            "16",
            "--heads",
            "3",
        ],
    );
    let report = dir.path("r.json");
    ok(&[
        "run",
        "--workload",
        &a,
        "--workload",
        &b,
        "--min-budget",
        "128",
        "--report",
        &report,
    ]);
    for (what, check) in [
        (
            "sparsity",
            (|x: f64| (0.0..=1.0).contains(&x)) as fn(f64) -> bool,
        ),
        ("pattern", |x| x == 0.0 || x == 1.0),
        ("jsd", |x| (0.0..=1.0).contains(&x)),
    ] {
        let out = ok(&["heatmap", "--report", &report, "--what", what]);
        let rows = csv_values(&String::from_utf8(out.stdout).unwrap());
        assert_eq!(rows.len(), 2);
        for v in rows.iter().flatten() {
            assert!(check(v.parse().unwrap()), "{what}: {v}");
        }
    }
    assert_eq!(
        code(&["heatmap", "--report", &report, "--what", "entropy"]),
        2
    );
}

#[test]
fn one_head_gives_a_one_cell_heatmap() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "local",
            "--window",
            "32",
            "--seq-len",
            "256",
            "--dim",
            "8",
        ],
    );
    let report = dir.path("r.json");
    ok(&["run", "--workload", &w, "--report", &report]);
    let out = dir.path("s.csv");
    ok(&[
        "heatmap", "--report", &report, "--what", "sparsity", "--out", &out,
    ]);
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(csv_values(&text), vec![vec!["0".to_string()]]);
}

#[test]
fn gamma_sweep_flops_increase_on_local_workload() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "local",
            "--window",
            "64",
            "--seq-len",
            "2048",
            "--dim",
            "32",
            "--seed",
            "1",
        ],
    );
    let out = ok(&[
        "sweep",
        "--workload",
        &w,
        "--gamma",
        "0.6,0.9,0.95",
        "--min-budget",
        "128",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "param,value,mean_sparsity,total_flops,speedup,error_l2,query_specific_heads"
    );
    let flops: Vec<u64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(flops.len(), 3);
    assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
}

#[test]
fn tau_sweep_query_specific_count_is_nondecreasing() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "random",
            "--seq-len",
            "512",
            "--dim",
            "16",
            "--heads",
            "4",
            "--seed",
            "5",
        ],
    );
    let out = ok(&[
        "sweep",
        "--workload",
        &w,
        "--tau",
        "0,0.1,0.3",
        "--format",
        "json",
        "--oracle-errors",
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    let counts: Vec<u64> = rows
        .iter()
        .map(|r| r["query_specific_heads"].as_u64().unwrap())
        .collect();
    assert_eq!(counts[0], 0);
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(rows.iter().all(|r| r["error_l2"].is_f64()));
}

#[test]
fn thread_cap_does_not_change_the_report() {
    let dir = Dir::new();
    let w = gen(
        &dir,
        "w.fpt",
        &[
            "--kind",
            "needle",
            "--seq-len",
            "600",
            "--dim",
            "16",
            "--heads",
            "4",
        ],
    );
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let report = dir.path(&format!("r{threads}.json"));
        let out = Command::new(env!("CARGO_BIN_EXE_flexattn"))
            .env("FLEXATTN_THREADS", threads)
            .args([
                "run",
                "--workload",
                &w,
                "--min-budget",
                "128",
                "--report",
                &report,
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        reports.push(std::fs::read(report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use effcov::report::KvReport;

const CONFOUNDED: &str = "# confounded exposure\nZ -> X\nZ -> Y\nX -> Y\n";
const MODULATED: &str = "Z -> X\nZ -> Y\nX -> Y\nU -> U_X\nU -> U_Y\nU_X -> X\nU_Y -> Y\n";

fn effcov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effcov"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn demo_rounded_and_exact() {
    let o = effcov(&["demo-example", "--mode", "rounded"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    for v in ["1.08", "1.30", "1.19", "1.34"] {
        assert!(s.contains(v), "missing {v} in\n{s}");
    }
    let s = stdout(&effcov(&["demo-example", "--mode", "exact"]));
    assert!(s.contains("1.06064") && s.contains("1.30395"), "{s}");
}

#[test]
fn demo_machine_output_round_trips() {
    let s = stdout(&effcov(&["demo-example", "--format", "machine"]));
    let kv = KvReport::parse(&s).unwrap();
    assert_eq!(kv.to_string(), s);
    assert!(!kv.entries().is_empty());
}

#[test]
fn demo_csv() {
    let s = stdout(&effcov(&["demo-example", "--mode", "rounded", "--csv"]));
    assert!(s.lines().count() > 4);
    assert!(s.lines().all(|l| l.contains(',')));
}

#[test]
fn graph_queries_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "confounded.txt", CONFOUNDED);
    let b = write(dir.path(), "modulated.txt", MODULATED);
    assert_eq!(
        code(&effcov(&[
            "graph", &a, "backdoor", "X", "Y", "--given", "Z"
        ])),
        0
    );
    let o = effcov(&["graph", &b, "backdoor", "X", "Y", "--given", "Z"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("not blocked"));
    assert_eq!(
        code(&effcov(&[
            "graph", &b, "backdoor", "X", "Y", "--given", "Z,U"
        ])),
        0
    );
    let o = effcov(&["--format", "machine", "graph", &a, "paths", "X", "Y"]);
    assert_eq!(code(&o), 0);
    let kv = KvReport::parse(&stdout(&o)).unwrap();
    assert_eq!(kv.get("paths.count"), Some("2"));
    assert_eq!(
        code(&effcov(&[
            "graph", &b, "dsep", "U_X", "U_Y", "--given", "U"
        ])),
        0
    );
    assert_eq!(code(&effcov(&["graph", &b, "dsep", "U_X", "U_Y"])), 1);
}

#[test]
fn graph_parse_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "A -> B\nB -> C\nC => A\n");
    let o = effcov(&["graph", &bad, "paths", "A", "C"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");
    let cyc = write(dir.path(), "cyc.txt", "A -> B\nB -> A\n");
    assert_eq!(code(&effcov(&["graph", &cyc, "paths", "A", "B"])), 2);
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = effcov(&[
            "--seed",
            "7",
            "--threads",
            threads,
            "simulate",
            "--preset",
            "strength-full",
            "--n",
            "175000",
            "-o",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8(o.stderr).unwrap().contains("seed=7"));
        fs::read(out).unwrap()
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "3");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 175_001);
    assert_eq!(text.lines().next(), Some("z,x,y"));
    let o = effcov(&["simulate", "--preset", "strength-full", "--n", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_scm_and_params_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = effcov(&[
        "simulate",
        "--preset",
        "mixture",
        "--n",
        "10",
        "--obs-per-unit",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 21);
    let params = write(
        dir.path(),
        "p.toml",
        &effcov::linear::LinearModelParams::strength_full().to_toml(),
    );
    let o = effcov(&["simulate", "--params", &params, "--n", "24", "--balanced"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 25);
    let broken = write(dir.path(), "q.toml", "mu_x = 1\n");
    assert_eq!(
        code(&effcov(&["simulate", "--params", &broken, "--n", "5"])),
        2
    );
}

#[test]
fn lrt_from_reported_likelihoods() {
    let o = effcov(&[
        "lrt",
        "--ll-full",
        "1757916.56",
        "--ll-reduced",
        "1757909.735",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("D = 13.65"), "{}", stdout(&o));
    let o = effcov(&[
        "--format",
        "machine",
        "lrt",
        "--ll-full",
        "-10",
        "--ll-reduced",
        "-10",
    ]);
    let kv = KvReport::parse(&stdout(&o)).unwrap();
    assert_eq!(kv.get_f64("lrt.statistic").unwrap(), 0.0);
    assert_eq!(kv.get_f64("lrt.p_value").unwrap(), 1.0);
    assert_eq!(
        code(&effcov(&["lrt", "--ll-full", "-10", "--ll-reduced", "-9"])),
        3
    );
}

#[test]
fn fit_compare_moments_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let data = data.to_str().unwrap();
    assert_eq!(
        code(&effcov(&[
            "--seed",
            "3",
            "simulate",
            "--preset",
            "strength-full",
            "--n",
            "6000",
            "-o",
            data
        ])),
        0
    );
    let params = dir.path().join("params");
    let o = effcov(&[
        "--format",
        "machine",
        "fit",
        data,
        "--compare",
        "--starts",
        "4",
        "--save-params",
        params.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let kv = KvReport::parse(&stdout(&o)).unwrap();
    let full = kv.get_f64("full.log_likelihood").unwrap();
    let reduced = kv.get_f64("reduced.log_likelihood").unwrap();
    assert!(full >= reduced - 1e-6);
    assert!(
        (kv.get_f64("lrt.statistic").unwrap() - 2.0 * (full - reduced)).abs() < 1e-6 * full.abs()
    );
    assert_eq!(kv.get("full.n_obs"), Some("6000"));
    assert!(kv.get("reduced.param.cov_bxby").is_none());
    let (f, r) = (params.join("full.toml"), params.join("reduced.toml"));
    assert!(f.exists() && r.exists());

    let bare = dir.path().join("bare");
    let o = effcov(&[
        "moments",
        data,
        "--n-boot",
        "50",
        "-o",
        bare.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let panels = ["mean_x", "mean_y", "var_x", "var_y", "cov_xy"];
    for p in panels {
        let t = fs::read_to_string(bare.join(format!("{p}.csv"))).unwrap();
        assert_eq!(t.lines().next(), Some("z,n,estimate,lower,upper"));
    }
    let over = dir.path().join("over");
    let o = effcov(&[
        "moments",
        data,
        "--n-boot",
        "50",
        "--full",
        f.to_str().unwrap(),
        "--reduced",
        r.to_str().unwrap(),
        "-o",
        over.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(&over).unwrap().count(), 5);
    let cov = fs::read_to_string(over.join("cov_xy.csv")).unwrap();
    assert_eq!(
        cov.lines().next(),
        Some("z,n,estimate,lower,upper,full,reduced")
    );
    assert_eq!(cov.lines().count(), 13);
}

#[test]
fn cov_panel_curves_upwards_on_full_model_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let data = data.to_str().unwrap();
    effcov(&[
        "--seed",
        "5",
        "simulate",
        "--preset",
        "strength-full",
        "--n",
        "240000",
        "--balanced",
        "-o",
        data,
    ]);
    let out = dir.path().join("m");
    assert_eq!(
        code(&effcov(&[
            "moments",
            data,
            "--n-boot",
            "20",
            "-o",
            out.to_str().unwrap()
        ])),
        0
    );
    let cov: Vec<(f64, f64)> = fs::read_to_string(out.join("cov_xy.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[2])
        })
        .collect();
    // second difference of the cov curve, smoothed over the twelve levels by
    // comparing the outer thirds with the middle third
    let third = |k: usize| cov[4 * k..4 * k + 4].iter().map(|c| c.1).sum::<f64>() / 4.0;
    let second = third(2) - 2.0 * third(1) + third(0);
    assert!(second > 0.0, "{second}");
}

#[test]
fn fit_filters_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let data = data.to_str().unwrap();
    effcov(&[
        "--seed",
        "1",
        "simulate",
        "--preset",
        "strength-full",
        "--n",
        "3000",
        "-o",
        data,
    ]);
    let o = effcov(&[
        "--format",
        "machine",
        "fit",
        data,
        "--reduced",
        "--starts",
        "2",
        "--filter",
        "z:64:69",
    ]);
    assert_eq!(code(&o), 0);
    let kv = KvReport::parse(&stdout(&o)).unwrap();
    assert_eq!(kv.get("n_levels"), Some("6"));
    assert_eq!(kv.get("model"), Some("reduced"));
    assert_eq!(code(&effcov(&["fit", data, "--starts", "0"])), 2);
    assert_eq!(code(&effcov(&["fit", data, "--filter", "nonsense"])), 2);
    assert_eq!(code(&effcov(&["fit", "/nonexistent.csv"])), 2);
    assert_eq!(code(&effcov(&["fit", data, "--z-col", "weight"])), 2);
    let tiny = write(dir.path(), "tiny.csv", "z,x,y\n1,1,1\n2,2,2\n");
    assert_eq!(code(&effcov(&["fit", &tiny])), 3);
    assert_eq!(
        code(&effcov(&["fit", data, "--starts", "1", "--max-iter", "5"])),
        3
    );
}

#[test]
fn unknown_flags_fail_and_help_lists_flags() {
    assert_eq!(code(&effcov(&["demo-example", "--bogus"])), 2);
    assert_eq!(code(&effcov(&["frobnicate"])), 2);
    let expected: &[(&[&str], &[&str])] = &[
        (
            &["demo-example"],
            &["--mode", "--csv", "--seed", "--threads", "--format"],
        ),
        (
            &["simulate"],
            &[
                "--params",
                "--scm",
                "--preset",
                "--n",
                "--obs-per-unit",
                "--levels",
                "--balanced",
                "--out",
            ],
        ),
        (
            &["fit"],
            &[
                "--z-col",
                "--x-col",
                "--y-col",
                "--filter",
                "--reduced",
                "--compare",
                "--starts",
                "--tolerance",
                "--max-iter",
                "--dispersion",
                "--bootstrap",
                "--save-params",
                "--out",
            ],
        ),
        (
            &["moments"],
            &[
                "--n-boot",
                "--bin-width",
                "--full",
                "--reduced",
                "--out",
                "--filter",
            ],
        ),
        (&["lrt"], &["--ll-full", "--ll-reduced"]),
        (&["graph", "f", "backdoor"], &["--given"]),
        (&["graph", "f", "dsep"], &["--given"]),
    ];
    for (cmd, flags) in expected {
        let mut args: Vec<&str> = cmd.to_vec();
        args.push("--help");
        let o = effcov(&args);
        assert_eq!(code(&o), 0, "{args:?}");
        let s = stdout(&o);
        for f in *flags {
            assert!(s.contains(f), "{args:?} help lacks {f}:\n{s}");
        }
    }
}

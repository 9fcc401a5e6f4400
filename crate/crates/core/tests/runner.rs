use jumpsmp::credit::{BenchmarkSettings, CreditMarketSpec};
use jumpsmp::max_principle::OptimizerConfig;
use jumpsmp::noise::NoiseModel;
use jumpsmp::runner::config::TargetSpec;
use jumpsmp::runner::{parse_config, run_experiment, write_report, Check, ExperimentConfig, ExperimentKind, RunReport};

const DUALITY: &str = r#"
kind = "duality"
seed = 42
paths = 2000
noise.kind = "compensated_poisson"
noise.intensities = [2.0]
target.kind = "terminal_count"
"#;

fn value(report: &RunReport, name: &str) -> f64 {
    report.values.iter().find(|(k, _)| k == name).map(|(_, v)| *v).unwrap()
}

#[test]
fn minimal_config_echoes_seed() {
    let cfg = parse_config(DUALITY).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.kind, ExperimentKind::Duality);
    assert_eq!(parse_config(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn unknown_and_missing_keys_are_rejected() {
    let err = parse_config(&format!("{DUALITY}foo = 1\n")).unwrap_err().to_string();
    assert!(err.contains("foo"), "{err}");
    let err = parse_config(&DUALITY.replace("seed = 42\n", ""))
        .unwrap_err()
        .to_string();
    assert!(err.contains("seed"), "{err}");
    let err = parse_config(&DUALITY.replace("target.kind = \"terminal_count\"\n", ""))
        .unwrap_err()
        .to_string();
    assert!(err.contains("target"), "{err}");
    let err = parse_config("kind = \"duality\"\nseed = [").unwrap_err().to_string();
    assert!(err.contains("line"), "{err}");
}

#[test]
fn poisson_duality_run() {
    let mut cfg = parse_config(DUALITY).unwrap();
    cfg.seed = 7;
    cfg.paths = 100_000;
    let report = run_experiment(&cfg).unwrap();
    assert!(report.pass, "{}", report.table());
    let fit_se = value(&report, "rhs std error from the fitted coefficients");
    assert!(fit_se > 0.0);
    for (side, extra) in [("lhs", 0.0), ("rhs", fit_se)] {
        let (v, se) = (value(&report, side), value(&report, &format!("{side} std error")));
        let se = se.hypot(extra);
        assert!((v - 2.0).abs() <= 4.0 * se, "{side} = {v} +- {se}");
    }
    assert!(!report.stages.is_empty());
}

#[test]
fn small_credit_benchmark_reports_the_analytic_optimum() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::CreditBenchmark, 3);
    cfg.paths = 2000;
    cfg.market = Some(CreditMarketSpec::single(0.05, 0.02));
    cfg.benchmark = Some(BenchmarkSettings {
        pi_grid: vec![0.5, 0.7, 0.9],
        residual_points: vec![0.5],
        starts: vec![0.5],
        level: 2,
        optimizer: OptimizerConfig {
            max_iter: 2,
            ..BenchmarkSettings::default().optimizer
        },
        ..BenchmarkSettings::default()
    });
    let report = run_experiment(&cfg).unwrap();
    assert!((value(&report, "analytic optimum") - 5.0 / 7.0).abs() < 1e-15);
    assert!(value(&report, "optimizer estimate").is_finite());
    assert!(report.summary_json().unwrap().contains("0.714285"));
    assert!(report.table().contains("analytic optimum = 0.714285"));
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Representation, 11);
    cfg.paths = 3000;
    cfg.noise = Some(NoiseModel::Brownian);
    cfg.target = Some(TargetSpec::TerminalNoiseSquared { mark: 0 });
    cfg.dissecting.levels = vec![1, 2];
    let run = |t: usize| {
        let mut c = cfg.clone();
        c.threads = Some(t);
        let r = run_experiment(&c).unwrap();
        (
            serde_json::to_string(&r.checks).unwrap(),
            serde_json::to_string(&r.values).unwrap(),
        )
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn written_report_files_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = RunReport::new(parse_config(DUALITY).unwrap());
    let json: serde_json::Value = serde_json::from_str(&r.summary_json().unwrap()).unwrap();
    assert_eq!(json["checks"].as_array().unwrap().len(), 0);
    assert_eq!(json["pass"], true);
    assert_eq!(r.exit_code(), 0);
    for (k, name) in ["first", "second", "third"].into_iter().enumerate() {
        r.check(Check::within(name, k as f64, 1.0, 0.5, None));
    }
    r.artifact("artifacts/numbers.csv", b"a,b\n1,2\n".to_vec());
    assert_ne!(r.exit_code(), 0);
    let files = write_report(&r, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.ends_with("PASS") || l.ends_with("FAIL"))
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("first") && rows[1].starts_with("second") && rows[2].starts_with("third"));
    assert_eq!(
        std::fs::read(dir.path().join("artifacts/numbers.csv")).unwrap(),
        b"a,b\n1,2\n"
    );
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], false);
    assert_eq!(json["artifacts"][0], "artifacts/numbers.csv");
}

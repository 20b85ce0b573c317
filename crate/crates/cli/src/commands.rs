use std::fs;
use std::path::{Path, PathBuf};

use berlab_core::bandit::{run_bandit, AgentState, BanditEnv, OraclePolicy, Policy, UniformPolicy};
use berlab_core::data::{gen_cubic, load_csv, standardize_split};
use berlab_core::metrics::evaluate;
use berlab_core::objectives::train;
use berlab_core::rng;
use berlab_core::scan::lambda_scan;
use berlab_core::study::{convergence_study, DataSource};
use berlab_core::verify::{run_suite, Sabotage};
use serde::Serialize;

use crate::config::{EnvSpec, PolicyKind, RunConfig, TrainData};
use crate::svg::{Chart, Series};

pub enum Failure {
    /// Bad flags or config; exit code 2.
    Usage(String),
    /// A verification check failed; exit code 1.
    Check(String),
    /// A module returned an error; exit code 1.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) | Failure::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Check(_) => "check_failed",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<berlab_core::Error> for Failure {
    fn from(e: berlab_core::Error) -> Self {
        match e {
            berlab_core::Error::InvalidSpec(_) | berlab_core::Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    threads: Option<usize>,
    artifacts: Vec<String>,
}

/// Output directory that records what was written into it.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CmdResult {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    fn write_csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CmdResult {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    /// Resolved config and manifest; called once per run, before the
    /// command's own outputs so a failed run is still self-describing.
    pub fn describe(&mut self, cfg: &RunConfig, subcommand: &str, seed: u64, threads: Option<usize>) -> CmdResult {
        let text = cfg.to_toml().map_err(Failure::Runtime)?;
        self.write("config.resolved.toml", text)?;
        self.write_manifest(subcommand, seed, threads)
    }

    pub fn write_manifest(&mut self, subcommand: &str, seed: u64, threads: Option<usize>) -> CmdResult {
        let mut files: Vec<String> = self.files.iter().filter(|f| *f != "manifest.json").cloned().collect();
        files.push("manifest.json".into());
        files.sort();
        files.dedup();
        let m = Manifest {
            tool: "berlab",
            version: berlab_core::VERSION,
            subcommand,
            seed,
            threads,
            artifacts: files,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        if !self.files.iter().any(|f| f == "manifest.json") {
            self.files.push("manifest.json".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ToySummary {
    fitted_slope: Option<f64>,
    spearman_ber_r: Option<f64>,
    entropy_gap_first: f64,
    entropy_gap_last: f64,
    failed_rows: usize,
}

pub fn toy(cfg: &RunConfig, out: &mut Artifacts) -> CmdResult {
    let res = convergence_study(&cfg.toy)?;
    out.write_csv("risks.csv", |b| res.write_csv(b))?;
    out.write_csv("metrics.csv", |b| res.write_metrics_csv(b))?;
    let series = |name: &str, f: fn(&berlab_core::study::StudyRow) -> f64| Series {
        name: name.into(),
        points: res.rows.iter().filter(|r| r.ok()).map(|r| (r.n as f64, f(r))).collect(),
    };
    let chart = Chart {
        title: "Excess risks versus training size".into(),
        x_label: "N (training points)".into(),
        y_label: "squared-loss risk".into(),
        log_x: true,
        log_y: true,
        series: vec![series("R", |r| r.r), series("PER", |r| r.per), series("BER", |r| r.ber)],
    };
    out.write("convergence.svg", chart.render())?;
    let failed = res.rows.iter().filter(|r| !r.ok()).count();
    let summary = ToySummary {
        fitted_slope: res.fitted_slope,
        spearman_ber_r: res.spearman_ber_r,
        entropy_gap_first: res.rows.first().map_or(f64::NAN, |r| r.entropy_gap),
        entropy_gap_last: res.rows.last().map_or(f64::NAN, |r| r.entropy_gap),
        failed_rows: failed,
    };
    out.write_json("summary.json", &summary)?;
    match res.fitted_slope {
        Some(s) => println!("fitted_slope {s}"),
        None => println!("fitted_slope n/a"),
    }
    if let Some(rho) = res.spearman_ber_r {
        println!("spearman_ber_r {rho}");
    }
    if failed > 0 {
        eprintln!("warning: {failed} grid point(s) failed; see risks.csv");
    }
    Ok(())
}

pub fn verify(cfg: &RunConfig, sabotage: Sabotage, out: &mut Artifacts) -> CmdResult {
    let vcfg = berlab_core::verify::VerifyConfig {
        sabotage,
        ..cfg.verify.clone()
    };
    let report = run_suite(&vcfg)?;
    out.write_json("verify.json", &report)?;
    print!("{}", report.table());
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed checks: {}", report.failures().join(", "))))
    }
}

pub fn train_cmd(cfg: &RunConfig, out: &mut Artifacts) -> CmdResult {
    let s = &cfg.train;
    let seed = s.fit.seed;
    let data_seed = rng::derive_seed(seed, rng::stream::DATA_X);
    let data = match &s.data {
        TrainData::Cubic { n } => gen_cubic(*n, data_seed).data,
        TrainData::Teacher {
            n,
            layer_widths,
            activation,
            noise_var,
            teacher_seed,
        } => {
            DataSource::Teacher {
                layer_widths: layer_widths.clone(),
                activation: *activation,
                noise_var: *noise_var,
                teacher_seed: *teacher_seed,
            }
            .generate(*n, data_seed)?
            .data
        }
        TrainData::Csv { path, target } => load_csv(path, target)?.0,
    };
    let (tr, test) = standardize_split(&data, s.train_frac, rng::derive_seed(seed, rng::stream::SPLIT))?;
    let (e, history) = train(&s.fit, &tr)?;
    let report = evaluate(&e, &test, s.level, s.interval_method)?;
    out.write("checkpoint.json", e.to_json()?)?;
    out.write_json("metrics.json", &report)?;
    out.write(
        "metrics.csv",
        format!("{}\n{}\n", berlab_core::MetricReport::CSV_HEADER, report.csv_row()),
    )?;
    out.write_csv("history.csv", |b| history.write_csv(b))?;
    println!(
        "rmse {} nll {} picp {} mpiw {}",
        report.rmse,
        report.nll,
        report.picp,
        report.mpiw.map_or_else(|| "n/a".to_string(), |v| v.to_string())
    );
    Ok(())
}

#[derive(Serialize)]
struct ScanJson<'a> {
    level: f64,
    selected_lambda: f64,
    picp_nonincreasing_fraction: f64,
    mpiw_nonincreasing_fraction: f64,
    summary: &'a [berlab_core::scan::ScanSummary],
}

pub fn lambda_scan_cmd(cfg: &RunConfig, out: &mut Artifacts) -> CmdResult {
    let res = lambda_scan(&cfg.lambda_scan)?;
    out.write_csv("lambda_scan.csv", |b| res.write_csv(b))?;
    out.write_json(
        "summary.json",
        &ScanJson {
            level: cfg.lambda_scan.level,
            selected_lambda: res.selected_lambda,
            picp_nonincreasing_fraction: res.nonincreasing_fraction(|r| r.test_picp),
            mpiw_nonincreasing_fraction: res.nonincreasing_fraction(|r| r.test_mpiw),
            summary: &res.summary,
        },
    )?;
    let chart = Chart {
        title: "Interval coverage versus variance penalty".into(),
        x_label: "lambda".into(),
        y_label: "PICP".into(),
        log_x: false,
        log_y: false,
        series: vec![
            Series {
                name: "test".into(),
                points: res.summary.iter().map(|s| (s.lambda, s.test_picp)).collect(),
            },
            Series {
                name: "validation".into(),
                points: res.summary.iter().map(|s| (s.lambda, s.val_picp)).collect(),
            },
        ],
    };
    out.write("picp_vs_lambda.svg", chart.render())?;
    println!("selected_lambda {}", res.selected_lambda);
    Ok(())
}

pub fn bandit_cmd(cfg: &RunConfig, out: &mut Artifacts) -> CmdResult {
    let b = &cfg.bandit;
    let seed = b.agent.train.seed;
    let env_seed = rng::derive_seed(seed, rng::stream::ENV_WEIGHTS);
    let env = match &b.env {
        EnvSpec::SyntheticLinear { dim, k_arms, noise_sd } => {
            BanditEnv::synthetic_linear(*dim, *k_arms, *noise_sd, env_seed)?
        }
        EnvSpec::ClassificationCsv { path, label_column } => {
            BanditEnv::classification_csv(path, label_column, env_seed)?
        }
    };
    let mut policy: Box<dyn Policy> = match b.policy {
        PolicyKind::Thompson => Box::new(AgentState::new(env.dim(), env.k_arms(), b.agent.clone())?),
        PolicyKind::Uniform => Box::new(UniformPolicy::new(env.k_arms(), rng::derive_seed(seed, 1))),
        PolicyKind::Oracle => Box::new(OraclePolicy),
    };
    let rec = run_bandit(&env, policy.as_mut(), b.steps, seed)?;
    out.write_csv("trajectory.csv", |w| rec.write_csv(w))?;
    out.write("regret.json", rec.summary_json()? + "\n")?;
    let mut cum = 0.0;
    let points = rec
        .trajectory
        .iter()
        .enumerate()
        .map(|(t, s)| {
            cum += s.regret;
            ((t + 1) as f64, cum)
        })
        .collect();
    let chart = Chart {
        title: "Cumulative pseudo-regret".into(),
        x_label: "step".into(),
        y_label: "regret".into(),
        log_x: false,
        log_y: false,
        series: vec![Series { name: "agent".into(), points }],
    };
    out.write("regret.svg", chart.render())?;
    println!("relative_regret {}", rec.relative);
    Ok(())
}

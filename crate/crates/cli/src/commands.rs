use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use po2pls::em::{self, FitConfig, FitResult};
use po2pls::inference::{global_test, ResampleConfig, TestMethod, TestResult};
use po2pls::io::{
    numbered_header, read_csv, scree as scree_series, write_csv, write_scree_csv, FitMeta,
    ModelFile, Preprocessing,
};
use po2pls::simulation::{
    gen_scenario, run_accuracy_study, run_power_study, run_type1_study, write_long_csv,
    write_power_csv, write_rates_csv, PowerStudyOptions, ScenarioConfig,
};
use po2pls::{
    log_likelihood, predict_scores, predict_scores_from_x, predict_y_from_x, DataPair, RankSpec,
    Result,
};
use serde::Deserialize;

use crate::{FitArgs, PredictArgs, ScreeArgs, SimulateArgs, TestArgs};

fn read_pair(x: &Path, y: &Path) -> Result<DataPair> {
    let x = read_csv(x)?.values;
    let y = read_csv(y)?.values;
    DataPair::new(x, y)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Root mean squared prediction error in the original units of `Y`.
fn original_rmsep(model: &ModelFile, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let y_hat = predict_original(model, x)?;
    Ok(((y - y_hat).norm_squared() / y.nrows().max(1) as f64).sqrt())
}

fn predict_original(model: &ModelFile, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pre = &model.meta.preprocessing;
    let x_model = pre.transform_x(x)?;
    Ok(pre.inverse_y(&predict_y_from_x(&model.theta, &x_model)?))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let raw = read_pair(&a.data.x, &a.data.y)?;
    let ranks = RankSpec::new(raw.p(), raw.q(), a.r, a.rx, a.ry)?;
    let (data, preprocessing) = Preprocessing::fit(&raw, a.scale);
    let config = FitConfig {
        max_iter: a.max_iter,
        tol: a.tol,
        init: a.init_strategy(),
        record_trace: true,
    };
    let res = em::fit(&data, ranks, &config)?;
    let model = ModelFile {
        theta: res.theta.clone(),
        meta: FitMeta {
            n_iter: res.n_iter,
            converged: res.converged,
            loglik: res.loglik,
            tol: a.tol,
            preprocessing,
        },
    };
    model.save(&a.out)?;

    let trace_path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".trace.csv"));
    let trace = DMatrix::from_fn(res.loglik_trace.len(), 2, |i, j| {
        if j == 0 {
            i as f64
        } else {
            res.loglik_trace[i]
        }
    });
    write_csv(&trace_path, &["iteration".to_owned(), "loglik".to_owned()], &trace)?;

    let rmsep = original_rmsep(&model, &raw.x, &raw.y)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "n_iter,{}", res.n_iter)?;
    writeln!(out, "converged,{}", res.converged)?;
    writeln!(out, "loglik,{}", fmt(res.loglik))?;
    writeln!(out, "variance_floor_hit,{}", res.variance_floor_hit)?;
    writeln!(out, "rmsep_train,{}", fmt(rmsep))?;
    for k in 0..ranks.r {
        writeln!(out, "b_{},{}", k + 1, fmt(res.theta.b[k]))?;
    }
    Ok(())
}

/// Readable p-value: four decimals, or scientific notation below 1e-4.
fn format_p(p: f64) -> String {
    if p >= 1e-4 {
        format!("{p:.4}")
    } else {
        format!("{p:.2e}")
    }
}

fn print_test(t: &TestResult) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "method: {}  resamples: {}  failed: {}",
        t.method.name(),
        t.n_resamples,
        t.n_failed
    )?;
    writeln!(out, "{:>9} {:>12} {:>12} {:>10} {:>10}", "component", "B_hat", "SE", "T_B", "p_value")?;
    for (k, c) in t.components.iter().enumerate() {
        writeln!(
            out,
            "{:>9} {:>12.6} {:>12.6} {:>10.3} {:>10}",
            k + 1,
            c.b_hat,
            c.se,
            c.t_stat,
            format_p(c.p_value)
        )?;
    }
    writeln!(out, "combined p_value (Bonferroni): {}", format_p(t.combined_p))?;
    Ok(())
}

fn write_test_csv(path: &Path, t: &TestResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "component,b_hat,se,t_stat,p_value,method,n_resamples,n_failed")?;
    for (k, c) in t.components.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            k + 1,
            fmt(c.b_hat),
            fmt(c.se),
            fmt(c.t_stat),
            fmt(c.p_value),
            t.method.name(),
            t.n_resamples,
            t.n_failed
        )?;
    }
    writeln!(
        w,
        "combined,,,,{},{},{},{}",
        fmt(t.combined_p),
        t.method.name(),
        t.n_resamples,
        t.n_failed
    )?;
    w.flush()?;
    Ok(())
}

pub fn test(a: &TestArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let raw = read_pair(&a.data.x, &a.data.y)?;
    let pre = &model.meta.preprocessing;
    let data = DataPair::new(pre.transform_x(&raw.x)?, pre.transform_y(&raw.y)?)?;
    let fitted = FitResult::evaluate(model.theta.clone(), &data)?;
    let method = TestMethod::from(a.method);
    let mut resample = ResampleConfig::for_method(method, a.seed);
    resample.fit.tol = model.meta.tol;
    if let Some(n) = a.n_resamples {
        resample.n_resamples = n;
    }
    let result = global_test(&fitted, &data, method, &resample)?;
    print_test(&result)?;
    if let Some(path) = &a.out {
        write_test_csv(path, &result)?;
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let x = read_csv(&a.x)?.values;
    let y_hat = predict_original(&model, &x)?;
    let ranks = model.theta.ranks();
    write_csv(&a.out, &numbered_header("y", ranks.q), &y_hat)?;

    if let Some(path) = &a.scores {
        let pre = &model.meta.preprocessing;
        let x_model = pre.transform_x(&x)?;
        let scores = match &a.y {
            Some(y_path) => {
                let y = read_csv(y_path)?.values;
                let data = DataPair::new(x_model, pre.transform_y(&y)?)?;
                predict_scores(&model.theta, &data)?
            }
            None => predict_scores_from_x(&model.theta, &x_model)?,
        };
        let blocks = [
            ("t", &scores.t),
            ("u", &scores.u),
            ("t_perp", &scores.t_perp),
            ("u_perp", &scores.u_perp),
        ];
        let n = x.nrows();
        let width: usize = blocks.iter().map(|(_, m)| m.ncols()).sum();
        let mut all = DMatrix::zeros(n, width);
        let mut header = Vec::with_capacity(width);
        let mut col = 0;
        for (name, m) in blocks {
            all.columns_mut(col, m.ncols()).copy_from(m);
            header.extend(numbered_header(&format!("{name}_"), m.ncols()));
            col += m.ncols();
        }
        write_csv(path, &header, &all)?;
    }
    Ok(())
}

pub fn scree(a: &ScreeArgs) -> Result<()> {
    let raw = read_pair(&a.data.x, &a.data.y)?;
    let (data, _) = Preprocessing::fit(&raw, a.scale);
    let s = scree_series(&data);
    write_scree_csv(create(&a.out)?, &s)
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum StudySpec {
    Accuracy,
    Type1 {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Power {
        effects: Vec<f64>,
        methods: Vec<String>,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        n_bootstrap: Option<usize>,
        #[serde(default)]
        n_permutations: Option<usize>,
    },
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
struct SimulateSpec {
    #[serde(flatten)]
    scenario: ScenarioConfig,
    #[serde(default)]
    study: Option<StudySpec>,
}

fn write_data(prefix: &str, name: &str, data: &DataPair) -> Result<()> {
    let rk = (data.p(), data.q());
    write_csv(format!("{prefix}{name}_x.csv"), &numbered_header("x", rk.0), &data.x)?;
    write_csv(format!("{prefix}{name}_y.csv"), &numbered_header("y", rk.1), &data.y)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.scenario_json)?;
    let spec: SimulateSpec = serde_json::from_str(&text)?;
    let config = spec.scenario;
    config.validate()?;
    let prefix = &a.out_prefix;

    let sc = gen_scenario(&config)?;
    write_data(prefix, "train", &sc.train)?;
    if sc.test.n() > 0 {
        write_data(prefix, "test", &sc.test)?;
    }
    let rk = config.ranks;
    let truth = ModelFile {
        theta: sc.theta.clone(),
        meta: FitMeta {
            n_iter: 0,
            converged: true,
            loglik: log_likelihood(&sc.theta, &sc.train)?,
            tol: FitConfig::default().tol,
            preprocessing: Preprocessing {
                x_means: nalgebra::DVector::zeros(rk.p),
                y_means: nalgebra::DVector::zeros(rk.q),
                x_scales: None,
                y_scales: None,
            },
        },
    };
    truth.save(format!("{prefix}theta.po2pls"))?;

    let fit_config = FitConfig {
        record_trace: false,
        ..FitConfig::default()
    };
    match spec.study {
        None => {}
        Some(StudySpec::Accuracy) => {
            let records = run_accuracy_study(&config, &fit_config)?;
            write_long_csv(create(Path::new(&format!("{prefix}accuracy.csv")))?, &config, &records)?;
        }
        Some(StudySpec::Type1 { alpha }) => {
            let report = run_type1_study(&config, &fit_config, alpha)?;
            write_long_csv(create(Path::new(&format!("{prefix}type1.csv")))?, &config, &report.records)?;
            write_rates_csv(create(Path::new(&format!("{prefix}type1_rates.csv")))?, &report.rates)?;
        }
        Some(StudySpec::Power {
            effects,
            methods,
            alpha,
            n_bootstrap,
            n_permutations,
        }) => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<TestMethod>())
                .collect::<Result<Vec<_>>>()?;
            let defaults = PowerStudyOptions::default();
            let options = PowerStudyOptions {
                alpha,
                n_bootstrap: n_bootstrap.unwrap_or(defaults.n_bootstrap),
                n_permutations: n_permutations.unwrap_or(defaults.n_permutations),
            };
            let rows = run_power_study(&config, &effects, &methods, &fit_config, &options)?;
            write_power_csv(create(Path::new(&format!("{prefix}power.csv")))?, &rows)?;
        }
    }
    Ok(())
}

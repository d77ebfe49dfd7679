//! The subcommands as library functions. `main` only parses arguments and
//! prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cgnp_core::gpgen::{Episode, EpisodeGenerator};
use cgnp_core::npmodels::{Model, ModelKind};
use cgnp_core::trainer::{evaluate, train_with_progress, Metrics, TrainReport};

use crate::formats::{
    metrics_json, metrics_row, read_checkpoint, read_episodes, rho_field, write_atomic, write_checkpoint,
    write_episodes, METRICS_HEADER,
};
use crate::{CliError, Result, RunConfig};

/// Window of the training-loss moving average used for the reported drop.
pub const LOSS_WINDOW: usize = 1_000;

pub struct Generated {
    pub path: PathBuf,
    pub episodes: usize,
    pub sha256: String,
}

/// Writes the configured test set as a JSONL episode file.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Generated> {
    let gen = EpisodeGenerator::new(cfg.protocol(), cfg.kernel())?;
    let episodes = gen.test_set()?;
    let sha256 = write_episodes(out, &episodes)?;
    Ok(Generated {
        path: out.to_path_buf(),
        episodes: episodes.len(),
        sha256,
    })
}

pub struct Trained {
    pub report: TrainReport,
    pub model: Model,
    /// Metrics on `paths.test_data`, when configured.
    pub test: Option<(Metrics, String)>,
}

/// Trains one model and writes `checkpoint.json`, `loss.csv` and
/// `metrics.csv` (held-out curve) into `out_dir`. `log` receives one
/// `batch=<i> loss=<v>` line per evaluation period, where the loss is the
/// mean since the previous line.
pub fn train(cfg: &RunConfig, out_dir: &Path, mut log: impl FnMut(&str)) -> Result<Trained> {
    let mut window_sum = 0.0;
    let mut window_len = 0usize;
    let (report, model) = train_with_progress(&cfg.train_config(), |b, loss, holdout| {
        window_sum += loss;
        window_len += 1;
        if holdout.is_some() {
            log(&format!("batch={} loss={}", b + 1, window_sum / window_len as f64));
            window_sum = 0.0;
            window_len = 0;
        }
    })?;

    write_checkpoint(&out_dir.join("checkpoint.json"), cfg, &model)?;

    let mut loss_csv = String::from("batch,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(loss_csv, "{},{}", i + 1, l);
    }
    write_atomic(&out_dir.join("loss.csv"), loss_csv.as_bytes())?;

    let mut metrics_csv = format!("# {}\nbatch,nll_per_point,nll_per_episode,mse,episode_count\n", cfg.summary());
    for (b, m) in &report.holdout {
        let _ = writeln!(
            metrics_csv,
            "{},{},{},{},{}",
            b + 1,
            m.nll_per_point,
            m.nll_per_episode,
            m.mse,
            m.episode_count
        );
    }
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv.as_bytes())?;

    let test = match cfg.paths.get("test_data") {
        Some(p) => {
            let (episodes, sha) = read_episodes(Path::new(p))?;
            let m = evaluate(&model, &episodes)?;
            let body = format!(
                "# test_sha256={sha} {}\n{METRICS_HEADER}\n{}\n",
                cfg.summary(),
                metrics_row(cfg, &m)
            );
            write_atomic(&out_dir.join("test_metrics.csv"), body.as_bytes())?;
            Some((m, sha))
        }
        None => None,
    };
    Ok(Trained { report, model, test })
}

pub struct Evaluated {
    pub config: RunConfig,
    pub metrics: Metrics,
    pub data_sha256: String,
    /// Single-line JSON record of the result.
    pub record: String,
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<Evaluated> {
    let (config, model) = read_checkpoint(checkpoint)?;
    let (episodes, sha) = read_episodes(data)?;
    let metrics = evaluate(&model, &episodes)?;
    if let Some(out) = out {
        let body = format!(
            "# test_sha256={sha} {}\n{METRICS_HEADER}\n{}\n",
            config.summary(),
            metrics_row(&config, &metrics)
        );
        write_atomic(out, body.as_bytes())?;
    }
    let record = metrics_json(&config, &metrics, &sha);
    Ok(Evaluated {
        config,
        metrics,
        data_sha256: sha,
        record,
    })
}

/// One trained variant of a comparison.
pub struct CompareRun {
    pub config: RunConfig,
    pub seed: u64,
    pub metrics: Metrics,
    pub report: TrainReport,
}

impl CompareRun {
    pub fn loss_drop(&self) -> f64 {
        self.report.moving_average_drop(LOSS_WINDOW)
    }
}

pub struct Comparison {
    pub runs: Vec<CompareRun>,
    pub test_path: PathBuf,
    pub test_sha256: String,
    pub table: String,
}

/// The three compared variants derived from `cfg`: the plain model, the
/// graph model at the configured radius and the graph model at radius 0.
pub fn variants(cfg: &RunConfig) -> [RunConfig; 3] {
    let with = |kind, radius| RunConfig {
        kind,
        radius,
        ..cfg.clone()
    };
    [
        with(ModelKind::Cnp, cfg.radius),
        with(ModelKind::Cgnp, cfg.radius),
        with(ModelKind::Cgnp, 0.0),
    ]
}

/// Trains every variant for seeds `0..seeds` (data and init seeds offset by
/// the seed) and evaluates all of them on one shared test file. The test
/// file is `paths.test_data` if configured (generated there if missing),
/// otherwise `<out>.test.jsonl`.
pub fn compare(
    cfg: &RunConfig,
    seeds: u64,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<Comparison> {
    if seeds == 0 {
        return Err(CliError::Config("compare needs at least one seed".into()));
    }
    let test_path = match cfg.paths.get("test_data") {
        Some(p) => PathBuf::from(p),
        None => {
            let mut s = out.as_os_str().to_owned();
            s.push(".test.jsonl");
            PathBuf::from(s)
        }
    };
    if !test_path.exists() {
        generate(cfg, &test_path)?;
    }
    let (test_set, test_sha256) = read_episodes(&test_path)?;

    let mut runs = Vec::new();
    for s in 0..seeds {
        for v in variants(cfg) {
            let run_cfg = RunConfig {
                master_seed: cfg.master_seed + s,
                init_seed: cfg.init_seed + s,
                ..v
            };
            let (report, model) = train_with_progress(&run_cfg.train_config(), |_, _, _| {})?;
            let metrics = evaluate(&model, &test_set)?;
            log(&format!(
                "seed={s} model={} rho={} nll_per_point={} mse={} loss_drop={}",
                run_cfg.kind.as_str(),
                rho_field(&run_cfg),
                metrics.nll_per_point,
                metrics.mse,
                report.moving_average_drop(LOSS_WINDOW)
            ));
            runs.push(CompareRun {
                config: run_cfg,
                seed: s,
                metrics,
                report,
            });
        }
    }
    let table = compare_table(cfg, &runs, &test_sha256);
    write_atomic(out, table.as_bytes())?;
    Ok(Comparison {
        runs,
        test_path,
        test_sha256,
        table,
    })
}

pub const COMPARE_HEADER: &str = "model,rho,seed,nll_per_point,nll_per_episode,mse,loss_drop,test_sha256";

/// Sample mean and standard deviation; the deviation is NaN below two
/// samples.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn compare_table(cfg: &RunConfig, runs: &[CompareRun], sha: &str) -> String {
    let mut t = format!("# {}\n{COMPARE_HEADER}\n", cfg.summary());
    for r in runs {
        let _ = writeln!(
            t,
            "{},{},{},{},{},{},{},{sha}",
            r.config.kind.as_str(),
            rho_field(&r.config),
            r.seed,
            r.metrics.nll_per_point,
            r.metrics.nll_per_episode,
            r.metrics.mse,
            r.loss_drop()
        );
    }
    for v in variants(cfg) {
        let group: Vec<&CompareRun> = runs
            .iter()
            .filter(|r| r.config.kind == v.kind && r.config.radius == v.radius)
            .collect();
        let col = |f: &dyn Fn(&CompareRun) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let nll = col(&|r| r.metrics.nll_per_point);
        let nlle = col(&|r| r.metrics.nll_per_episode);
        let mse = col(&|r| r.metrics.mse);
        let drop = col(&|r| r.loss_drop());
        let kind = v.kind.as_str();
        let rho = rho_field(&v);
        let _ = writeln!(t, "{kind},{rho},mean,{},{},{},{},{sha}", nll.0, nlle.0, mse.0, drop.0);
        let _ = writeln!(t, "{kind},{rho},std,{},{},{},{},{sha}", nll.1, nlle.1, mse.1, drop.1);
    }
    t
}

pub const PLOT_HEADER: &str = "x,y_true,mu,sigma,is_context";

/// Predictions over every point of one episode, context points included,
/// sorted by x.
pub fn plot(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<usize> {
    let (_, model) = read_checkpoint(checkpoint)?;
    let (episodes, _) = read_episodes(data)?;
    let ep = episodes.get(index).ok_or(cgnp_core::Error::IndexOutOfRange {
        what: "episode",
        index,
        limit: episodes.len(),
    })?;
    let mut points: Vec<(f64, f64, bool)> = ep
        .x_c
        .iter()
        .zip(&ep.y_c)
        .map(|(&x, &y)| (x, y, true))
        .chain(ep.x_t.iter().zip(&ep.y_t).map(|(&x, &y)| (x, y, false)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let query = Episode {
        x_c: ep.x_c.clone(),
        y_c: ep.y_c.clone(),
        x_t: points.iter().map(|p| p.0).collect(),
        y_t: points.iter().map(|p| p.1).collect(),
    };
    let pred = model.predict(&query)?;
    let mut body = format!("{PLOT_HEADER}\n");
    for (i, (x, y, c)) in points.iter().enumerate() {
        let _ = writeln!(body, "{x},{y},{},{},{}", pred.mu[i], pred.sigma[i], u8::from(*c));
    }
    write_atomic(out, body.as_bytes())?;
    Ok(points.len())
}

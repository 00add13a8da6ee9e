//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clce_core::diagnostics::{cosine_distribution_binned, isotropy_score, pca_project_2d, IsotropyResult};
use clce_core::fewshot::{episode_seed, run_evaluation, EpisodeReport};
use clce_core::gradcheck::{run_case, CaseResult, GridSpec, GRADCHECK_TOLERANCE};
use clce_core::loss::{check_step, FdCoordinate, LossConfig};
use clce_core::model::{load_checkpoint, save_checkpoint, train, EncoderModel, StepRecord};
use clce_core::rng::derive_seed;
use clce_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Arm, ExperimentConfig, Splits};
use crate::output::{real, write_csv, write_json};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.clce";
pub const HISTORY_FILE: &str = "history.csv";
pub const FEWSHOT_REPORT_FILE: &str = "fewshot_report.json";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const ISOTROPY_FILE: &str = "isotropy.json";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Settings shared by every subcommand.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// 0 runs everything on the calling thread.
    pub threads: usize,
}

impl Context {
    /// Runs `f` on the requested pool. `f` is told whether it may fan out.
    fn run<T: Send>(&self, f: impl FnOnce(bool) -> T + Send) -> Result<T> {
        if self.threads == 0 {
            return Ok(f(false));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(|| f(true)))
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

/// Initializes a model from `seed` and trains it on `data`.
pub fn train_model(
    config: &ExperimentConfig,
    data: &clce_core::data::Dataset,
    loss: LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(EncoderModel, Vec<StepRecord>)> {
    let dims = config.model_dims(data.input_dim(), data.num_classes);
    let mut model = EncoderModel::new(&dims, derive_seed(seed, &[0]))?;
    let history = train(&mut model, data, &config.train_config(batch_size, loss, derive_seed(seed, &[1])))?;
    Ok((model, history))
}

fn embed_eval(model: &EncoderModel, splits: &Splits) -> Result<ndarray::Array2<f64>> {
    if model.dims().input_dim != splits.eval.input_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, dataset has {}",
            model.dims().input_dim,
            splits.eval.input_dim()
        )));
    }
    model.embed(splits.eval.features.view())
}

pub fn train_cmd(ctx: &Context, seed: u64) -> Result<()> {
    let cfg = &ctx.config;
    let splits = cfg.splits()?;
    let (model, history) = train_model(cfg, &splits.train, cfg.loss, cfg.train.batch_size, seed)?;
    let out = ctx.out_dir()?;
    save_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| vec![r.step.to_string(), r.epoch.to_string(), real(r.ce), real(r.lacln), real(r.clce)])
        .collect();
    write_csv(&out.join(HISTORY_FILE), &["step", "epoch", "ce", "lacln", "clce"], &rows)?;
    let last = history.last().expect("at least one step");
    println!(
        "trained {} steps; final ce {:.6} lacln {:.6} clce {:.6}; wrote {}",
        history.len(),
        last.ce,
        last.lacln,
        last.clce,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FewshotOutput<'a> {
    #[serde(flatten)]
    report: &'a EpisodeReport,
    eval_classes: &'a [usize],
}

pub fn eval_fewshot_cmd(ctx: &Context, checkpoint: &Path, seed: u64, per_episode: bool) -> Result<()> {
    let cfg = &ctx.config;
    let model = load_checkpoint(checkpoint)?;
    let splits = cfg.splits()?;
    let emb = embed_eval(&model, &splits)?;
    let labels = splits.eval_labels();
    let spec = cfg.fewshot.spec();
    let episodes = cfg.fewshot.episodes;
    let report = ctx.run(|parallel| run_evaluation(emb.view(), &labels, spec, episodes, seed, parallel))??;
    let out = ctx.out_dir()?;
    write_json(
        &out.join(FEWSHOT_REPORT_FILE),
        &FewshotOutput {
            report: &report,
            eval_classes: &splits.eval_classes,
        },
    )?;
    if per_episode {
        let rows: Vec<Vec<String>> = report
            .accuracies
            .iter()
            .enumerate()
            .map(|(e, &a)| vec![e.to_string(), episode_seed(seed, e).to_string(), real(a)])
            .collect();
        write_csv(&out.join(EPISODES_FILE), &["episode", "seed", "accuracy"], &rows)?;
    }
    println!(
        "{}-way {}-shot over {} episodes: mean {:.4} median {:.4} ci95 {:.4}",
        spec.way, spec.shot, report.episodes, report.mean, report.median, report.ci95
    );
    if report.single_episode {
        println!("single episode: no confidence interval");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    arm: Arm,
    lambda: f64,
    batch_size: usize,
    seed: u64,
}

struct CellOutcome {
    steps: usize,
    last: StepRecord,
    report: EpisodeReport,
    isotropy: IsotropyResult,
}

pub const SWEEP_HEADER: [&str; 19] = [
    "arm",
    "lambda",
    "effective_lambda",
    "tau",
    "hnm",
    "batch_size",
    "epochs",
    "seed",
    "way",
    "shot",
    "episodes",
    "steps",
    "final_ce",
    "final_lacln",
    "final_clce",
    "mean_accuracy",
    "median_accuracy",
    "ci95",
    "isotropy",
];

fn run_cell(cfg: &ExperimentConfig, splits: &Splits, cell: Cell, parallel: bool) -> Result<CellOutcome> {
    let loss = cell.arm.loss(&cfg.loss, cell.lambda);
    let (model, history) = train_model(cfg, &splits.train, loss, cell.batch_size, cell.seed)?;
    let emb = embed_eval(&model, splits)?;
    let report = run_evaluation(
        emb.view(),
        &splits.eval_labels(),
        cfg.fewshot.spec(),
        cfg.fewshot.episodes,
        cell.seed,
        parallel,
    )?;
    let isotropy = isotropy_score(emb.view())?;
    Ok(CellOutcome {
        steps: history.len(),
        last: *history.last().expect("at least one step"),
        report,
        isotropy,
    })
}

fn sweep_row(cfg: &ExperimentConfig, cell: Cell, outcome: &Result<CellOutcome>) -> Vec<String> {
    let loss = cell.arm.loss(&cfg.loss, cell.lambda);
    let mut row = vec![
        cell.arm.name().to_string(),
        real(cell.lambda),
        real(loss.lambda),
        real(loss.tau),
        loss.hnm_enabled.to_string(),
        cell.batch_size.to_string(),
        cfg.train.epochs.to_string(),
        cell.seed.to_string(),
        cfg.fewshot.way.to_string(),
        cfg.fewshot.shot.to_string(),
        cfg.fewshot.episodes.to_string(),
    ];
    match outcome {
        Ok(o) => {
            row.extend([
                o.steps.to_string(),
                real(o.last.ce),
                real(o.last.lacln),
                real(o.last.clce),
                real(o.report.mean),
                real(o.report.median),
                real(o.report.ci95),
                real(o.isotropy.score),
                "ok".into(),
                String::new(),
            ]);
        }
        Err(e) => {
            row.extend(std::iter::repeat_n(String::new(), 8));
            let status = match e {
                Error::Divergence { .. } => "diverged",
                _ => "failed",
            };
            row.extend([status.to_string(), e.to_string()]);
        }
    }
    row
}

pub fn sweep_cmd(ctx: &Context, seeds: &[u64]) -> Result<()> {
    let cfg = &ctx.config;
    let splits = cfg.splits()?;
    let mut cells = Vec::new();
    for &arm in &cfg.sweep.arms {
        for &lambda in &cfg.sweep.lambdas {
            for batch_size in cfg.sweep_batch_sizes() {
                for &seed in seeds {
                    cells.push(Cell {
                        arm,
                        lambda,
                        batch_size,
                        seed,
                    });
                }
            }
        }
    }
    let rows: Vec<Vec<String>> = ctx.run(|parallel| {
        let one = |cell: &Cell| sweep_row(cfg, *cell, &run_cell(cfg, &splits, *cell, parallel));
        if parallel {
            cells.par_iter().map(one).collect()
        } else {
            cells.iter().map(one).collect()
        }
    })?;
    let mut header = SWEEP_HEADER.to_vec();
    header.extend(["status", "error"]);
    let out = ctx.out_dir()?;
    write_csv(&out.join(SWEEP_FILE), &header, &rows)?;
    let failed = rows.iter().filter(|r| r[r.len() - 2] != "ok").count();
    println!("swept {} cells ({} failed); wrote {}", rows.len(), failed, out.join(SWEEP_FILE).display());
    Ok(())
}

pub fn diagnose_cmd(ctx: &Context, checkpoint: &Path, target_class: usize, seed: u64) -> Result<()> {
    let cfg = &ctx.config;
    let model = load_checkpoint(checkpoint)?;
    let splits = cfg.splits()?;
    let emb = embed_eval(&model, &splits)?;
    let labels = splits.eval_labels();
    let hist = cosine_distribution_binned(
        emb.view(),
        &labels,
        target_class,
        cfg.diagnose.max_pairs,
        seed,
        cfg.diagnose.bins,
    )?;
    let iso = isotropy_score(emb.view())?;
    let proj = pca_project_2d(emb.view())?;

    let out = ctx.out_dir()?;
    let rows: Vec<Vec<String>> = (0..hist.positive_counts.len())
        .map(|b| {
            vec![
                real(hist.bin_edges[b]),
                real(hist.bin_edges[b + 1]),
                hist.positive_counts[b].to_string(),
                hist.negative_counts[b].to_string(),
            ]
        })
        .collect();
    write_csv(&out.join(HISTOGRAM_FILE), &["bin_left", "bin_right", "pos_count", "neg_count"], &rows)?;
    write_json(&out.join(ISOTROPY_FILE), &iso)?;
    let rows: Vec<Vec<String>> = proj
        .outer_iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (p, l))| vec![i.to_string(), l.to_string(), real(p[0]), real(p[1])])
        .collect();
    write_csv(&out.join(PROJECTION_FILE), &["index", "label", "x", "y"], &rows)?;
    println!(
        "class {target_class}: {} positive and {} negative pairs; isotropy {:.6}; wrote {}",
        hist.positive_pairs,
        hist.negative_pairs,
        iso.score,
        out.display()
    );
    Ok(())
}

fn describe(r: &CaseResult) -> String {
    let c = &r.case;
    let at = match r.report.worst {
        Some(FdCoordinate::Embedding { row, col }) => format!("embedding[{row}][{col}]"),
        Some(FdCoordinate::Logit { row, col }) => format!("logit[{row}][{col}]"),
        None => "-".into(),
    };
    format!(
        "case {} (B={}, d={}, C={}, lambda={}, tau={}, hnm={}, seed={}): max relative error {:e} at {}",
        c.index, c.batch_size, c.dim, c.classes, c.lambda, c.tau, c.hnm, c.seed, r.report.max_relative_error, at
    )
}

pub fn gradcheck_cmd(
    ctx: &Context,
    seed: u64,
    h: f64,
    batch_sizes: &[usize],
    corrupt: bool,
    write: bool,
) -> std::result::Result<(), CliError> {
    check_step(h)?;
    let mut spec = GridSpec::default();
    if !batch_sizes.is_empty() {
        if batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be >= 1".into()).into());
        }
        spec.batch_sizes = batch_sizes.to_vec();
    }
    let cases = spec.cases(seed);
    let tamper = |g: &mut clce_core::loss::ClceGradient| {
        if corrupt {
            g.logits[[0, 0]] += 1e-2;
        }
    };
    let results: Vec<CaseResult> = ctx.run(|parallel| {
        if parallel {
            cases.par_iter().map(|c| run_case(c, h, tamper)).collect::<Result<Vec<_>>>()
        } else {
            cases.iter().map(|c| run_case(c, h, tamper)).collect::<Result<Vec<_>>>()
        }
    })??;
    if write {
        let rows: Vec<Vec<String>> = results
            .iter()
            .map(|r| {
                let c = &r.case;
                vec![
                    c.index.to_string(),
                    c.batch_size.to_string(),
                    c.dim.to_string(),
                    c.classes.to_string(),
                    real(c.lambda),
                    real(c.tau),
                    c.hnm.to_string(),
                    c.seed.to_string(),
                    real(r.report.max_relative_error),
                    r.passed().to_string(),
                ]
            })
            .collect();
        let out = ctx.out_dir()?;
        write_csv(
            &out.join(GRADCHECK_FILE),
            &["case", "batch_size", "dim", "classes", "lambda", "tau", "hnm", "seed", "max_relative_error", "passed"],
            &rows,
        )?;
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error))
        .expect("grid is non-empty");
    println!(
        "{} configurations, max relative error {:e} (tolerance {:e})",
        results.len(),
        worst.report.max_relative_error,
        GRADCHECK_TOLERANCE
    );
    let failures: Vec<String> = results.iter().filter(|r| !r.passed()).map(describe).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            eprintln!("FAIL {f}");
        }
        Err(CliError::Verification(format!(
            "{} of {} configurations exceed the tolerance",
            failures.len(),
            results.len()
        )))
    }
}

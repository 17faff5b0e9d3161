//! Command implementations. Each command owns its run directory through a
//! lock file, writes its fully resolved configuration next to its outputs,
//! and emits deterministic CSV artifacts (fixed seed implies byte-identical
//! files).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dtm_core::error::{Error, Result};
use dtm_core::maze::{
    coverage_ratio, evaluate_model, eval_prompts, generate_maze, pretrain_base, render_svg,
    validate_path, MazeEnv, MazeReward, PretrainConfig,
};
use dtm_core::model::{
    load_checkpoint, save_checkpoint, Checkpoint, NeuralModel, PosteriorModel,
};
use dtm_core::rng::{StreamDomain, Streams};
use dtm_core::trainer::run_dtm;
use dtm_core::verify::{run_suite, suite_names, CheckRecord};

use crate::config::RunConfig;

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// Exclusive ownership of a run directory via a lock file, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn provenance_line(config: &RunConfig) -> String {
    format!("# {} seed={} schema={}", BUILD_ID, config.seed, config.schema_version)
}

fn write_resolved_config(dir: &Path, config: &RunConfig) -> Result<()> {
    let text = format!("{}\n{}", provenance_line(config), config.to_toml());
    fs::write(dir.join("config.resolved.toml"), text)?;
    Ok(())
}

fn write_csv(path: &Path, config: &RunConfig, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&provenance_line(config));
    out.push('\n');
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Builds the maze environment deterministically from the config.
pub fn build_env(config: &RunConfig) -> Result<MazeEnv> {
    let streams = Streams::new(config.seed);
    let mut rng = streams.stream(StreamDomain::Instance, 0);
    let maze = generate_maze(config.maze.width, config.maze.door_fraction, &mut rng)?;
    MazeEnv::new(maze, config.maze.seq_len)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(config: &RunConfig, suite: &str, out_dir: &Path) -> Result<i32> {
    if suite != "all" && !suite_names().contains(&suite) {
        // Mapped to a usage error by the caller.
        return Err(Error::Config(format!(
            "unknown suite {suite:?}; available: {}, all",
            suite_names().join(", ")
        )));
    }
    let _lock = RunLock::acquire(out_dir)?;
    write_resolved_config(out_dir, config)?;
    let records: Vec<CheckRecord> = run_suite(suite, config.seed)?;
    let mut lines = Vec::with_capacity(records.len());
    let mut failures = 0;
    for r in &records {
        let line = r.to_string();
        println!("{line}");
        lines.push(line);
        if !r.pass {
            failures += 1;
        }
    }
    let report = format!(
        "{}\n{}\n# checks={} failures={failures}\n",
        provenance_line(config),
        lines.join("\n"),
        records.len()
    );
    fs::write(out_dir.join("verify_report.txt"), report)?;
    println!("{} checks, {failures} failures", records.len());
    Ok(if failures == 0 { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(config: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<i32> {
    let _lock = RunLock::acquire(out_dir)?;
    write_resolved_config(out_dir, config)?;
    let env = build_env(config)?;
    let streams = Streams::new(config.seed);
    fs::write(out_dir.join("maze.txt"), env.maze().to_text(config.seed))?;

    let resume_model = match resume {
        Some(path) => Some(load_checkpoint(path)?.into_neural()?),
        None => None,
    };
    let pre_cfg = PretrainConfig {
        corpus_size: config.pretrain.corpus_size,
        steps: config.pretrain.steps,
        batch_size: config.pretrain.batch_size,
        learning_rate: config.pretrain.learning_rate,
        eval_every: config.pretrain.eval_every,
        eval_prompt_count: config.eval.prompt_count,
        eval_rollouts: config.eval.rollouts_per_prompt,
        model: config.neural_config(),
    };
    let eval_rollout = {
        let mut r = config.rollout_config(vec![])?;
        r.temperature = config.eval.temperature;
        r
    };
    let (model, rows) = pretrain_base(&env, &pre_cfg, &eval_rollout, &streams, resume_model)?;

    save_checkpoint(&out_dir.join("base.ckpt"), &Checkpoint::of_neural(&model))?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", r.step, fmt6(r.loss), fmt6(r.validity)))
        .collect();
    write_csv(
        &out_dir.join("pretrain_metrics.csv"),
        config,
        "step,loss,validity",
        &csv_rows,
    )?;
    if let Some(last) = rows.last() {
        println!(
            "pretrained {} steps: loss {} validity {}",
            config.pretrain.steps,
            fmt6(last.loss),
            fmt6(last.validity)
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

pub fn cmd_finetune(config: &RunConfig, base: &Path, out_dir: &Path) -> Result<i32> {
    let _lock = RunLock::acquire(out_dir)?;
    write_resolved_config(out_dir, config)?;
    let env = build_env(config)?;
    let streams = Streams::new(config.seed);

    let model: NeuralModel = load_checkpoint(base)?.into_neural()?;
    if model.seq_len() != env.seq_len()
        || model.vocab() != *env.vocab()
        || model.config() != config.neural_config()
    {
        return Err(Error::Config(format!(
            "checkpoint architecture (len {}, vocab {}) does not match the config (len {}, vocab {})",
            model.seq_len(),
            model.vocab().size(),
            env.seq_len(),
            env.vocab().size()
        )));
    }

    // Training prompt pool, disjoint stream from the eval prompts.
    let mut pool_rng = streams.stream(StreamDomain::Instance, 1);
    let prompts: Vec<Vec<dtm_core::seq::Token>> = (0..config.buffer.prompt_pool)
        .map(|_| {
            let (s, g) = env.sample_prompt_pair(&mut pool_rng);
            env.prompt(s, g)
        })
        .collect();
    let rollout_cfg = config.rollout_config(prompts)?;
    let run_cfg = config.run_dtm_config()?;
    let buffer_cfg = config.buffer_config();
    let reward = MazeReward::new(&env);

    let eval_prompt_set = eval_prompts(&env, config.eval.prompt_count, &streams);
    let eval_rollout = {
        let mut r = config.rollout_config(vec![])?;
        r.temperature = config.eval.temperature;
        r
    };

    let mut eval_rows: Vec<String> = Vec::new();
    let run = run_dtm(
        model,
        &reward,
        &run_cfg,
        &buffer_cfg,
        &rollout_cfg,
        config.finetune.batch_size,
        &streams,
        |phase, a_end, m| {
            let report = evaluate_model(
                m,
                &env,
                &eval_prompt_set,
                config.eval.rollouts_per_prompt,
                &eval_rollout,
                &streams,
            )?;
            eval_rows.push(format!(
                "{phase},{},{},{},{}",
                fmt6(a_end),
                fmt6(report.validity),
                fmt6(report.mean_reward),
                fmt6(report.coverage_ratio)
            ));
            save_checkpoint(
                &out_dir.join(format!("phase_{phase}.ckpt")),
                &Checkpoint::of_neural(m),
            )?;
            println!(
                "phase {phase}: a={} validity={} mean_reward={} coverage={}",
                fmt6(a_end),
                fmt6(report.validity),
                fmt6(report.mean_reward),
                fmt6(report.coverage_ratio)
            );
            Ok(())
        },
    );

    let run = match run {
        Ok(run) => run,
        Err(Error::DivergedLoss(msg)) => {
            // Clean abort with a diagnostic dump.
            fs::write(out_dir.join("diverged.txt"), format!("{}\n{msg}\n", provenance_line(config)))?;
            eprintln!("aborted: diverged loss: {msg}");
            return Ok(1);
        }
        Err(e) => return Err(e),
    };

    save_checkpoint(&out_dir.join("final.ckpt"), &Checkpoint::of_neural(&run.model))?;
    let phase_rows: Vec<String> = run
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.phase_index,
                fmt6(r.a),
                r.step,
                fmt6(r.loss),
                fmt6(r.mean_buffer_reward),
                fmt6(r.grad_norm)
            )
        })
        .collect();
    write_csv(
        &out_dir.join("phases.csv"),
        config,
        "phase_index,a,step,loss,mean_buffer_reward,grad_norm",
        &phase_rows,
    )?;
    let diag_rows: Vec<String> = run
        .diagnostics
        .iter()
        .map(|d| {
            format!(
                "{},{},{},{},{},{}",
                fmt6(d.tilt_level),
                d.step,
                fmt6(d.loss),
                fmt6(d.grad_norm),
                fmt6(d.mean_weight),
                fmt6(d.ess)
            )
        })
        .collect();
    write_csv(
        &out_dir.join("diagnostics.csv"),
        config,
        "a,step,loss,grad_norm,mean_weight,ess",
        &diag_rows,
    )?;
    write_csv(
        &out_dir.join("phase_eval.csv"),
        config,
        "phase_index,a,validity,mean_reward,coverage_ratio",
        &eval_rows,
    )?;
    println!("finetune complete: {} phases", run.phases.len());
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    config: &RunConfig,
    ckpt: &Path,
    out_dir: &Path,
    rollouts: Option<usize>,
    temperature: Option<f64>,
    svg: bool,
) -> Result<i32> {
    let _lock = RunLock::acquire(out_dir)?;
    write_resolved_config(out_dir, config)?;
    let env = build_env(config)?;
    let streams = Streams::new(config.seed);
    let model: NeuralModel = load_checkpoint(ckpt)?.into_neural()?;
    if model.seq_len() != env.seq_len() || model.vocab() != *env.vocab() {
        return Err(Error::Config("checkpoint does not match the maze config".into()));
    }

    let n_rollouts = rollouts.unwrap_or(config.eval.rollouts_per_prompt);
    let prompts = eval_prompts(&env, config.eval.prompt_count, &streams);
    let rollout_cfg = {
        let mut r = config.rollout_config(vec![])?;
        r.temperature = temperature.unwrap_or(config.eval.temperature);
        r
    };
    let report = evaluate_model(&model, &env, &prompts, n_rollouts, &rollout_cfg, &streams)?;

    let metric_rows: Vec<String> = report
        .per_prompt
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                p.prompt_id,
                p.rollouts,
                fmt6(p.valid_frac),
                fmt6(p.mean_reward),
                fmt6(p.coverage_ratio)
            )
        })
        .collect();
    write_csv(
        &out_dir.join("metrics.csv"),
        config,
        "prompt_id,n,valid_frac,mean_reward,coverage_ratio",
        &metric_rows,
    )?;
    write_csv(
        &out_dir.join("summary.csv"),
        config,
        "validity,mean_reward,coverage_ratio",
        &[format!(
            "{},{},{}",
            fmt6(report.validity),
            fmt6(report.mean_reward),
            fmt6(report.coverage_ratio)
        )],
    )?;
    let dump_rows: Vec<String> = report
        .rollouts
        .iter()
        .map(|(pid, x, valid, reward)| {
            let toks: Vec<String> = x.tokens().iter().map(|t| t.to_string()).collect();
            format!("{pid},\"{}\",{},{}", toks.join(" "), valid, fmt6(*reward))
        })
        .collect();
    write_csv(
        &out_dir.join("rollouts.csv"),
        config,
        "prompt_id,path_tokens,valid,reward",
        &dump_rows,
    )?;

    if svg {
        let bodies: Vec<Vec<dtm_core::maze::Cell>> = report
            .rollouts
            .iter()
            .filter(|(_, _, valid, _)| *valid)
            .take(64)
            .map(|(_, x, _, _)| validate_path(&env, x).body)
            .collect();
        fs::write(out_dir.join("paths.svg"), render_svg(&env, &bodies))?;
    }

    // Sanity: pooled coverage in the summary agrees with a recomputation
    // from the dump (cheap, and guards the CSV against schema drift).
    let bodies: Vec<Vec<dtm_core::maze::Cell>> = report
        .rollouts
        .iter()
        .filter(|(_, _, valid, _)| *valid)
        .map(|(_, x, _, _)| validate_path(&env, x).body)
        .collect();
    if !bodies.is_empty() {
        let recomputed = coverage_ratio(&bodies)?;
        if (recomputed - report.coverage_ratio).abs() > 1e-9 {
            return Err(Error::Internal("coverage mismatch between report and dump".into()));
        }
    }

    println!(
        "eval: validity={} mean_reward={} coverage={}",
        fmt6(report.validity),
        fmt6(report.mean_reward),
        fmt6(report.coverage_ratio)
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

pub fn cmd_info(config: &RunConfig) -> Result<i32> {
    println!("{BUILD_ID}");
    println!("suites: {}, all", suite_names().join(", "));
    println!("resolved config:");
    print!("{}", config.to_toml());
    Ok(0)
}

//! Hand-rolled argument parsing: five verbs, a few flags, exit code 2 on
//! usage errors.

use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Verify { suite: String },
    Pretrain { resume: Option<PathBuf> },
    Finetune { base: PathBuf, c: Option<f64>, h: Option<f64>, a_max: Option<f64> },
    Eval {
        ckpt: PathBuf,
        rollouts: Option<usize>,
        temperature: Option<f64>,
        svg: bool,
    },
    Info,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cli {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

pub const USAGE: &str = "\
usage: dtm <command> [options]

commands:
  verify    run verification suites        [--suite NAME]
  pretrain  train the maze base model      [--resume CKPT]
  finetune  reward fine-tune a base model  --base CKPT [--c V] [--h V] [--a-max V]
  eval      roll out and score a model     --ckpt CKPT [--rollouts N] [--temperature T] [--svg]
  info      print build and config info

global options:
  --config PATH   TOML run configuration (defaults when omitted)
  --seed N        override the config seed
  --out DIR       output directory (default: out)
  --threads N     worker thread count (default: all cores)

exit codes: 0 success, 1 check or run failure, 2 usage error";

pub fn parse(args: &[String]) -> Result<Cli, String> {
    let mut it = args.iter().peekable();
    let verb = it.next().ok_or_else(|| "missing command".to_string())?;

    let mut suite = "all".to_string();
    let mut resume: Option<PathBuf> = None;
    let mut base: Option<PathBuf> = None;
    let mut ckpt: Option<PathBuf> = None;
    let mut rollouts: Option<usize> = None;
    let mut temperature: Option<f64> = None;
    let mut c_override: Option<f64> = None;
    let mut h_override: Option<f64> = None;
    let mut a_max_override: Option<f64> = None;
    let mut svg = false;
    let mut config: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut out = PathBuf::from("out");
    let mut threads: Option<usize> = None;

    let value = |it: &mut std::iter::Peekable<std::slice::Iter<String>>,
                     flag: &str|
     -> Result<String, String> {
        it.next()
            .map(|s| s.to_string())
            .ok_or_else(|| format!("flag {flag} expects a value"))
    };

    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--suite" => suite = value(&mut it, "--suite")?,
            "--resume" => resume = Some(PathBuf::from(value(&mut it, "--resume")?)),
            "--base" => base = Some(PathBuf::from(value(&mut it, "--base")?)),
            "--ckpt" => ckpt = Some(PathBuf::from(value(&mut it, "--ckpt")?)),
            "--rollouts" => {
                rollouts = Some(
                    value(&mut it, "--rollouts")?
                        .parse()
                        .map_err(|_| "--rollouts expects an integer".to_string())?,
                )
            }
            "--temperature" => {
                temperature = Some(
                    value(&mut it, "--temperature")?
                        .parse()
                        .map_err(|_| "--temperature expects a number".to_string())?,
                )
            }
            "--c" => {
                c_override = Some(
                    value(&mut it, "--c")?
                        .parse()
                        .map_err(|_| "--c expects a number".to_string())?,
                )
            }
            "--h" => {
                h_override = Some(
                    value(&mut it, "--h")?
                        .parse()
                        .map_err(|_| "--h expects a number".to_string())?,
                )
            }
            "--a-max" => {
                a_max_override = Some(
                    value(&mut it, "--a-max")?
                        .parse()
                        .map_err(|_| "--a-max expects a number".to_string())?,
                )
            }
            "--svg" => svg = true,
            "--config" => config = Some(PathBuf::from(value(&mut it, "--config")?)),
            "--seed" => {
                seed = Some(
                    value(&mut it, "--seed")?
                        .parse()
                        .map_err(|_| "--seed expects an integer".to_string())?,
                )
            }
            "--out" => out = PathBuf::from(value(&mut it, "--out")?),
            "--threads" => {
                threads = Some(
                    value(&mut it, "--threads")?
                        .parse()
                        .map_err(|_| "--threads expects an integer".to_string())?,
                )
            }
            other => return Err(format!("unknown flag {other}")),
        }
    }

    let command = match verb.as_str() {
        "verify" => Command::Verify { suite },
        "pretrain" => Command::Pretrain { resume },
        "finetune" => Command::Finetune {
            base: base.ok_or_else(|| "finetune requires --base CKPT".to_string())?,
            c: c_override,
            h: h_override,
            a_max: a_max_override,
        },
        "eval" => Command::Eval {
            ckpt: ckpt.ok_or_else(|| "eval requires --ckpt CKPT".to_string())?,
            rollouts,
            temperature,
            svg,
        },
        "info" => Command::Info,
        other => return Err(format!("unknown command {other}")),
    };

    Ok(Cli { command, config, seed, out, threads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(args: &[&str]) -> Result<Cli, String> {
        let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        parse(&owned)
    }

    #[test]
    fn parses_verify_with_suite() {
        let cli = v(&["verify", "--suite", "esscher", "--seed", "7"]).unwrap();
        assert_eq!(cli.command, Command::Verify { suite: "esscher".into() });
        assert_eq!(cli.seed, Some(7));
    }

    #[test]
    fn finetune_requires_base() {
        assert!(v(&["finetune"]).is_err());
        let cli = v(&["finetune", "--base", "b.ckpt", "--c", "1", "--h", "2.5"]).unwrap();
        match cli.command {
            Command::Finetune { c, h, .. } => {
                assert_eq!(c, Some(1.0));
                assert_eq!(h, Some(2.5));
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn unknown_flags_and_commands_fail() {
        assert!(v(&["frobnicate"]).is_err());
        assert!(v(&["verify", "--wat"]).is_err());
        assert!(v(&[]).is_err());
    }
}

use dtm_cli::commands::build_env;
use dtm_cli::config::RunConfig;
use dtm_core::dtm::TimeSampling;
use dtm_core::maze::{eval_prompts, evaluate_model, MazeEnv, MazeReward};
use dtm_core::model::{load_checkpoint, OptimConfig};
use dtm_core::oracle::RewardFn;
use dtm_core::rng::Streams;
use dtm_core::seq::MaskedSequence;
use dtm_core::trainer::{
    run_dtm, BufferConfig, ObjectiveKind, OptimizerKind, OrderPolicy, RolloutConfig, RunDtmConfig,
};

struct ZeroReward;
impl RewardFn for ZeroReward {
    fn reward(&self, _x: &MaskedSequence) -> f64 {
        0.0
    }
}

fn eval(model: &dtm_core::model::NeuralModel, env: &MazeEnv, streams: &Streams) -> (f64, f64) {
    let prompts = eval_prompts(env, 32, streams);
    let rollout = RolloutConfig {
        total_steps: 48,
        block_size: 48,
        order: OrderPolicy::Confidence,
        temperature: 1.0,
        prompts: vec![],
    };
    let rep = evaluate_model(model, env, &prompts, 8, &rollout, streams).unwrap();
    (rep.validity, rep.mean_reward)
}

fn main() {
    let mut cfg = RunConfig::default();
    cfg.model.hidden_dim = 64;
    let env = build_env(&cfg).unwrap();
    let streams = Streams::new(cfg.seed);
    let model = load_checkpoint(std::path::Path::new("/tmp/smoke/pre36/base.ckpt"))
        .unwrap()
        .into_neural()
        .unwrap();
    let (v0, r0) = eval(&model, &env, &streams);
    println!("base: validity {v0:.3} reward {r0:.3}");

    let mut pool_rng = streams.stream(dtm_core::rng::StreamDomain::Instance, 1);
    let prompts: Vec<Vec<u32>> = (0..128)
        .map(|_| {
            let (s, g) = env.sample_prompt_pair(&mut pool_rng);
            env.prompt(s, g)
        })
        .collect();
    let rollout = RolloutConfig {
        total_steps: 48,
        block_size: 48,
        order: OrderPolicy::Confidence,
        temperature: 1.0,
        prompts,
    };
    let run_cfg = RunDtmConfig {
        a_max: 7.5,
        h: 2.5,
        control_variate: 1.0,
        steps_per_phase: 256,
        draws_per_sequence: 1,
        objective: ObjectiveKind::AnyOrder,
        optimizer: OptimizerKind::Adam(OptimConfig {
            learning_rate: 5e-5,
            weight_decay: 0.0,
            ..OptimConfig::default()
        }),
        grad_clip: 2.0,
        log_every: 64,
        time_sampling: TimeSampling::HazardStratified,
    };
    let buffer_cfg = BufferConfig {
        capacity: 256,
        refresh_interval: 32,
        refresh_fraction: 0.25,
    };

    let which = std::env::args().nth(1).unwrap_or_else(|| "zero".into());
    let h: f64 = std::env::args().nth(2).and_then(|x| x.parse().ok()).unwrap_or(2.5);
    let total: usize = std::env::args().nth(3).and_then(|x| x.parse().ok()).unwrap_or(768);
    let lr: f64 = std::env::args().nth(4).and_then(|x| x.parse().ok()).unwrap_or(5e-5);
    let batch: usize = std::env::args().nth(5).and_then(|x| x.parse().ok()).unwrap_or(32);
    let draws: usize = std::env::args().nth(6).and_then(|x| x.parse().ok()).unwrap_or(1);
    let refresh: usize = std::env::args().nth(7).and_then(|x| x.parse().ok()).unwrap_or(32);
    let phases = (7.5 / h).round() as usize;
    let run_cfg = RunDtmConfig {
        h,
        steps_per_phase: total / phases,
        draws_per_sequence: draws,
        optimizer: OptimizerKind::Adam(OptimConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..OptimConfig::default()
        }),
        ..run_cfg
    };
    let buffer_cfg = BufferConfig { refresh_interval: refresh, ..buffer_cfg };
    if which == "zero" {
        println!("constant-zero reward (w = 1, target = reference):");
        run_dtm(model, &ZeroReward, &run_cfg, &buffer_cfg, &rollout, batch, &streams, |p, a, m| {
            let (v, r) = eval(m, &env, &streams);
            println!("  phase {p} a={a}: validity {v:.3} reward {r:.3}");
            Ok(())
        })
        .unwrap();
    } else {
        println!("maze reward:");
        let reward = MazeReward::new(&env);
        run_dtm(model, &reward, &run_cfg, &buffer_cfg, &rollout, batch, &streams, |p, a, m| {
            let (v, r) = eval(m, &env, &streams);
            println!("  phase {p} a={a}: validity {v:.3} reward {r:.3}");
            Ok(())
        })
        .unwrap();
    }
}

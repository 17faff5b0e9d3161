//! Named check suites: every analytic claim the crate relies on, verified
//! against brute force on enumerable instances. The CLI's verify command
//! runs these and reports one line per check.

use rand::Rng;

use crate::dtm::{
    beta_time_weight, cdtm_loss_and_grad, expected_loss_rows, grad_variance_report,
    sar_cdtm_loss_and_grad, tc_target, DtmConfig, LossRows,
};
use crate::error::{Error, Result};
use crate::interpolant::{hazard_sar, SarLayout};
use crate::model::{PosteriorFamily, PosteriorModel, TabularModel};
use crate::oracle::{
    check_kl_bound, esscher_posterior, exact_posterior, kl_divergence, path_kl, terminal_law,
    tilt, EsscherFamily, ExactDistribution, ExactPosterior, RewardTable, StateSpace, TableFamily,
    DEFAULT_CLEAN_CAP,
};
use crate::rng::{StreamDomain, Streams};
use crate::schedule::Schedule;
use crate::seq::{MaskedSequence, Vocabulary};
use crate::trainer::{build_buffer, OrderPolicy, RolloutConfig};

/// One verified inequality or identity: `pass` iff `lhs <= rhs + tolerance`.
#[derive(Debug, Clone)]
pub struct CheckRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    fn bound(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        CheckRecord {
            name: name.into(),
            lhs,
            rhs,
            tolerance,
            pass: lhs.is_finite() && rhs.is_finite() && lhs <= rhs + tolerance,
        }
    }

    /// Absolute-difference identity check.
    fn identity(name: impl Into<String>, difference: f64, tolerance: f64) -> Self {
        CheckRecord::bound(name, difference.abs(), 0.0, tolerance)
    }
}

impl std::fmt::Display for CheckRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} lhs={:.9e} rhs={:.9e} tol={:.1e} {}",
            self.name,
            self.lhs,
            self.rhs,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Claims the registry must cover; the coverage test is part of the suite
/// contract.
pub const REQUIRED_CLAIMS: &[&str] = &[
    "esscher-identity",
    "target-unbiasedness",
    "cdtm-minimizer",
    "control-variate-invariance",
    "variance-ordering",
    "terminal-kl-bound",
    "path-kl-expansion",
    "sar-hazard",
    "sar-objective",
];

pub struct Suite {
    pub name: &'static str,
    pub claims: &'static [&'static str],
    pub run: fn(u64) -> Result<Vec<CheckRecord>>,
}

pub const SUITES: &[Suite] = &[
    Suite { name: "esscher", claims: &["esscher-identity"], run: suite_esscher },
    Suite { name: "unbiasedness", claims: &["target-unbiasedness"], run: suite_unbiasedness },
    Suite {
        name: "minimizer",
        claims: &["cdtm-minimizer", "control-variate-invariance"],
        run: suite_minimizer,
    },
    Suite { name: "variance", claims: &["variance-ordering"], run: suite_variance },
    Suite { name: "kl-bound", claims: &["terminal-kl-bound"], run: suite_kl_bound },
    Suite { name: "path-kl", claims: &["path-kl-expansion"], run: suite_path_kl },
    Suite { name: "sar", claims: &["sar-hazard", "sar-objective"], run: suite_sar },
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

/// Runs one suite by name, or every suite for "all".
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckRecord>> {
    if name == "all" {
        let mut out = Vec::new();
        for s in SUITES {
            out.extend((s.run)(seed)?);
        }
        return Ok(out);
    }
    match SUITES.iter().find(|s| s.name == name) {
        Some(s) => (s.run)(seed),
        None => Err(Error::Config(format!(
            "unknown suite {name:?}; available: {} or all",
            suite_names().join(", ")
        ))),
    }
}

// ---------------------------------------------------------------------------
// Shared instance builders
// ---------------------------------------------------------------------------

/// Strictly positive distribution mixed with uniform so no row has tiny mass.
pub fn mixed_random_distribution(space: StateSpace, rng: &mut impl Rng) -> ExactDistribution {
    let random = ExactDistribution::random(space.clone(), rng);
    let n = space.clean_count() as f64;
    let probs: Vec<f64> = random.probs().iter().map(|&p| 0.5 * p + 0.5 / n).collect();
    ExactDistribution::new(space, probs).expect("mixture is a distribution")
}

/// The standard small instance: |V| = 2, L = 3, positive table, mean-token
/// reward in [0, 1].
pub fn standard_instance(seed: u64) -> (ExactDistribution, RewardTable) {
    let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
    let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 0);
    let rho = mixed_random_distribution(space.clone(), &mut rng);
    let values: Vec<f64> = (0..space.clean_count())
        .map(|rank| {
            let x = space.clean_at(rank);
            x.tokens().iter().map(|&t| t as f64).sum::<f64>() / x.len() as f64
        })
        .collect();
    let reward = RewardTable::new(space, values).expect("reward table");
    (rho, reward)
}

fn random_reward(space: &StateSpace, scale: f64, rng: &mut impl Rng) -> RewardTable {
    let values: Vec<f64> = (0..space.clean_count())
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    RewardTable::new(space.clone(), values).expect("reward table")
}

/// Full-batch descent on the exact expected objective until every row is
/// within `tol` of the target family in total variation (or the step budget
/// runs out). Returns (steps used, worst row TV).
pub fn descend_to_family<F: PosteriorFamily>(
    rows: &LossRows,
    model: &mut TabularModel,
    target: &F,
    tol: f64,
    max_steps: usize,
) -> Result<(usize, f64)> {
    let lr = 2.0 / rows.max_weight();
    let mut grad = vec![0.0; model.num_params()];
    let mut steps = 0;
    loop {
        let worst = worst_row_tv(rows, model, target);
        if worst < tol || steps >= max_steps {
            return Ok((steps, worst));
        }
        for _ in 0..1000 {
            rows.tabular_loss_and_grad(model, &mut grad)?;
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            steps += 1;
        }
    }
}

fn worst_row_tv<F: PosteriorFamily>(rows: &LossRows, model: &TabularModel, target: &F) -> f64 {
    let mut worst: f64 = 0.0;
    for row in rows.rows() {
        let a = model.row(&row.state, row.position);
        let b = target.row(&row.state, row.position);
        let tv = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

fn max_row_tv_between(rows: &LossRows, a: &TabularModel, b: &TabularModel) -> f64 {
    let mut worst: f64 = 0.0;
    for row in rows.rows() {
        let pa = a.row(&row.state, row.position);
        let pb = b.row(&row.state, row.position);
        let tv = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

fn suite_esscher(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 1);
    let mut worst_tv: f64 = 0.0;
    for trial in 0..200 {
        let v = 2 + (trial % 2) as u32;
        let len = 1 + trial % 4;
        let space = StateSpace::new(Vocabulary::new(v).unwrap(), len);
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward = random_reward(&space, 1.0, &mut rng);
        let h = rng.gen::<f64>() * 2.0;
        let tilted = tilt(&rho, &reward, h)?;

        // Random reachable state with at least one mask; compare at every
        // masked position.
        let clean = space.clean_at(rng.gen_range(0..space.clean_count()));
        let mut tokens = clean.tokens().to_vec();
        let n_masks = 1 + rng.gen_range(0..len);
        for j in 0..n_masks {
            tokens[(j * 2 + trial) % len] = space.vocab().mask_id();
        }
        let x_t = MaskedSequence::new(tokens, space.vocab())?;
        for i in x_t.mask_positions(space.vocab()) {
            let via_reweighting = esscher_posterior(&rho, &reward, h, &x_t, i)?;
            let via_tilt = exact_posterior(&tilted, &x_t, i)?;
            let tv: f64 = 0.5
                * via_reweighting
                    .iter()
                    .zip(&via_tilt)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            worst_tv = worst_tv.max(tv);
        }
    }
    let mut records = vec![CheckRecord::bound(
        "esscher/posterior-reweighting-equals-tilt-conditioning",
        worst_tv,
        0.0,
        1e-10,
    )];

    // Tilt composition: two increments equal one combined increment.
    let mut worst_comp: f64 = 0.0;
    for _ in 0..50 {
        let space = StateSpace::new(Vocabulary::new(3).unwrap(), 2);
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward = random_reward(&space, 1.0, &mut rng);
        let (a, h) = (rng.gen::<f64>(), rng.gen::<f64>());
        let two = tilt(&tilt(&rho, &reward, a)?, &reward, h)?;
        let one = tilt(&rho, &reward, a + h)?;
        worst_comp = worst_comp.max(two.tv(&one));
    }
    records.push(CheckRecord::bound(
        "esscher/tilt-composition",
        worst_comp,
        0.0,
        1e-13,
    ));

    // Unconditional reweighting of expectations.
    let mut worst_ucm: f64 = 0.0;
    for k in 0..50u32 {
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward = random_reward(&space, 1.0, &mut rng);
        let h = rng.gen::<f64>();
        let tilted = tilt(&rho, &reward, h)?;
        let phi = |x: &MaskedSequence| ((x.tokens().iter().sum::<u32>() + k) as f64).cos();
        let lhs = tilted.expectation(phi);
        let num = rho.expectation(|x| (h * reward_of(&reward, x)).exp() * phi(x));
        let den = rho.expectation(|x| (h * reward_of(&reward, x)).exp());
        worst_ucm = worst_ucm.max((lhs - num / den).abs());
    }
    records.push(CheckRecord::identity(
        "esscher/unconditional-reweighting",
        worst_ucm,
        1e-12,
    ));
    Ok(records)
}

fn reward_of(table: &RewardTable, x: &MaskedSequence) -> f64 {
    use crate::oracle::RewardFn;
    table.reward(x)
}

fn suite_unbiasedness(seed: u64) -> Result<Vec<CheckRecord>> {
    use crate::oracle::RewardFn;
    let (rho, reward) = standard_instance(seed);
    let space = rho.space().clone();
    let vocab = *space.vocab();
    let h = 0.8;
    let mut records = Vec::new();
    for c in [0.0, 0.5, 1.0, 2.0] {
        let mut worst: f64 = 0.0;
        // Every reachable (state, position): conditional weighted mean of the
        // control-variate target equals that of the raw one-hot.
        for rank in 0..space.state_count() {
            let x_t = space.state_at(rank);
            let masked = x_t.mask_positions(&vocab);
            if masked.is_empty() {
                continue;
            }
            let mut mass = 0.0;
            space.for_each_consistent(&x_t, |_, r| mass += rho.probs()[r])?;
            if mass <= 0.0 {
                continue;
            }
            for &i in &masked {
                let pi_a_row = exact_posterior(&rho, &x_t, i)?;
                let v_count = vocab.size() as usize;
                let mut lhs = vec![0.0; v_count];
                let mut rhs = vec![0.0; v_count];
                space.for_each_consistent(&x_t, |x1, r| {
                    let p_cond = rho.probs()[r] / mass;
                    if p_cond > 0.0 {
                        let rv = reward.reward(x1);
                        let w = (h * rv).exp();
                        let t = tc_target(&x_t, i, x1, &pi_a_row, rv, h, c, &vocab)
                            .expect("target");
                        for v in 0..v_count {
                            lhs[v] += p_cond * w * t[v];
                        }
                        rhs[x1.get(i) as usize] += p_cond * w;
                    }
                })?;
                for v in 0..v_count {
                    worst = worst.max((lhs[v] - rhs[v]).abs());
                }
            }
        }
        records.push(CheckRecord::identity(
            format!("unbiasedness/weighted-conditional-mean-c-{c}"),
            worst,
            1e-12,
        ));
    }
    Ok(records)
}

fn suite_minimizer(seed: u64) -> Result<Vec<CheckRecord>> {
    let (rho, reward) = standard_instance(seed);
    let vocab = *rho.space().vocab();
    let len = rho.space().len();
    let h = 0.7;
    let star = EsscherFamily::new(&rho, &reward, h);
    let reference = ExactPosterior::new(&rho);

    let mut records = Vec::new();
    let mut trained: Vec<TabularModel> = Vec::new();
    let mut rows_for_compare = None;
    for c in [0.0, 1.0] {
        let rows = expected_loss_rows(&rho, &reference, &reward, h, c)?;
        let mut model = TabularModel::zero_logits(vocab, len);
        let (_, worst_tv) = descend_to_family(&rows, &mut model, &star, 1e-8, 400_000)?;
        records.push(CheckRecord::bound(
            format!("minimizer/descent-reaches-tilted-posterior-c-{c}"),
            worst_tv,
            0.0,
            1e-6,
        ));
        trained.push(model);
        rows_for_compare = Some(rows);
    }
    let rows = rows_for_compare.expect("two runs happened");
    records.push(CheckRecord::bound(
        "minimizer/control-variate-invariance",
        max_row_tv_between(&rows, &trained[0], &trained[1]),
        0.0,
        1e-5,
    ));

    // Positive-definite curvature on the simplex tangent space at the
    // minimizer: minimum Rayleigh quotient of the row Hessians over random
    // tangent directions.
    let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 2);
    let mut min_quad = f64::INFINITY;
    for row in rows.rows() {
        let p = trained[1].row(&row.state, row.position);
        let w = row.weight;
        for _ in 0..50 {
            let mut d: Vec<f64> = (0..p.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            for x in d.iter_mut() {
                *x -= mean;
            }
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for x in d.iter_mut() {
                *x /= norm;
            }
            let dp: f64 = d.iter().zip(&p).map(|(a, b)| a * b).sum();
            let quad = w * (d.iter().zip(&p).map(|(a, b)| a * a * b).sum::<f64>() - dp * dp);
            min_quad = min_quad.min(quad);
        }
    }
    records.push(CheckRecord::bound(
        "minimizer/tangent-hessian-positive",
        0.0,
        min_quad,
        0.0,
    ));
    Ok(records)
}

fn suite_variance(seed: u64) -> Result<Vec<CheckRecord>> {
    let (rho, reward) = standard_instance(seed);
    let pi_ref = ExactPosterior::new(&rho);
    let theta = TabularModel::from_exact(&rho)?;
    let report = grad_variance_report(
        &rho,
        &pi_ref,
        &reward,
        &theta,
        &[0.0, 0.01, 0.05, 0.1],
        64,
    )?;
    let mut records = vec![CheckRecord::identity(
        "variance/h0-gap-equals-total-variance-term",
        report.h0_gap - report.h0_total_variance_term,
        1e-10,
    )];
    for e in &report.per_h {
        records.push(CheckRecord::bound(
            format!("variance/ordering-h-{}", e.h),
            e.var_g1,
            e.var_g0,
            1e-12,
        ));
    }
    Ok(records)
}

fn suite_kl_bound(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 3);
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_dpi = f64::NEG_INFINITY;
    let mut holds = 0usize;
    let n = 100;
    for trial in 0..n {
        let len = 2 + trial % 2;
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), len);
        let rho = mixed_random_distribution(space.clone(), &mut rng);
        let reward = random_reward(&space, 1.0, &mut rng);
        let h = rng.gen::<f64>();
        let c = if trial % 2 == 0 { 1.0 } else { 0.0 };
        let tilted = tilt(&rho, &reward, h)?;
        let star = EsscherFamily::new(&rho, &reward, h);
        let theta = TableFamily::materialize(&star, &tilted, 0.6, &mut rng);

        let report = check_kl_bound(&theta, &rho, &reward, h, c)?;
        if report.holds {
            holds += 1;
        }
        worst_violation = worst_violation.max(report.lhs - report.rhs);

        // Path KL dominates terminal KL on the same instance.
        let p_kl = path_kl(&star, &theta, &tilted, &Schedule::Linear, 512)?;
        let term = kl_divergence(&tilted, &terminal_law(&theta, space, DEFAULT_CLEAN_CAP)?)?;
        worst_dpi = worst_dpi.max(term - p_kl);
    }
    Ok(vec![
        CheckRecord::bound("kl-bound/terminal-kl-below-scaled-excess-loss", worst_violation, 0.0, 1e-9),
        CheckRecord::bound(
            "kl-bound/instances-holding",
            n as f64,
            holds as f64,
            0.0,
        ),
        CheckRecord::bound("kl-bound/path-kl-dominates-terminal", worst_dpi, 0.0, 1e-9),
    ])
}

fn suite_path_kl(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 4);
    // Identical families give zero.
    let space3 = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
    let rho = mixed_random_distribution(space3.clone(), &mut rng);
    let pi = ExactPosterior::new(&rho);
    let zero = path_kl(&pi, &pi, &rho, &Schedule::Linear, 512)?;
    let mut records = vec![CheckRecord::identity("path-kl/identical-families", zero, 1e-13)];

    // Single-token reduction: one unmasking event means the path KL equals
    // the KL of the fully-masked row.
    let vocab3 = Vocabulary::new(3).unwrap();
    let space1 = StateSpace::new(vocab3, 1);
    let masked = MaskedSequence::fully_masked(1, &vocab3);
    let mut fam_p = TableFamily::new(3);
    fam_p.set_row(masked.clone(), 0, vec![0.6, 0.3, 0.1]);
    let mut fam_q = TableFamily::new(3);
    fam_q.set_row(masked.clone(), 0, vec![0.3, 0.5, 0.2]);
    let rho_p = terminal_law(&fam_p, space1, DEFAULT_CLEAN_CAP)?;
    let got = path_kl(&fam_p, &fam_q, &rho_p, &Schedule::Linear, 64)?;
    let expect: f64 = [(0.6, 0.3), (0.3, 0.5), (0.1, 0.2)]
        .iter()
        .map(|&(p, q): &(f64, f64)| p * (p / q).ln())
        .sum();
    records.push(CheckRecord::identity(
        "path-kl/single-token-reduction",
        got - expect,
        1e-12,
    ));

    // Closed-form time weights against fine quadrature (the substitution is
    // exact; the midpoint rule must agree to its order).
    let mut worst_quad: f64 = 0.0;
    for len in 1..=4usize {
        for k in 1..=len {
            let exact = beta_time_weight(len, k);
            let n = 4096;
            let mut approx = 0.0;
            for j in 0..n {
                let s = (j as f64 + 0.5) / n as f64;
                approx += s.powi((len - k) as i32) * (1.0 - s).powi(k as i32 - 1) / n as f64;
            }
            worst_quad = worst_quad.max((exact - approx).abs());
        }
    }
    records.push(CheckRecord::identity(
        "path-kl/time-weight-quadrature-agreement",
        worst_quad,
        1e-6,
    ));

    // Data processing on randomized instances.
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..100 {
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
        let rho_p = mixed_random_distribution(space.clone(), &mut rng);
        let exact = ExactPosterior::new(&rho_p);
        let pi_q = TableFamily::materialize(&exact, &rho_p, 0.7, &mut rng);
        let p = path_kl(&exact, &pi_q, &rho_p, &Schedule::Linear, 512)?;
        let term = kl_divergence(&rho_p, &terminal_law(&pi_q, space, DEFAULT_CLEAN_CAP)?)?;
        worst_gap = worst_gap.max(term - p);
    }
    records.push(CheckRecord::bound(
        "path-kl/dominates-terminal-kl",
        worst_gap,
        0.0,
        1e-9,
    ));
    Ok(records)
}

fn suite_sar(seed: u64) -> Result<Vec<CheckRecord>> {
    // Hazard conformance on a time grid, every block and schedule.
    let mut worst_hazard: f64 = 0.0;
    for (len, block) in [(8usize, 2usize), (8, 4), (6, 3), (8, 8)] {
        let layout = SarLayout::new(len, block)?;
        let m = layout.block_count();
        for schedule in [Schedule::Linear, Schedule::polynomial(2.0)?] {
            for j in 0..400 {
                let t = j as f64 / 400.0;
                let u = (m as f64 * t).fract();
                if u >= 1.0 - 1e-9 {
                    continue;
                }
                let direct =
                    m as f64 * schedule.alpha_prime(u) / (1.0 - schedule.alpha(u));
                let got = hazard_sar(&layout, &schedule, t)?;
                worst_hazard = worst_hazard.max((got - direct).abs() / direct.abs().max(1.0));
            }
        }
    }
    let mut records = vec![CheckRecord::identity(
        "sar/hazard-formula-grid",
        worst_hazard,
        1e-12,
    )];

    // Single-block objective pairs exactly with the any-order objective
    // under shared draws: the paired mean difference is zero within four
    // standard errors of the difference.
    let (rho, reward) = {
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 4);
        let mut rng = Streams::new(seed).stream(StreamDomain::Instance, 5);
        let rho = mixed_random_distribution(space.clone(), &mut rng);
        let reward = random_reward(&space, 1.0, &mut rng);
        (rho, reward)
    };
    let pi_a = TabularModel::from_exact(&rho)?;
    let mut theta = pi_a.clone();
    for (k, p) in theta.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((k % 7) as f64 - 3.0);
    }
    let space = rho.space().clone();
    let batch: Vec<(MaskedSequence, f64)> = (0..space.clean_count())
        .map(|r| {
            let x = space.clean_at(r);
            let rew = reward_of(&reward, &x);
            (x, rew)
        })
        .collect();
    let config = DtmConfig::new(1.0, 0.3)?.with_draws(4);
    let layout = SarLayout::new(4, 4)?;
    let streams = Streams::new(seed ^ 0xabcd);
    let mut grad_a = vec![0.0; theta.num_params()];
    let mut grad_s = vec![0.0; theta.num_params()];
    let calls = 1600; // 1600 calls * 16 sequences * 4 draws >= 1e5 samples
    let mut diffs = Vec::with_capacity(calls);
    for salt in 0..calls {
        let a = cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &Schedule::Linear, &streams, salt as u64,
            &mut grad_a,
        )?;
        let s = sar_cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &layout, &Schedule::Linear, &streams,
            salt as u64, &mut grad_s,
        )?;
        diffs.push(a.loss - s.loss);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    records.push(CheckRecord::bound(
        "sar/single-block-matches-any-order",
        mean.abs(),
        4.0 * se,
        1e-12,
    ));

    // Rollout call accounting: rounds per block times blocks, per rollout.
    let rollout = RolloutConfig {
        total_steps: 4,
        block_size: 2,
        order: OrderPolicy::Random,
        temperature: 1.0,
        prompts: vec![],
    };
    let (_, stats) = build_buffer(&pi_a, &reward, 32, &rollout, &streams)?;
    records.push(CheckRecord::identity(
        "sar/rollout-call-count",
        stats.forward_calls as f64 - (32 * 4) as f64,
        0.0,
    ));
    Ok(records)
}

//! Acceptance suite: one pass/fail line per criterion, each at its full
//! tolerance and runtime budget. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use orthoflow_core::diagnostics::{effective_rank, gram_log_volume};
use orthoflow_core::injection::{inject, orthogonal_project};
use orthoflow_core::rng::{fill_standard_normal, standard_normal_vec, stream, Stage, Stream};
use orthoflow_core::sampler::{ode_step, sample, score_from_velocity, sde_step};
use orthoflow_core::{GaussianComponent, GaussianMixture};
use orthoflow_lab::cli::default_config;
use orthoflow_lab::config::{ExperimentConfig, ModeName};
use orthoflow_lab::experiment::{bias_bench, marginal_check, volume_track, Runner};
use orthoflow_lab::run::Command;
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn rng(index: u64) -> Stream {
    stream(0xACCE_97A2, index, Stage::Path)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn orthogonality() -> Verdict {
    let mut worst = 0.0f64;
    let mut r = rng(1);
    for d in [2, 8, 32] {
        for _ in 0..1000 {
            let vs = standard_normal_vec(&mut r, d);
            let vt = standard_normal_vec(&mut r, d);
            let perp = orthogonal_project(&vs, &vt, 0.0).unwrap();
            let inner: f64 = perp.iter().zip(&vt).map(|(a, b)| a * b).sum();
            worst = worst.max(inner.abs() / (norm(&perp) * norm(&vt)));
        }
    }
    verdict(
        worst < 1e-10,
        format!("max normalized inner product {worst:.2e} over 3000 pairs (< 1e-10)"),
    )
}

fn rank_expansion() -> Verdict {
    let mut r = rng(2);
    let (mut expanded, mut cases, mut collinear_rank_one) = (0, 0, 0);
    for i in 0..1000 {
        let d = [2, 8, 32][i % 3];
        let vt = standard_normal_vec(&mut r, d);
        let vs = standard_normal_vec(&mut r, d);
        let alpha = r.gen_range(0.1..3.0) * if r.gen::<bool>() { 1.0 } else { -1.0 };
        let perp = orthogonal_project(&vs, &vt, 0.0).unwrap();
        if norm(&perp) > 1e-6 {
            cases += 1;
            let v_new = inject(&vt, &perp, alpha).unwrap();
            if effective_rank(&[&vt, &v_new], 1e-10).unwrap() == 2 {
                expanded += 1;
            }
        }
        let c = r.gen_range(-5.0..5.0);
        let scaled: Vec<f64> = vt.iter().map(|x| c * x).collect();
        let perp = orthogonal_project(&scaled, &vt, 0.0).unwrap();
        let v_new = inject(&vt, &perp, alpha).unwrap();
        if effective_rank(&[&vt, &v_new], 1e-10).unwrap() == 1 {
            collinear_rank_one += 1;
        }
    }
    verdict(
        cases == 1000 && expanded == cases && collinear_rank_one == 1000,
        format!("rank 2 in {expanded}/{cases} generic cases, rank 1 in {collinear_rank_one}/1000 collinear cases"),
    )
}

fn score_oracle() -> Verdict {
    let mut r = rng(3);
    let (mut worst, mut flipped_best) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let d = r.gen_range(1..=8);
        let mean: Vec<f64> = standard_normal_vec(&mut r, d).iter().map(|m| 2.0 * m).collect();
        let var: Vec<f64> = (0..d).map(|_| r.gen_range(0.2..3.0)).collect();
        let target = GaussianMixture::single(GaussianComponent::new(mean, var).unwrap());
        let t = r.gen_range(0.05..0.95);
        let x = target.path_sample(t, &mut r).unwrap().x_t;
        let v = target.marginal_velocity(&x, t).unwrap();
        let exact = target.marginal_score(&x, t).unwrap();
        worst = worst.max(rel_err(&score_from_velocity(&x, t, &v).unwrap(), &exact));
        let flipped: Vec<f64> = x.iter().zip(&v).map(|(x, v)| (x + (1.0 - t) * v) / t).collect();
        flipped_best = flipped_best.min(rel_err(&flipped, &exact));
    }
    verdict(
        worst < 1e-8 && flipped_best > 1e-1,
        format!("max relative error {worst:.2e} (< 1e-8); (x + (1 - t) v) / t variant min relative error {flipped_best:.2e} (> 1e-1)"),
    )
}

fn marginal_preservation() -> Verdict {
    let cfg = ExperimentConfig::from_toml_str(default_config(Command::MarginalCheck)).unwrap();
    let built = cfg.build().unwrap();
    let res = marginal_check(&cfg, &built, &Runner::new(jobs()).unwrap()).unwrap();
    let passes: Vec<usize> = (0..res.checkpoint_times.len()).map(|c| res.sde_passes(c)).collect();
    let times: Vec<String> = res.checkpoint_times.iter().map(|t| format!("{t:.3}")).collect();
    let need = 4;
    verdict(
        cfg.marginal.particles == 20_000
            && res.trials == 5
            && passes.iter().all(|&p| p >= need)
            && res.control_failures() >= need,
        format!(
            "N = {}, SDE passes per checkpoint {:?} of {} at t = [{}] (>= {need}); score-dropped control fails in {}/{} (>= {need})",
            cfg.marginal.particles,
            passes,
            res.trials,
            times.join(", "),
            res.control_failures(),
            res.trials
        ),
    )
}

fn volume_collapse() -> Verdict {
    let cfg = ExperimentConfig::from_toml_str(default_config(Command::VolumeTrack)).unwrap();
    let built = cfg.build().unwrap();
    let runs = volume_track(&cfg, &built, &Runner::new(jobs()).unwrap()).unwrap();
    let k = cfg.sampler.steps;
    let collapsed = runs.iter().filter(|r| r.trace.collapsed()).count();
    let early = runs
        .iter()
        .filter(|r| r.trace.largest_drop_step().is_some_and(|s| 3 * s < k))
        .count();
    let shape_ok = runs.len() == 10 && k == 28 && cfg.experiment.particles == 8 && cfg.teacher.bias == 0.95;
    verdict(
        shape_ok && collapsed >= 9 && early >= 7,
        format!("final below initial in {collapsed}/10 (>= 9); largest drop in first third in {early}/10 (>= 7)"),
    )
}

fn lock_in_and_correction() -> Verdict {
    let cfg = ExperimentConfig::from_toml_str(default_config(Command::BiasBench)).unwrap();
    let built = cfg.build().unwrap();
    let res = bias_bench(&cfg, &built, &Runner::new(jobs()).unwrap()).unwrap();
    let baseline = res.treatment.baseline_hit_rate();
    let (treat, control) = (res.treatment.rate().unwrap_or(0.0), res.control.rate().unwrap_or(0.0));
    let setup_ok = res.treatment.cells == 200
        && cfg.injection.alpha == 1.0
        && cfg.sampler.noise_level == 0.7
        && cfg.injection.steps == [1]
        && cfg.bench.control_alpha == 0.0;
    verdict(
        setup_ok && baseline < 0.2 && treat > 0.0 && treat >= 2.0 * control,
        format!(
            "{} cells, baseline minority hit {baseline:.3} (< 0.2); correction {treat:.3} vs control {control:.3} over {} failures (>= 2x)",
            res.treatment.cells, res.treatment.failures
        ),
    )
}

fn reduction_identities() -> Verdict {
    let mut cfg = ExperimentConfig::from_toml_str(default_config(Command::BiasBench)).unwrap();
    cfg.injection.alpha = 0.0;
    cfg.sampler.noise_level = 0.0;
    let built = cfg.build().unwrap();
    let ode = cfg.sampler_config(ModeName::Ode).unwrap();
    let flow = cfg.sampler_config(ModeName::Injectflow).unwrap();
    let mut identical = 0;
    for (i, c) in built.conditions.iter().enumerate() {
        let seed = 100 + i as u64;
        let a = sample(&ode, &built.teacher, None, c, 40, seed).unwrap();
        let b = sample(&flow, &built.teacher, Some(&built.student), c, 40, seed).unwrap();
        identical += same_bits(a.raw_states(), b.raw_states()) as usize;
    }
    let mut r = rng(7);
    let mut steps_equal = 0;
    for i in 0..1000 {
        let mut x = vec![0.0; 16];
        let mut v = vec![0.0; 16];
        fill_standard_normal(&mut r, &mut x);
        fill_standard_normal(&mut r, &mut v);
        let t = r.gen_range(0.01..1.0);
        let t_next = t * r.gen_range(0.0..0.99);
        let sde = sde_step(&x, t, t_next, &v, 0.0, &mut stream(i, 0, Stage::Sde)).unwrap();
        steps_equal += same_bits(&sde, &ode_step(&x, t, t_next, &v).unwrap()) as usize;
    }
    let n = built.conditions.len();
    verdict(
        identical == n && steps_equal == 1000,
        format!("injectflow(alpha=0, a=0) == ode bitwise in {identical}/{n} conditions; sde_step(sigma=0) == ode_step in {steps_equal}/1000"),
    )
}

/// `ln sqrt(det(V V^T))` from Gaussian elimination on the Gram matrix.
fn dense_log_volume(states: &[Vec<f64>]) -> f64 {
    let origin = &states[7];
    let rows: Vec<Vec<f64>> = states[..7]
        .iter()
        .map(|s| s.iter().zip(origin).map(|(a, o)| a - o).collect())
        .collect();
    let mut g: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let mut log_det = 0.0;
    for col in 0..7 {
        let pivot = (col..7)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .unwrap();
        g.swap(col, pivot);
        let p = g[col][col];
        log_det += p.abs().ln();
        let pivot_row = g[col].clone();
        for row in &mut g[col + 1..] {
            let f = row[col] / p;
            for (v, pv) in row.iter_mut().zip(&pivot_row).skip(col) {
                *v -= f * pv;
            }
        }
    }
    0.5 * log_det
}

fn gram_algebra() -> Verdict {
    let mut r = rng(8);
    let (mut translation, mut scaling, mut oracle) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let states: Vec<Vec<f64>> = (0..8).map(|_| standard_normal_vec(&mut r, 8)).collect();
        let lv = gram_log_volume(&states).unwrap();
        let shift = standard_normal_vec(&mut r, 8);
        let shifted: Vec<Vec<f64>> = states
            .iter()
            .map(|s| s.iter().zip(&shift).map(|(a, b)| a + 10.0 * b).collect())
            .collect();
        translation = translation.max((gram_log_volume(&shifted).unwrap() - lv).abs());
        let s: f64 = r.gen_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = states.iter().map(|x| x.iter().map(|v| s * v).collect()).collect();
        scaling = scaling.max((gram_log_volume(&scaled).unwrap() - lv - 7.0 * s.ln()).abs());
        // relative error of the volume itself
        oracle = oracle.max((lv - dense_log_volume(&states)).exp_m1().abs());
    }
    verdict(
        translation < 1e-8 && scaling < 1e-8 && oracle < 1e-8,
        format!("translation drift {translation:.1e}, s^7 law error {scaling:.1e}, dense determinant relative error {oracle:.1e} (all < 1e-8)"),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Verdict, Duration);
    let criteria: [Criterion; 8] = [
        ("orthogonality", orthogonality, Duration::from_secs(1)),
        ("rank expansion", rank_expansion, Duration::from_secs(1)),
        ("score oracle", score_oracle, Duration::from_secs(1)),
        ("marginal preservation", marginal_preservation, Duration::from_secs(300)),
        ("volume collapse", volume_collapse, Duration::from_secs(30)),
        (
            "lock-in and correction",
            lock_in_and_correction,
            Duration::from_secs(600),
        ),
        ("reduction identities", reduction_identities, Duration::from_secs(1)),
        ("gram-volume algebra", gram_algebra, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let ok = v.passed && elapsed < budget;
        failed += !ok as usize;
        println!(
            "{} {name}: {} [{:.2} s, budget {} s]",
            if ok { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

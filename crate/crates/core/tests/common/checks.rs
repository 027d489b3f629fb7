//! Oracle-equivalence checks, each returning a description of the first
//! violation found.

use super::*;
use adats::agents::{
    end_task_gaussian, end_task_linear, AgentKind, Covariance, GaussianAgent, GaussianMetaPosterior, Policy,
    TaskSummary,
};
use adats::gauss_core::{cholesky, Matrix, PsdMatrix, RngStream};
use adats::harness::{run_single, ExperimentConfig};
use adats::hierarchy::{
    realize_reward, sample_meta_parameter, sample_task, Action, ActionSet, EnvironmentSpec, GaussianHierarchy,
    MetaDraw, Prior,
};

pub type Check = Result<(), String>;

fn random_spd(d: usize, base: f64, rng: &mut RngStream) -> Mat {
    let a: Mat = (0..d)
        .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();
    let mut m = mul(&a, &(0..d).map(|j| (0..d).map(|i| a[i][j]).collect()).collect());
    for (i, row) in m.iter_mut().enumerate() {
        for x in row.iter_mut() {
            *x *= 0.3;
        }
        row[i] += base;
    }
    m
}

fn to_psd(m: &Mat) -> PsdMatrix {
    PsdMatrix::new(Matrix::from_rows(m)).unwrap()
}

fn unit_ball(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let a: Vec<f64> = (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        if a.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return a;
        }
    }
}

fn dense_rows(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Sequential meta-posterior updates agree with the batch formula.
pub fn recursive_equals_batch() -> Check {
    let mut rng = RngStream::new(101, 0);
    for trial in 0..25 {
        let d = 1 + trial % 4;
        let sq = random_spd(d, 0.5, &mut rng);
        let s0 = random_spd(d, 0.05, &mut rng);
        let mu_q: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let noise = 0.5 + rng.uniform();
        let sigma_0 = to_psd(&s0);
        let mut meta = GaussianMetaPosterior {
            mean: mu_q.clone(),
            cov: Covariance::Dense(to_psd(&sq)),
        };
        let mut tasks = Vec::new();
        for _ in 0..(1 + trial % 6) {
            let mut summary = TaskSummary::linear(d);
            for _ in 0..(1 + (rng.uniform() * 30.0) as usize) {
                let a = unit_ball(d, &mut rng);
                summary.record_features(&a, rng.standard_normal() + 0.3);
            }
            let (g, b) = summary.to_linear();
            tasks.push((dense_rows(&g), b));
            meta = end_task_linear(&meta, &summary, &sigma_0, noise).map_err(|e| e.to_string())?;
        }
        let (mean, cov) = batch_meta_posterior(&mu_q, &sq, &s0, noise, &tasks);
        let dm = max_rel_diff(&meta.mean, &mean);
        let dc = max_rel_diff(meta.cov.to_matrix().matrix().as_slice(), &flatten(&cov));
        if dm > 1e-8 || dc > 1e-8 {
            return Err(format!("linear trial {trial}: mean diff {dm:e}, cov diff {dc:e}"));
        }
    }
    for trial in 0..25 {
        let k = 1 + trial % 5;
        let vq: Vec<f64> = (0..k).map(|_| 0.1 + rng.uniform()).collect();
        let v0: Vec<f64> = (0..k).map(|_| 0.01 + 0.2 * rng.uniform()).collect();
        let noise = 0.5 + rng.uniform();
        let sigma_0 = PsdMatrix::diagonal(&v0).unwrap();
        let mut meta = GaussianMetaPosterior {
            mean: vec![0.0; k],
            cov: Covariance::Diagonal(vq.clone()),
        };
        let mut tasks = Vec::new();
        for _ in 0..(1 + trial % 7) {
            let counts: Vec<u64> = (0..k).map(|_| (rng.uniform() * 20.0) as u64).collect();
            let sums: Vec<f64> = counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        c as f64 * 0.4 + rng.standard_normal()
                    }
                })
                .collect();
            let summary = TaskSummary::PerArm {
                counts: counts.clone(),
                sums: sums.clone(),
            };
            tasks.push((diag(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()), sums));
            meta = end_task_gaussian(&meta, &summary, &sigma_0, noise).map_err(|e| e.to_string())?;
        }
        let (mean, cov) = batch_meta_posterior(&vec![0.0; k], &diag(&vq), &diag(&v0), noise, &tasks);
        let dm = max_rel_diff(&meta.mean, &mean);
        let cov_diag: Vec<f64> = (0..k).map(|i| cov[i][i]).collect();
        let dc = max_rel_diff(&meta.cov.diag(), &cov_diag);
        if dm > 1e-8 || dc > 1e-8 {
            return Err(format!("diagonal trial {trial}: mean diff {dm:e}, var diff {dc:e}"));
        }
    }
    Ok(())
}

/// Closed-form meta-posterior of a scalar instance matches 2-D quadrature.
pub fn grid_quadrature() -> Check {
    let (sq, s0, noise) = (1.0, 0.3, 1.0);
    let tasks = vec![vec![0.8, 1.3, 0.2], vec![1.1, -0.4, 0.9]];
    let (gm, gv) = grid_meta_posterior(sq, s0, noise, &tasks, 2001, 6.0);
    let mut meta = GaussianMetaPosterior {
        mean: vec![0.0],
        cov: Covariance::Diagonal(vec![sq * sq]),
    };
    let sigma_0 = PsdMatrix::diagonal(&[s0 * s0]).unwrap();
    for ys in &tasks {
        let summary = TaskSummary::PerArm {
            counts: vec![ys.len() as u64],
            sums: vec![ys.iter().sum()],
        };
        meta = end_task_gaussian(&meta, &summary, &sigma_0, noise).map_err(|e| e.to_string())?;
    }
    let (m, v) = (meta.mean[0], meta.cov.diag()[0]);
    let rel_m = (m - gm).abs() / gm.abs();
    let rel_v = (v - gv).abs() / gv;
    if rel_m > 1e-3 || rel_v > 1e-3 {
        return Err(format!("closed form ({m}, {v}) vs grid ({gm}, {gv})"));
    }
    Ok(())
}

fn basis_pair(k: usize, sq: f64, s0: f64) -> (EnvironmentSpec, EnvironmentSpec) {
    let arms = EnvironmentSpec::gaussian_arms(k, sq, s0, 1.0).unwrap();
    let actions = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let linear = EnvironmentSpec::linear(ActionSet::Linear { actions }, sq, s0, 1.0).unwrap();
    (arms, linear)
}

/// K-armed AdaTS and linear AdaTS over the standard basis act identically.
pub fn basis_embedding() -> Check {
    let (arms, linear) = basis_pair(3, 0.5, 0.1);
    let draw = MetaDraw::Vector(vec![0.2, -0.3, 0.1]);
    let kind = AgentKind::new(Policy::AdaTs);
    let m = 6;
    let mut a = GaussianAgent::new(kind, &arms, &draw, m).map_err(|e| e.to_string())?;
    let mut b = GaussianAgent::new(kind, &linear, &draw, m).map_err(|e| e.to_string())?;
    let mut rng_a = RngStream::new(5, 1);
    let mut rng_b = RngStream::new(5, 1);
    let mut env_rng = RngStream::new(5, 2);
    for s in 1..=m {
        let task = sample_task(&arms, &draw, &mut env_rng).unwrap();
        a.begin_task(s, &mut rng_a).map_err(|e| e.to_string())?;
        b.begin_task(s, &mut rng_b).map_err(|e| e.to_string())?;
        for t in 0..40 {
            let x = a.select(&mut rng_a).map_err(|e| e.to_string())?;
            let y = b.select(&mut rng_b).map_err(|e| e.to_string())?;
            if x != y {
                return Err(format!("task {s} round {t}: actions {x:?} vs {y:?}"));
            }
            let obs = realize_reward(&arms, &task, &x, &mut env_rng).unwrap();
            a.observe(&x, &obs).map_err(|e| e.to_string())?;
            b.observe(&y, &obs).map_err(|e| e.to_string())?;
        }
        a.end_task().map_err(|e| e.to_string())?;
        b.end_task().map_err(|e| e.to_string())?;
        let dm = max_rel_diff(&a.meta().mean, &b.meta().mean);
        let dv = max_rel_diff(&a.meta().cov.diag(), &b.meta().cov.diag());
        let dense = b.meta().cov.to_matrix();
        let off = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| dense[(i, j)].abs())
            .fold(0.0, f64::max);
        if dm > 1e-10 || dv > 1e-10 || off > 1e-12 {
            return Err(format!(
                "task {s}: meta mean diff {dm:e}, var diff {dv:e}, off-diagonal {off:e}"
            ));
        }
    }

    // the full harness loop over both environments
    let config = |spec: EnvironmentSpec| ExperimentConfig {
        spec,
        agents: vec![kind],
        tasks: 5,
        rounds: 30,
        runs: 1,
        seed: 19,
        common_tasks: true,
    };
    for run in 0..3 {
        let ta = run_single(&config(arms.clone()), 0, run).map_err(|e| e.to_string())?;
        let tb = run_single(&config(linear.clone()), 0, run).map_err(|e| e.to_string())?;
        if ta.task_hashes != tb.task_hashes || max_rel_diff(&ta.cumulative, &tb.cumulative) > 1e-12 {
            return Err(format!("run {run}: harness traces differ"));
        }
    }
    Ok(())
}

fn point_mass_lockstep(spec: &EnvironmentSpec, mu: &[f64]) -> Check {
    let draw = MetaDraw::Vector(mu.to_vec());
    let m = 5;
    let mut ada = GaussianAgent::new(AgentKind::new(Policy::AdaTs), spec, &draw, m).map_err(|e| e.to_string())?;
    let mut oracle = GaussianAgent::new(AgentKind::new(Policy::OracleTs), spec, &draw, m).map_err(|e| e.to_string())?;
    let mut rng_a = RngStream::new(3, 7);
    let mut rng_o = RngStream::new(3, 7);
    let mut env_rng = RngStream::new(3, 8);
    for s in 1..=m {
        let task = sample_task(spec, &draw, &mut env_rng).unwrap();
        let pa = ada.begin_task(s, &mut rng_a).map_err(|e| e.to_string())?.clone();
        let po = oracle.begin_task(s, &mut rng_o).map_err(|e| e.to_string())?.clone();
        if pa != po {
            return Err(format!("task {s}: task priors differ"));
        }
        for t in 1..=30 {
            let x = ada.select(&mut rng_a).map_err(|e| e.to_string())?;
            let y = oracle.select(&mut rng_o).map_err(|e| e.to_string())?;
            if x != y {
                return Err(format!("task {s} round {t}: actions differ"));
            }
            let obs = realize_reward(spec, &task, &x, &mut env_rng).unwrap();
            ada.observe(&x, &obs).map_err(|e| e.to_string())?;
            oracle.observe(&y, &obs).map_err(|e| e.to_string())?;
            if ada.posterior() != oracle.posterior() {
                return Err(format!("task {s} round {t}: posteriors differ"));
            }
        }
        ada.end_task().map_err(|e| e.to_string())?;
        oracle.end_task().map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// With a point-mass meta-prior AdaTS coincides with OracleTS exactly.
pub fn point_mass_reduction() -> Check {
    let mu = [0.3, -0.2, 0.5];
    let mut arms = EnvironmentSpec::gaussian_arms(3, 0.0, 0.2, 1.0).unwrap();
    let mut linear = EnvironmentSpec::linear(
        ActionSet::RandomLinear {
            count: 8,
            dim: 3,
            half_width: 0.5,
        },
        0.0,
        0.2,
        1.0,
    )
    .unwrap()
    .realize(&mut RngStream::new(2, 2));
    let mut semi = EnvironmentSpec::semibandit(2, &[0.0; 3], &[0.0, 0.1, 0.3], 1.0).unwrap();
    for spec in [&mut arms, &mut linear, &mut semi] {
        if let Prior::Gaussian(GaussianHierarchy { mu_q, .. }) = &mut spec.prior {
            *mu_q = mu.to_vec();
        }
    }
    point_mass_lockstep(&arms, &mu).map_err(|e| format!("arms: {e}"))?;
    point_mass_lockstep(&linear, &mu).map_err(|e| format!("linear: {e}"))?;
    point_mass_lockstep(&semi, &mu).map_err(|e| format!("semi-bandit: {e}"))
}

fn psd_difference(larger: &PsdMatrix, smaller: &PsdMatrix) -> bool {
    let diff = PsdMatrix::symmetrized(larger.matrix().sub(smaller.matrix()));
    let scale = larger.matrix().max_abs().max(1.0);
    // tiny negative rounding is absorbed by a relative ridge
    let ridge = PsdMatrix::scaled_identity(diff.dim(), 1e-12 * scale);
    cholesky(&diff.add(&ridge)).is_ok()
}

/// Meta-posterior covariances shrink across tasks and within-task
/// precisions grow across rounds, over many random update sequences.
pub fn monotone_concentration(sequences: usize) -> Check {
    let mut rng = RngStream::new(77, 0);
    for seq in 0..sequences {
        let dense = seq % 2 == 1;
        let d = 1 + seq % 3;
        let spec = if dense {
            let actions = (0..6).map(|_| unit_ball(d, &mut rng)).collect();
            EnvironmentSpec::linear(
                ActionSet::Linear { actions },
                0.3 + rng.uniform(),
                0.05 + 0.3 * rng.uniform(),
                1.0,
            )
            .unwrap()
        } else {
            let sq: Vec<f64> = (0..d + 1).map(|_| 0.1 + rng.uniform()).collect();
            let s0: Vec<f64> = (0..d + 1).map(|_| 0.05 + 0.3 * rng.uniform()).collect();
            EnvironmentSpec::semibandit(1 + seq % (d + 1), &sq, &s0, 1.0).unwrap()
        };
        let draw = sample_meta_parameter(&spec, &mut rng).unwrap();
        let mut agent =
            GaussianAgent::new(AgentKind::new(Policy::AdaTs), &spec, &draw, 3).map_err(|e| e.to_string())?;
        for s in 1..=3 {
            let task = sample_task(&spec, &draw, &mut rng).unwrap();
            let before = agent.meta().cov.to_matrix();
            agent.begin_task(s, &mut rng).map_err(|e| e.to_string())?;
            let mut prec = agent.posterior().unwrap().precision().map_err(|e| e.to_string())?;
            for t in 0..5 {
                let action: Action = agent.select(&mut rng).map_err(|e| e.to_string())?;
                let obs = realize_reward(&spec, &task, &action, &mut rng).unwrap();
                agent.observe(&action, &obs).map_err(|e| e.to_string())?;
                let next = agent.posterior().unwrap().precision().map_err(|e| e.to_string())?;
                if !psd_difference(&next, &prec) {
                    return Err(format!("sequence {seq} task {s} round {t}: precision decreased"));
                }
                prec = next;
            }
            agent.end_task().map_err(|e| e.to_string())?;
            let after = agent.meta().cov.to_matrix();
            let shrinks = if dense {
                psd_difference(&before, &after)
            } else {
                before.diag().iter().zip(after.diag()).all(|(b, a)| a <= b + 1e-12)
            };
            if !shrinks {
                return Err(format!("sequence {seq} task {s}: meta covariance grew"));
            }
        }
    }
    Ok(())
}

/// Convenience for the oracle tests: unwraps a check with its message.
pub fn expect(check: Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

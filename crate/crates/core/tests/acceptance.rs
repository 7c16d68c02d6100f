//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use cflag::client::{ClientState, LocalRoundParams};
use cflag::data::Dataset;
use cflag::experiments::{run_experiment, ExperimentConfig};
use cflag::memory::{build_memory, MemoryPolicy};
use cflag::model::{LossModel, ModelKind};
use cflag::params::ParamVector;
use cflag::server::{overfit_b, ServerConfig, ServerState};
use common::{random_dataset, random_params, rel, rng};
use rand::Rng;
use serde_json::json;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn weighted_clients(shards: Vec<Dataset>, seed: u64) -> Vec<ClientState> {
    let total: usize = shards.iter().map(|d| d.len()).sum();
    shards
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let w = d.len() as f64 / total as f64;
            ClientState::new(i, w, d, seed).unwrap()
        })
        .collect()
}

// ---- 1 ----

fn iag_oracle() -> Outcome {
    let mut r = rng(1001);
    let runs = 240;
    let mut worst: f64 = 0.0;
    let mut steps_checked = 0;
    for run in 0..runs {
        let n = r.random_range(1..=8);
        let e = r.random_range(1..=6);
        let (model, data) = match run % 3 {
            0 => {
                let p = r.random_range(1..=20);
                (LossModel::new(ModelKind::LinearMse, p, 3, 0.0).unwrap(), random_dataset(&mut r, n, p, 3))
            }
            1 => {
                let (p, k) = (r.random_range(1..=5), r.random_range(2..=4));
                (LossModel::new(ModelKind::MultinomialLogistic, p, k, 0.01).unwrap(), random_dataset(&mut r, n, p, k))
            }
            _ => {
                (LossModel::new(ModelKind::Mlp { hidden_dim: 2 }, 2, 2, 0.0).unwrap(), random_dataset(&mut r, n, 2, 2))
            }
        };
        let d = model.param_dim();
        if d > 20 {
            return Err(format!("run {run} has parameter dimension {d}"));
        }
        let x_t = random_params(&mut r, d, 1.0);
        let mut client = ClientState::new(0, 1.0, data.clone(), run).unwrap();
        let pro = client.prologue(&model, &x_t, None, run as usize).unwrap();
        let g_global = &pro.grad_g + &random_params(&mut r, d, 0.5);
        let mut params = LocalRoundParams::new(r.random_range(0.01..0.5), e, run as usize);
        params.record_steps = true;
        let res = client.local_round(&model, &x_t, &g_global, &pro, &params).map_err(|e| e.to_string())?;
        let iterates: Vec<&ParamVector> = res.steps.iter().map(|s| &s.iterate).collect();
        for step in &res.steps {
            let mut brute = ParamVector::zeros(d);
            for (j, &tau) in step.tau.iter().enumerate() {
                brute.axpy(1.0 / n as f64, &model.grad_component(iterates[tau], &data, j).unwrap());
            }
            worst = worst.max(rel(&step.delayed, &brute));
            steps_checked += 1;
        }
    }
    ensure(worst <= 1e-10, || format!("max relative error {worst:.3e} > 1e-10"))?;
    Ok(format!("{runs} runs, {steps_checked} steps, max rel err {worst:.2e}"))
}

// ---- 2 ----

fn drift_and_closed_form() -> Outcome {
    let mut r = rng(2002);
    let model = LossModel::new(ModelKind::MultinomialLogistic, 4, 3, 0.01).unwrap();
    let shards: Vec<Dataset> = (0..5).map(|i| random_dataset(&mut r, 6 + 2 * i, 4, 3)).collect();
    let mut clients = weighted_clients(shards, 2002);
    for c in clients.iter_mut() {
        let past = random_dataset(&mut r, 20, 4, 3);
        let seed = r.random();
        c.set_memory(build_memory(&past, 10, MemoryPolicy::Uniform, seed).unwrap());
        c.set_past(vec![past]).unwrap();
    }
    let (alpha, beta, e) = (0.05, 0.05, 4);
    let mut cfg = ServerConfig::new(alpha, beta, 5.0, e);
    cfg.diagnostics = false;
    let mut server = ServerState::new(random_params(&mut r, 12, 1.0), cfg).unwrap();
    let (mut worst_drift, mut worst_closed): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let x_t = server.params().clone();
        let out = server.run_round(&mut clients, &model).map_err(|e| e.to_string())?;
        let mut closed = x_t.clone();
        closed.axpy(-alpha, &out.f_tilde);
        for (c, res) in clients.iter().zip(&out.client_results) {
            let correction = &out.grad_g - &res.g_i_at_xt;
            let mut drift = &correction * (-beta * e as f64);
            drift.axpy(-beta, &res.s_sum);
            worst_drift = worst_drift.max(rel(&(&res.x_end - &x_t), &drift));
            closed.axpy(-beta * c.weight(), &res.s_sum);
            closed.axpy(-beta * e as f64 * c.weight(), &correction);
        }
        worst_closed = worst_closed.max(rel(&out.x_next, &closed));
    }
    ensure(worst_drift <= 1e-9, || format!("drift identity off by {worst_drift:.3e}"))?;
    ensure(worst_closed <= 1e-9, || format!("closed form off by {worst_closed:.3e}"))?;
    Ok(format!("200 rounds, drift {worst_drift:.2e}, closed form {worst_closed:.2e}"))
}

// ---- 3 ----

fn bound_suite() -> Outcome {
    let (mut drift_viol, mut err_viol, mut checks) = (0usize, 0usize, 0usize);
    for seed in 0..100u64 {
        let mut r = rng(3000 + seed);
        let p = r.random_range(2..=6);
        let model = LossModel::new(ModelKind::LinearMse, p, 3, 0.0).unwrap();
        let shards: Vec<Dataset> = (0..5)
            .map(|_| {
                let n = r.random_range(3..=10);
                random_dataset(&mut r, n, p, 3)
            })
            .collect();
        let l = shards.iter().map(|d| model.component_smoothness(d).unwrap()).fold(0.0, f64::max);
        let e = r.random_range(2..=8);
        let x0 = random_params(&mut r, p, 3.0);
        for (factor, tracking) in [(4.0, false), (12.0, true)] {
            let mut clients = weighted_clients(shards.clone(), seed);
            let beta = 1.0 / (factor * l * e as f64);
            let mut cfg = ServerConfig::new(0.0, beta, l, e);
            cfg.use_memory = false;
            cfg.diagnostics = false;
            cfg.track_error = tracking;
            let mut server = ServerState::new(x0.clone(), cfg).unwrap();
            for _ in 0..15 {
                let out = server.run_round(&mut clients, &model).map_err(|e| e.to_string())?;
                let g = out.grad_g.norm();
                for res in &out.client_results {
                    if tracking {
                        for err in &res.grad_errors {
                            checks += 1;
                            if *err > 2.0 * beta * l * e as f64 * g {
                                err_viol += 1;
                            }
                        }
                    } else {
                        for (k, d) in res.drift_norms.iter().enumerate() {
                            checks += 1;
                            if *d > 4.0 * beta * (k + 1) as f64 * g {
                                drift_viol += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure(drift_viol + err_viol == 0, || format!("{drift_viol} drift and {err_viol} gradient-error violations"))?;
    Ok(format!("100 runs, {checks} (t,k) checks, 0 violations"))
}

// ---- 4 ----

fn zero_bias() -> Outcome {
    let mut r = rng(4004);
    let model = LossModel::new(ModelKind::MultinomialLogistic, 3, 3, 0.0).unwrap();
    let past = random_dataset(&mut r, 60, 3, 3);
    let current = random_dataset(&mut r, 8, 3, 3);
    let x = random_params(&mut r, 9, 1.0);
    let mut client = ClientState::new(0, 1.0, current, 4004).unwrap();
    let pro = client.prologue(&model, &x, None, 0).unwrap();
    let w = client.local_round(&model, &x, &pro.grad_g, &pro, &LocalRoundParams::new(0.05, 3, 0)).unwrap().s_sum;
    let full = model.grad(&x, &past).unwrap();
    let (alpha, beta, l) = (0.05, 0.05, 5.0);
    let runs = 1000;
    let m0 = past.len() / 2;
    let mut grads = Vec::with_capacity(runs);
    let mut bs = Vec::with_capacity(runs);
    for s in 0..runs as u64 {
        let buf = build_memory(&past, m0, MemoryPolicy::Uniform, 40_000 + s).unwrap();
        let g = model.grad(&x, buf.items()).unwrap();
        bs.push(overfit_b(alpha, beta, l, &full, &(&g - &full), &w));
        grads.push(g);
    }
    let sqrt_n = (runs as f64).sqrt();
    let mut worst_z: f64 = 0.0;
    for c in 0..full.len() {
        let mean = grads.iter().map(|g| g[c]).sum::<f64>() / runs as f64;
        let sd = (grads.iter().map(|g| (g[c] - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        let z = (mean - full[c]).abs() / (sd / sqrt_n);
        worst_z = worst_z.max(z);
        ensure(z <= 3.0, || format!("coordinate {c} deviates by {z:.2} standard errors"))?;
    }
    let mean_b = bs.iter().sum::<f64>() / runs as f64;
    let sd_b = (bs.iter().map(|b| (b - mean_b).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
    let z_b = mean_b.abs() / (sd_b / sqrt_n);
    ensure(z_b <= 3.0, || format!("mean B deviates by {z_b:.2} standard errors"))?;
    Ok(format!("{runs} rebuilds of {m0}/{} rows, max |z| {worst_z:.2}, B |z| {z_b:.2}", past.len()))
}

// ---- 5 and 7 ----

fn split_gaussian_config(algorithm: &str, seed: u64, zeta: f64, rounds: usize, case: &str) -> ExperimentConfig {
    let v = json!({
        "schema_version": 1,
        "seed": seed,
        "model": {"kind": "multinomial-logistic"},
        "data": {"kind": "split-gaussians", "num_tasks": 2, "classes_per_task": 2, "dim": 2,
                 "n_per_class": 100, "separation": 4.0},
        "partition": {"clients": 5, "zeta": zeta},
        "algorithm": algorithm,
        "rounds": rounds,
        "epochs": 2,
        "alpha": 0.03,
        "beta": 0.1,
        "smoothness": "analytic",
        "memory": {"per_task": 20},
        "adapt_case": case
    });
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

fn surrogate_inequality() -> Outcome {
    let (mut rounds, mut transfer, mut interfere, mut degenerate) = (0usize, 0usize, 0usize, 0usize);
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..20 {
        for zeta in [0.1, 1e5] {
            for case in ["average", "worst"] {
                let cfg = split_gaussian_config("cflag-adaptive", seed, zeta, 25, case);
                let art = run_experiment(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
                for rep in &art.reports {
                    rounds += 1;
                    transfer += rep.n_transfer;
                    interfere += rep.n_interfere;
                    degenerate += rep.degenerate.iter().filter(|&&d| d).count();
                    let gap = rep.gamma_ad - rep.gamma_base_surrogate;
                    worst = worst.max(gap);
                    ensure(gap <= 1e-12, || {
                        format!("seed {seed} zeta {zeta} {case} round {}: excess {gap:.3e}", rep.t)
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "{rounds} rounds, {transfer} transference / {interfere} interference client-rounds \
         ({degenerate} degenerate), max excess {worst:.2e}"
    ))
}

fn forgetting_reduction() -> Outcome {
    let (mut forget_wins, mut acc_wins) = (0, 0);
    let mut detail = Vec::new();
    for seed in 0..10 {
        let ours = run_experiment(&split_gaussian_config("cflag-adaptive", seed, 0.1, 50, "average"))
            .map_err(|e| e.to_string())?
            .summary;
        let base = run_experiment(&split_gaussian_config("fine-fl", seed, 0.1, 50, "average"))
            .map_err(|e| e.to_string())?
            .summary;
        let (fo, fb) = (ours.forgetting.unwrap(), base.forgetting.unwrap());
        let (ao, ab) = (ours.avg_accuracy.unwrap(), base.avg_accuracy.unwrap());
        forget_wins += usize::from(fo < fb);
        acc_wins += usize::from(ao >= ab);
        detail.push(format!("{fo:.3}/{fb:.3}"));
    }
    ensure(forget_wins >= 8 && acc_wins >= 8, || {
        format!("forgetting lower in {forget_wins}/10, accuracy not lower in {acc_wins}/10 [{}]", detail.join(" "))
    })?;
    Ok(format!("forgetting lower in {forget_wins}/10, accuracy not lower in {acc_wins}/10"))
}

// ---- 6 ----

/// Linear least-squares shards whose targets are exactly reproduced by the
/// weight vector `e_0`, so every task shares one minimizer.
fn realizable(r: &mut impl Rng, n: usize, p: usize) -> Dataset {
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let mut features = Vec::with_capacity(n * p);
    for &y in &labels {
        features.push(y as f64);
        features.extend((1..p).map(|_| r.random_range(-1.0..1.0)));
    }
    Dataset::new(features, labels, p, 3).unwrap()
}

struct JointSetup {
    model: LossModel,
    clients: Vec<ClientState>,
    l: f64,
    x0: ParamVector,
}

fn joint_setup(seed: u64, memory_rows: Option<usize>) -> JointSetup {
    let mut r = rng(6000 + seed);
    let p = 4;
    let model = LossModel::new(ModelKind::LinearMse, p, 3, 0.0).unwrap();
    let shards: Vec<Dataset> = (0..5).map(|_| realizable(&mut r, 12, p)).collect();
    let pasts: Vec<Dataset> = (0..5).map(|_| realizable(&mut r, 12, p)).collect();
    let mut l: f64 = 0.0;
    for d in shards.iter().chain(&pasts) {
        l = l.max(model.component_smoothness(d).unwrap());
    }
    let mut clients = weighted_clients(shards, seed);
    for (c, past) in clients.iter_mut().zip(pasts) {
        let rows = memory_rows.unwrap_or(past.len());
        c.set_memory(build_memory(&past, rows, MemoryPolicy::Uniform, seed + c.id() as u64).unwrap());
        c.set_past(vec![past]).unwrap();
    }
    let x0 = random_params(&mut r, p, 2.0);
    JointSetup { model, clients, l, x0 }
}

fn running_min(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .map(|v| {
            best = best.min(v);
            best
        })
        .collect()
}

fn convergence_rates() -> Outcome {
    let e = 2;
    let mut ratios_h = Vec::new();
    let mut ratios_f = Vec::new();
    for seed in 0..10 {
        let mut s = joint_setup(seed, Some(6));
        let step = 1.0 / (30.0 * s.l * e as f64);
        let mut server = ServerState::new(s.x0.clone(), ServerConfig::new(step, step, s.l, e)).unwrap();
        let mut h = Vec::with_capacity(400);
        for _ in 0..400 {
            let rep = server.run_round(&mut s.clients, &s.model).map_err(|e| e.to_string())?.report;
            h.push(rep.grad_h_hat_sq.unwrap());
        }
        let h = running_min(h.into_iter());
        ratios_h.push(h[399] / h[99]);

        let mut at = [0.0; 2];
        for (slot, t_total) in [100usize, 400].into_iter().enumerate() {
            let mut s = joint_setup(seed, None);
            let beta = 1.0 / (s.l * e as f64 * (t_total as f64).sqrt());
            let mut server = ServerState::new(s.x0.clone(), ServerConfig::new(1.0 / s.l, beta, s.l, e)).unwrap();
            let mut f = Vec::with_capacity(t_total);
            for _ in 0..t_total {
                let rep = server.run_round(&mut s.clients, &s.model).map_err(|e| e.to_string())?.report;
                f.push(rep.grad_f_sq.unwrap());
            }
            at[slot] = *running_min(f.into_iter()).last().unwrap();
        }
        ratios_f.push(at[1] / at[0]);
    }
    let (mh, mf) = (median(ratios_h), median(ratios_f));
    ensure(mh <= 0.5, || format!("median joint-gradient ratio {mh:.3e} > 0.5"))?;
    ensure(mf <= 0.7, || format!("median past-gradient ratio {mf:.3e} > 0.7"))?;
    Ok(format!("median ratios: joint {mh:.2e} (<= 0.5), past {mf:.2e} (<= 0.7)"))
}

// ---- 8 ----

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = split_gaussian_config("cflag-adaptive", 8, 0.1, 20, "average");
    let path = dir.path().join("determinism.json");
    fs::write(&path, cfg.to_json().unwrap()).map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "8"), ("d", "8")] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cflag"))
            .args(["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        traces.push(fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
    }
    ensure(traces.windows(2).all(|w| w[0] == w[1]), || "trace bytes differ between runs".into())?;
    Ok(format!("4 runs (threads 1,1,8,8), {} identical trace bytes", traces[0].len()))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "IAG oracle equivalence", limit: Some(Duration::from_secs(5)), check: iag_oracle },
        Criterion {
            id: 2,
            name: "drift identity and closed form",
            limit: Some(Duration::from_secs(10)),
            check: drift_and_closed_form,
        },
        Criterion {
            id: 3,
            name: "drift and gradient-error bounds",
            limit: Some(Duration::from_secs(30)),
            check: bound_suite,
        },
        Criterion { id: 4, name: "zero-bias memory gradient", limit: Some(Duration::from_secs(60)), check: zero_bias },
        Criterion {
            id: 5,
            name: "adaptive-rate surrogate inequality",
            limit: Some(Duration::from_secs(60)),
            check: surrogate_inequality,
        },
        Criterion {
            id: 6,
            name: "convergence-rate property",
            limit: Some(Duration::from_secs(120)),
            check: convergence_rates,
        },
        Criterion {
            id: 7,
            name: "directional forgetting reduction",
            limit: Some(Duration::from_secs(120)),
            check: forgetting_reduction,
        },
        Criterion { id: 8, name: "determinism", limit: None, check: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.check)();
        let took = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if took > limit => {
                Err(format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
            }
            (r, _) => r,
        };
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("[{tag}] {}. {}: {msg} ({:.2}s)", c.id, c.name, took.as_secs_f64());
        failed += usize::from(result.is_err());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

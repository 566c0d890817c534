//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` always exits 0 so that the workspace test
//! run reports every line; `-- --strict` exits 1 if any criterion fails.
//! `-- --only 1,2,3` selects criteria.

use std::path::Path;
use std::time::{Duration, Instant};

use handeye::cli::{run_from, Manifest};
use handeye::control::{bellman_target, q_values, td_loss, td_loss_with_targets, ControlNet, ThetaTransition};
use handeye::eval::{parse_rows, Format, SummaryRow};
use handeye::finetune::{mix_gradients, CombinedPolicy, FinetuneConfig, Finetuner};
use handeye::nn::{
    finite_diff_grad, finite_diff_grad_net, reference_forward, relative_error, Activation, GradSet, LayerSpec, Network,
    Shape, Tensor,
};
use handeye::perception::{frame_input, perception_loss, split_dataset, PerceptionBatch, PerceptionNet, INPUT_SHAPE};
use handeye::render::{build_dataset, render_pseudo_real, Camera, PerturbationSpec, ThetaVec};
use handeye::sim::{ArmModel, ReachAction, SceneState, NUM_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_PASS_FRACTION: f64 = 0.99;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const UNIT_TOL_PX: f64 = 0.01;
const PIPELINE_BUDGET: Duration = Duration::from_secs(60 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fraction_ok(analytic: &[f32], fd: &[f64]) -> f64 {
    let ok = analytic
        .iter()
        .zip(fd)
        .filter(|(a, b)| relative_error(**a as f64, **b) < GRAD_REL_TOL)
        .count();
    ok as f64 / fd.len() as f64
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let arm = ArmModel::default();
    let cam = Camera::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    // perception: one noisy frame (pre-activations off the ReLU kinks), L_p
    // against a random label
    let net = PerceptionNet::new(102);
    let scene = arm.sample_task(&mut rng, &cam.viewport).unwrap();
    let frame = render_pseudo_real(&scene, &arm, &cam, &PerturbationSpec::default(), &mut rng);
    let label = ThetaVec([0; 5].map(|_| rng.random::<f64>()));
    let batch = PerceptionBatch {
        items: vec![(&frame, label)],
        n_sim: 1,
        n_pseudo_real: 0,
    };
    let (_, gp) = perception_loss(&net, &batch).unwrap();
    let x = Tensor::new(INPUT_SHAPE, frame_input(&frame));
    let fd = finite_diff_grad_net(&net.net, &x, |y| {
        0.5 * y.iter().zip(label.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    })
    .unwrap();
    let f_perception = fraction_ok(&gp.values, &fd);

    // control: L_q over a batch against a separate target net
    let ctrl = ControlNet::new(103);
    let target = ControlNet::new(104);
    let transitions: Vec<ThetaTransition> = (0..8)
        .map(|_| ThetaTransition {
            theta: ThetaVec([0; 5].map(|_| rng.random::<f64>())),
            action: ReachAction::ALL[rng.random_range(0..NUM_ACTIONS)],
            reward: f64::from(rng.random_bool(0.3)),
            next_theta: ThetaVec([0; 5].map(|_| rng.random::<f64>())),
            terminal: rng.random_bool(0.2),
        })
        .collect();
    let gamma = 0.9;
    let td = td_loss(&ctrl, &target, &transitions, gamma).unwrap();
    let ys: Vec<f64> = transitions
        .iter()
        .map(|t| bellman_target(t.reward, &q_values(&target, &t.next_theta), gamma, t.terminal))
        .collect();
    let p0: Vec<f64> = ctrl.net.params().values.iter().map(|&v| v as f64).collect();
    let fd = finite_diff_grad(&p0, |p| {
        transitions
            .iter()
            .zip(&ys)
            .map(|(t, y)| {
                let x: Vec<f64> = t.theta.0.iter().map(|v| 2.0 * v - 1.0).collect();
                (reference_forward(&ctrl.net, p, &x).unwrap()[t.action.id()] - y).powi(2)
            })
            .sum::<f64>()
            / (2.0 * transitions.len() as f64)
    })
    .unwrap();
    let f_control = fraction_ok(&td.grads.values, &fd);

    let f_combined = miniature_combined(&mut rng);
    let elapsed = start.elapsed();
    let pass = [f_perception, f_control, f_combined].iter().all(|&f| f >= GRAD_PASS_FRACTION) && elapsed < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "within {GRAD_REL_TOL:e}: perception {:.2}%, control {:.2}%, combined {:.2}% (need {:.0}%); {:.1}s",
            100.0 * f_perception,
            100.0 * f_control,
            100.0 * f_combined,
            100.0 * GRAD_PASS_FRACTION,
            elapsed.as_secs_f64()
        ),
    )
}

/// δ_L over the perception parameters of an 8×8 conv net feeding a small
/// control head, against finite differences of β·L_p + (1−β)·L_q with the
/// Bellman targets frozen.
fn miniature_combined(rng: &mut ChaCha8Rng) -> f64 {
    let mut perception = Network::new(
        Shape::new(1, 8, 8),
        vec![
            LayerSpec::conv(1, 2, 3, 1, Activation::Relu),
            LayerSpec::dense(72, 5, Activation::Sigmoid),
        ],
    )
    .unwrap();
    let mut control = Network::new(
        Shape::vector(5),
        vec![
            LayerSpec::dense(5, 6, Activation::Relu),
            LayerSpec::dense(6, NUM_ACTIONS, Activation::Linear),
        ],
    )
    .unwrap();
    perception.init_glorot(rng);
    control.init_glorot(rng);
    let n = 4;
    let beta = 0.8;
    let images: Vec<Vec<f32>> = (0..n).map(|_| (0..64).map(|_| rng.random::<f32>()).collect()).collect();
    let labels: Vec<[f64; 5]> = (0..n).map(|_| [0; 5].map(|_| rng.random::<f64>())).collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_ACTIONS)).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();

    let mut gp = perception.zero_grads();
    let mut gq = perception.zero_grads();
    let mut tapes = Vec::new();
    let mut batch = Vec::new();
    for (j, img) in images.iter().enumerate() {
        let (out, tape) = perception.forward_slice(img).unwrap();
        let up: Vec<f32> = (0..5).map(|k| (out.data[k] - labels[j][k] as f32) / n as f32).collect();
        perception.backward_into(&tape, &up, &mut gp, false).unwrap();
        batch.push(ThetaTransition {
            theta: ThetaVec::from_f32(&out.data),
            action: ReachAction::ALL[actions[j]],
            reward: 0.0,
            next_theta: ThetaVec([0.5; 5]),
            terminal: true,
        });
        tapes.push(tape);
    }
    let td = td_loss_with_targets(&ControlNet { net: control.clone() }, &batch, &ys).unwrap();
    for (tape, g) in tapes.iter().zip(&td.bottleneck) {
        perception.backward_into(tape, g, &mut gq, false).unwrap();
    }
    let mixed = mix_gradients(&gp, &gq, beta).unwrap();

    let cp: Vec<f64> = control.params().values.iter().map(|&v| v as f64).collect();
    let p0: Vec<f64> = perception.params().values.iter().map(|&v| v as f64).collect();
    let imgs: Vec<Vec<f64>> = images.iter().map(|i| i.iter().map(|&v| v as f64).collect()).collect();
    let fd = finite_diff_grad(&p0, |pp| {
        let (mut lp, mut lq) = (0.0, 0.0);
        for j in 0..n {
            let y = reference_forward(&perception, pp, &imgs[j]).unwrap();
            lp += y.iter().zip(&labels[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let x: Vec<f64> = y.iter().map(|v| 2.0 * v - 1.0).collect();
            lq += (reference_forward(&control, &cp, &x).unwrap()[actions[j]] - ys[j]).powi(2);
        }
        (beta * lp + (1.0 - beta) * lq) / (2.0 * n as f64)
    })
    .unwrap();
    fraction_ok(&mixed.values, &fd)
}

fn mixing_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst = 0.0f64;
    let mut endpoints_exact = true;
    for _ in 0..1000 {
        let len = rng.random_range(1..64);
        let gp = GradSet {
            values: (0..len).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
        };
        let gq = GradSet {
            values: (0..len).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
        };
        for beta in [0.0, 0.25, 0.8, 1.0] {
            let m = mix_gradients(&gp, &gq, beta).unwrap();
            for ((p, q), v) in gp.values.iter().zip(&gq.values).zip(&m.values) {
                // error in units of the f32 rounding of the inputs' scale
                let exact = beta * *p as f64 + (1.0 - beta) * *q as f64;
                let scale = p.abs().max(q.abs()).max(f32::MIN_POSITIVE) as f64;
                worst = worst.max((*v as f64 - exact).abs() / (scale * f32::EPSILON as f64));
            }
            let endpoint = if beta == 1.0 { Some(&gp) } else if beta == 0.0 { Some(&gq) } else { None };
            if let Some(e) = endpoint {
                endpoints_exact &= m.values.iter().zip(&e.values).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    // two roundings of the β-products plus one of the sum
    let pass = worst <= 2.0 && endpoints_exact;
    outcome(
        pass,
        format!("1000 pairs x 4 betas: max error {worst:.2} ulp of input scale (limit 2), endpoints bit-exact: {endpoints_exact}"),
    )
}

/// Independent forward kinematics and action semantics for the oracle.
fn oracle_distance(arm: &ArmModel, q: [f64; 3], target: [f64; 2]) -> f64 {
    let a1 = q[0];
    let a2 = a1 + q[1];
    let a3 = a2 + q[2];
    let x = arm.links[0] * a1.cos() + arm.links[1] * a2.cos() + arm.links[2] * a3.cos();
    let y = arm.links[0] * a1.sin() + arm.links[1] * a2.sin() + arm.links[2] * a3.sin();
    ((x - target[0]).powi(2) + (y - target[1]).powi(2)).sqrt()
}

fn bellman_and_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut bellman_bad = 0;
    for _ in 0..10_000 {
        let r = rng.random_range(0.0..=1.0f64).round();
        let gamma = rng.random_range(0.0..1.0);
        let terminal = rng.random_bool(0.3);
        let q: Vec<f32> = (0..NUM_ACTIONS).map(|_| rng.random_range(-20.0f32..20.0)).collect();
        let mut m = f32::NEG_INFINITY;
        for &v in &q {
            if v > m {
                m = v;
            }
        }
        let expect = if terminal { r } else { r + gamma * m as f64 };
        if bellman_target(r, &q, gamma, terminal) != expect {
            bellman_bad += 1;
        }
    }

    let arm = ArmModel::default();
    let cam = Camera::default();
    let step = arm.action_delta();
    let mut oracle_bad = 0;
    for i in 0..1000 {
        // half sampled tasks, half arbitrary configurations up to the joint limits
        let state = if i % 2 == 0 {
            arm.sample_task(&mut rng, &cam.viewport).unwrap()
        } else {
            SceneState {
                q: [0; 3].map(|_| rng.random_range(-2.8..=2.8)),
                target: [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)],
            }
        };
        let mut best = (f64::INFINITY, usize::MAX);
        for id in 0..NUM_ACTIONS {
            let (joint, code) = (id / 3, id % 3);
            let mut q = state.q;
            let delta = [step, -step, 0.0][code];
            q[joint] = (q[joint] + delta).clamp(arm.joint_limits[joint][0], arm.joint_limits[joint][1]);
            let d = oracle_distance(&arm, q, state.target);
            if d < best.0 {
                best = (d, id);
            }
        }
        if arm.guided_action(&state).id() != best.1 {
            oracle_bad += 1;
        }
    }
    outcome(
        bellman_bad == 0 && oracle_bad == 0,
        format!("bellman mismatches {bellman_bad}/10000, guided-action mismatches {oracle_bad}/1000"),
    )
}

fn batch_accounting() -> Outcome {
    let arm = ArmModel::default();
    let cam = Camera::default();
    let ds = build_dataset(40, 400, 401, &arm, &cam, &PerturbationSpec::default()).unwrap();
    let pool = split_dataset(&ds, 0.0).train_real;
    let config = FinetuneConfig {
        warmup: 2000,
        replay_capacity: 2000,
        steps: 100,
        ..FinetuneConfig::default()
    };
    let policy = CombinedPolicy {
        perception: PerceptionNet::new(402),
        control: ControlNet::new(403),
    };
    let mut ft = Finetuner::new(policy, &arm, &cam, &ds, pool, config).unwrap();
    ft.warm_up();
    let mut bad = Vec::new();
    for step in 0..100 {
        ft.collect();
        let (_, rec) = ft.step(step).unwrap();
        let mut task = rec.task_ids.clone();
        let mut sim = rec.perception_sim_ids.clone();
        task.sort_unstable();
        sim.sort_unstable();
        let ok = rec.task_ids.len() == 64 && rec.n_perception == 256 && rec.n_pseudo_real == 192 && task == sim;
        if !ok {
            bad.push(step);
        }
    }
    outcome(
        bad.is_empty(),
        format!("100 steps of 64 task + (64 same sim + 192 pseudo-real) frames; violations at {bad:?}"),
    )
}

fn unit_coherence() -> Outcome {
    let scale = Camera::default().px_per_cm();
    let rows = [(4.598, 1.929), (3.568, 1.497), (3.449, 1.447)];
    let worst = rows.iter().map(|(cm, px)| (cm * scale - px).abs()).fold(0.0, f64::max);
    outcome(
        worst <= UNIT_TOL_PX,
        format!("{scale} px/cm; max |cm x scale - px| = {worst:.4} px (limit {UNIT_TOL_PX})"),
    )
}

fn summary(out: &Path) -> Option<Vec<SummaryRow>> {
    parse_rows(&out.join("reports/summary.csv"), Format::Csv).ok()
}

fn row<'a>(rows: &'a [SummaryRow], nets: &str) -> Option<&'a SummaryRow> {
    rows.iter().find(|r| r.nets == nets)
}

/// Runs the default desk pipeline once; criteria 6 and 7 read its reports.
fn desk_pipeline(out: &Path) -> (Result<(), String>, Duration) {
    let start = Instant::now();
    let r = run_from(["handeye", "--out", out.to_str().unwrap(), "--force", "pipeline"]).map_err(|e| e.to_string());
    (r, start.elapsed())
}

fn directional(rows: Option<&[SummaryRow]>, run: &Result<(), String>, elapsed: Duration) -> Outcome {
    let (Some(rows), Ok(())) = (rows, run) else {
        return outcome(false, format!("pipeline did not finish: {:?}", run.as_ref().err()));
    };
    let (Some(i), Some(f), Some(c)) = (row(rows, "Initial"), row(rows, "Fine-tuned"), row(rows, "CR")) else {
        return outcome(false, "summary lacks a variant".into());
    };
    let checks = [
        ("R(CR) >= R(FT)", c.rbar >= f.rbar),
        ("R(FT) >= R(Init)", f.rbar >= i.rbar),
        ("R(FT) - R(Init) >= 0.1", f.rbar - i.rbar >= 0.1),
        ("d(FT) <= 0.9 d(Init)", f.d_med_cm <= 0.9 * i.d_med_cm),
        ("d(CR) <= d(FT) + 0.5", c.d_med_cm <= f.d_med_cm + 0.5),
        ("runtime <= 60 min", elapsed <= PIPELINE_BUDGET),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "R Init {:.3} / FT {:.3} / CR {:.3}; d_med Init {:.2} / FT {:.2} / CR {:.2} cm; {:.0} min; failed: {failed:?}",
            i.rbar,
            f.rbar,
            c.rbar,
            i.d_med_cm,
            f.d_med_cm,
            c.d_med_cm,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn cr_competence(rows: Option<&[SummaryRow]>) -> Outcome {
    match rows.and_then(|r| row(r, "CR")) {
        Some(c) => outcome(
            c.rbar >= 0.5 && c.d_med_cm <= 6.0,
            format!("400 trials: R {:.3} (need 0.5), d_med {:.2} cm (need <= 6)", c.rbar, c.d_med_cm),
        ),
        None => outcome(false, "no CR summary".into()),
    }
}

const REDUCED: &str = r#"
seed = 5
[dataset]
n_sim = 60
n_pseudo_real = 240
[perception]
steps = 20
batch_size = 64
[control]
env_steps = 4000
replay_capacity = 4000
eval_every = 2000
eval_trials = 4
[selection]
control_seeds = 2
trials = 5
[finetune]
steps = 10
warmup = 200
replay_capacity = 1000
task_batch = 16
perception_batch = 64
eval_every = 5
eval_trials = 4
[eval]
trials = 20
"#;

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("reduced.toml");
    std::fs::write(&cfg, REDUCED).unwrap();
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let args = ["handeye", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "pipeline"];
        if let Err(e) = run_from(args) {
            return outcome(false, format!("run {run} failed: {e}"));
        }
        manifests.push(Manifest::load(&out).unwrap());
    }
    let (a, b) = (&manifests[0], &manifests[1]);
    let differing: Vec<&String> = a.artifacts.keys().filter(|k| a.artifacts.get(*k) != b.artifacts.get(*k)).collect();
    let identical = a == b
        && a.artifacts.keys().all(|rel| {
            std::fs::read(dir.join("a").join(rel)).ok() == std::fs::read(dir.join("b").join(rel)).ok()
        });
    outcome(
        identical,
        format!("{} artifacts over two seeded pipeline runs; differing: {differing:?}", a.artifacts.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strict = args.iter().any(|a| a == "--strict");
    let only: Option<Vec<usize>> = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    if wanted(1) {
        report(1, "gradient correctness", gradient_correctness());
    }
    if wanted(2) {
        report(2, "mixing identity", mixing_identity());
    }
    if wanted(3) {
        report(3, "bellman/oracle equivalence", bellman_and_oracle());
    }
    if wanted(4) {
        report(4, "batch accounting", batch_accounting());
    }
    if wanted(5) {
        report(5, "unit coherence", unit_coherence());
    }
    if wanted(6) || wanted(7) {
        let out = dir.path().join("desk");
        let (run, elapsed) = desk_pipeline(&out);
        let rows = summary(&out);
        if wanted(6) {
            report(6, "directional reproduction", directional(rows.as_deref(), &run, elapsed));
        }
        if wanted(7) {
            report(7, "CR competence", cr_competence(rows.as_deref()));
        }
    }
    if wanted(8) {
        report(8, "determinism", determinism(dir.path()));
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

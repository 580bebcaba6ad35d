//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use hcl_core::backbone::{init_backbone, BackboneConfig, PeftConfig, PeftKind, PeftParams, Pooling};
use hcl_core::datio::{save_state, synth_stream, Scenario, SynthSpec, TaskStream};
use hcl_core::engine::baseline::train_naive_sequence;
use hcl_core::engine::fewshot::{run_episodes, FewShotConfig};
use hcl_core::engine::{continue_sequence, train_sequence, ModelState, TrainConfig};
use hcl_core::evaluation::{caa, faa, ffm, tii_accuracy, AccuracyMatrix};
use hcl_core::numerics::{finite_diff_check, FdOptions, GradBundle, Tensor2};
use hcl_core::objectives::{cr_loss, tap_loss, tii_loss, wtp_loss, CrConfig, LinearHead, PseudoBatch, TiiHead, WtpParams};
use hcl_core::theory::{empirical_bounds_from_model, random_table, run_random_suite, til_reduction, TableShape};
use hcl_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn identity_suite() -> Result<Outcome> {
    let r = run_random_suite(10_000, 1, 0.01)?;
    outcome(r.identity_max_deviation <= 1e-9, format!("max deviation {:.2e} over {} tables", r.identity_max_deviation, r.tables))
}

fn bound_suite() -> Result<Outcome> {
    let r = run_random_suite(10_000, 2, 0.01)?;
    let pass = r.cil_violations == 0 && r.dil_violations == 0 && r.necessity_violations == 0;
    outcome(
        pass,
        format!(
            "CIL {} / DIL {} / necessity {} violations over {} tables ({} vacuous)",
            r.cil_violations, r.dil_violations, r.necessity_violations, r.tables, r.vacuous
        ),
    )
}

fn til_suite() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let shape = TableShape { tasks: 2 + i % 4, classes_per_task: 2 + i % 3, samples: 8 };
        worst = worst.max(til_reduction(&random_table(Scenario::Til, shape, 0.01, &mut rng)?));
    }
    outcome(worst <= 1e-12, format!("max |H_TAP - H_WTP| {worst:.2e} over 1000 tables"))
}

fn gradient_suite() -> Result<Outcome> {
    let mut worst = [0.0f64; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let reps = Tensor2::randn(4, 6, 1.0, &mut rng);
        let means: Vec<Vec<f64>> = (0..3).map(|_| Tensor2::randn(1, 6, 1.0, &mut rng).into_vec()).collect();
        let f = |p: &Tensor2| {
            let (l, g) = cr_loss(p, &means, 0.8)?;
            let mut b = GradBundle::new(l);
            b.insert("x", g);
            Ok(b)
        };
        worst[0] = worst[0].max(finite_diff_check(&reps, f, &FdOptions::default())?);
    }

    let cfg = BackboneConfig { token_count: 2, token_dim: 8, ffn_dim: 16, input_dim: 16, ..BackboneConfig::default() };
    for i in 0..10u64 {
        for kind in PeftKind::ALL {
            let bb = init_backbone(100 + i, &cfg)?;
            let peft_cfg = PeftConfig { kind, prompt_len: 3, lora_rank: 4, adapter_dim: 4, ..PeftConfig::default() };
            let peft = PeftParams::fresh(&peft_cfg, &cfg, &mut rng)?.randomized(0.3, &mut rng);
            let head = LinearHead { weight: Tensor2::randn(cfg.output_dim(), 3, 0.3, &mut rng), bias: Tensor2::randn(1, 3, 0.3, &mut rng) };
            let xs: Vec<Vec<f64>> = (0..5).map(|_| Tensor2::randn(1, 16, 1.0, &mut rng).into_vec()).collect();
            let ys = [0, 1, 2, 1, 0];
            let means: Vec<Vec<f64>> = (0..2).map(|_| Tensor2::randn(1, cfg.output_dim(), 0.5, &mut rng).into_vec()).collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
            let params = WtpParams { peft, head };
            let cr = CrConfig::default();
            let f = |p: &WtpParams| Ok(wtp_loss(&bb, p, &batch, &means, &cr)?.bundle);
            // a few coordinates carry gradients near 1e-7; at the default step
            // the central difference loses digits to cancellation (the error
            // grows as 1/epsilon), so this loss takes the larger step
            let opts = FdOptions { epsilon: 1e-4, max_coords: 300, denominator_floor: 1e-6, ..FdOptions::default() };
            worst[1] = worst[1].max(finite_diff_check(&params, f, &opts)?);

            for pooling in [Pooling::Mean, Pooling::Concat] {
                let pcfg = BackboneConfig { pooling, token_count: 3, token_dim: 8, ffn_dim: 16, input_dim: 24, ..BackboneConfig::default() };
                let bb = init_backbone(200 + i, &pcfg)?;
                let peft_cfg = PeftConfig { kind, prompt_len: 4, lora_rank: 4, adapter_dim: 4, ..PeftConfig::default() };
                let peft = PeftParams::fresh(&peft_cfg, &pcfg, &mut rng)?.randomized(0.5, &mut rng);
                let x = Tensor2::randn(1, pcfg.input_dim, 1.0, &mut rng).into_vec();
                let probe = Tensor2::randn(1, pcfg.output_dim(), 1.0, &mut rng).into_vec();
                let f = |p: &PeftParams| {
                    let (h, cache) = bb.forward_with_cache(&x, p)?;
                    let mut g = bb.backward(&cache, p, &probe)?;
                    g.loss = h.iter().zip(&probe).map(|(a, b)| a * b).sum();
                    Ok(g)
                };
                worst[4] = worst[4].max(finite_diff_check(&peft, f, &FdOptions { max_coords: 400, ..FdOptions::default() })?);
            }
        }

        let batches: Vec<PseudoBatch> =
            (0..4).map(|c| PseudoBatch { task: c / 2, class_col: c, reps: Tensor2::randn(3, 6, 1.0, &mut rng) }).collect();
        let head = LinearHead { weight: Tensor2::randn(6, 4, 0.5, &mut rng), bias: Tensor2::randn(1, 4, 0.5, &mut rng) };
        let mut omega = TiiHead::new(6);
        omega.add_task(&[0, 1])?;
        omega.add_task(&[2, 3])?;
        omega.linear = head.clone();
        worst[2] = worst[2].max(finite_diff_check(&omega, |p: &TiiHead| tii_loss(p, &batches), &FdOptions::default())?);
        worst[3] = worst[3].max(finite_diff_check(&head, |p: &LinearHead| tap_loss(p, &batches), &FdOptions::default())?);
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-4),
        format!("max rel err CR {:.1e} WTP {:.1e} TII {:.1e} TAP {:.1e} forward_adapted {:.1e}", worst[0], worst[1], worst[2], worst[3], worst[4]),
    )
}

fn freezing_and_determinism() -> Result<Outcome> {
    let spec = SynthSpec { tasks: 5, ..SynthSpec::default() };
    let stream = synth_stream(5, &spec)?.stream;
    let cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
    let mut state = ModelState::new(cfg.clone(), Scenario::Cil)?;
    let mut snapshots = Vec::new();
    for k in 1..=5 {
        continue_sequence(&mut state, &stream, Some(k), &mut |_| {})?;
        snapshots.push(serde_json::to_vec(&state.peft_per_task[k - 1])?);
    }
    let frozen = (0..4).filter(|&i| serde_json::to_vec(&state.peft_per_task[i]).ok().as_ref() == Some(&snapshots[i])).count();

    let dir = tempfile::tempdir()?;
    let (a, _) = train_sequence(&stream, &cfg, &mut |_| {})?;
    let (b, _) = train_sequence(&stream, &cfg, &mut |_| {})?;
    save_state(&a, &dir.path().join("a.json"))?;
    save_state(&b, &dir.path().join("b.json"))?;
    let same = std::fs::read(dir.path().join("a.json"))? == std::fs::read(dir.path().join("b.json"))?;
    let resumed_matches = a == state;
    outcome(
        frozen == 4 && same && resumed_matches,
        format!("{frozen}/4 adapters unchanged, state files identical: {same}, stepwise run equals one-shot run: {resumed_matches}"),
    )
}

struct CilRun {
    stream: TaskStream,
    state: ModelState,
    ours: AccuracyMatrix,
}

fn cil_run(seed: u64, separation: f64) -> Result<CilRun> {
    let spec = SynthSpec { separation, ..SynthSpec::default() };
    let stream = synth_stream(seed, &spec)?.stream;
    let (state, ours) = train_sequence(&stream, &TrainConfig { seed, ..TrainConfig::default() }, &mut |_| {})?;
    Ok(CilRun { stream, state, ours })
}

fn comparative(runs: &[CilRun]) -> Result<Outcome> {
    let (mut of, mut oh, mut nf, mut nh) = (vec![], vec![], vec![], vec![]);
    for (seed, run) in runs.iter().enumerate() {
        let (_, naive) = train_naive_sequence(&run.stream, &TrainConfig { seed: seed as u64, ..TrainConfig::default() })?;
        of.push(faa(&run.ours)?);
        oh.push(ffm(&run.ours)?);
        nf.push(faa(&naive)?);
        nh.push(ffm(&naive)?);
    }
    let (of, oh, nf, nh) = (mean(&of), mean(&oh), mean(&nf), mean(&nh));
    outcome(of > nf && oh < nh, format!("FAA {of:.3} vs naive {nf:.3}, FFM {oh:.3} vs naive {nh:.3} over {} seeds", runs.len()))
}

fn tests_of(stream: &TaskStream) -> Vec<&hcl_core::datio::EmbeddingDataset> {
    stream.tasks.iter().map(|t| &t.test).collect()
}

fn tii_efficacy(sep4: &CilRun) -> Result<Outcome> {
    let mut accs = vec![tii_accuracy(&sep4.state, &tests_of(&sep4.stream))?];
    for separation in [2.0, 0.0] {
        let run = cil_run(0, separation)?;
        accs.push(tii_accuracy(&run.state, &tests_of(&run.stream))?);
    }
    let chance = 1.0 / sep4.stream.len() as f64;
    let monotone = accs.windows(2).all(|w| w[0] > w[1]);
    let near_chance = (accs[2] - chance).abs() < 0.1;
    outcome(
        accs[0] >= 0.9 && monotone && near_chance,
        format!("TII accuracy {:.3} / {:.3} / {:.3} at separation 4 / 2 / 0, chance {chance:.2}", accs[0], accs[1], accs[2]),
    )
}

fn metrics_oracle() -> Result<Outcome> {
    let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]])?;
    let (a, c, f) = (faa(&m)?, caa(&m)?, ffm(&m)?);
    // (0.8 + 0.7) / 2, (0.9 + 0.75) / 2, 0.9 − 0.8
    let pass = (a - 0.75).abs() <= 1e-12 && (c - 0.825).abs() <= 1e-12 && (f - 0.1).abs() <= 1e-12;
    outcome(pass, format!("FAA {a} CAA {c} FFM {f}"))
}

fn empirical_bound(run: &CilRun) -> Result<Outcome> {
    let r = empirical_bounds_from_model(&run.state, &tests_of(&run.stream))?;
    outcome(r.holds, format!("loss {:.4} <= bound {:.4} (delta {:.4}, epsilon {:.4}, eta {:.4})", r.loss, r.bound, r.delta, r.epsilon, r.eta))
}

fn few_shot() -> Result<Outcome> {
    // stream and holdout classes share an 8-dimensional informative subspace
    let spec = SynthSpec { holdout_classes: 10, informative_dims: Some(8), nuisance_std: 3.0, ..SynthSpec::default() };
    let mut models = Vec::new();
    for seed in 0..5u64 {
        let out = synth_stream(seed, &spec)?;
        let (state, _) = train_sequence(&out.stream, &TrainConfig { seed, ..TrainConfig::default() }, &mut |_| {})?;
        models.push((state, out.holdout.expect("holdout requested")));
    }

    let control = FewShotConfig { shuffle_query_labels: true, ..FewShotConfig::default() };
    let mut chance = Vec::new();
    for seed in 0..50u64 {
        let (state, pool) = &models[(seed % 5) as usize];
        chance.extend(run_episodes(state, pool, &control, seed, 1)?);
    }
    let chance = mean(&chance);

    let on = FewShotConfig::default();
    let off = FewShotConfig { use_shared_lora: false, ..on.clone() };
    let mut diffs = Vec::new();
    for (seed, (state, pool)) in models.iter().enumerate() {
        let a = run_episodes(state, pool, &on, 1000 + seed as u64, 100)?;
        let b = run_episodes(state, pool, &off, 1000 + seed as u64, 100)?;
        diffs.push(mean(&a) - mean(&b));
    }
    let gap = mean(&diffs);
    let per_seed: Vec<String> = diffs.iter().map(|d| format!("{d:+.4}")).collect();
    outcome(
        (chance - 0.2).abs() <= 0.05 && gap >= 0.0,
        format!("shuffled-label accuracy {chance:.3}; shared LoRA on - off {gap:+.4} (per seed {})", per_seed.join(" ")),
    )
}

fn report(name: &str, start: Instant, r: Result<Outcome>) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(o) => {
            println!("{} {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {name}: error: {e} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    let t = Instant::now();
    ok &= report("identity suite", t, identity_suite());
    let t = Instant::now();
    ok &= report("bound suite", t, bound_suite());
    let t = Instant::now();
    ok &= report("TIL reduction", t, til_suite());
    let t = Instant::now();
    ok &= report("gradient suite", t, gradient_suite());
    let t = Instant::now();
    ok &= report("freezing and determinism", t, freezing_and_determinism());

    let t = Instant::now();
    let runs: Result<Vec<CilRun>> = (0..5).map(|seed| cil_run(seed, 4.0)).collect();
    match runs {
        Ok(runs) => {
            ok &= report("comparative forgetting", t, comparative(&runs));
            let t = Instant::now();
            ok &= report("TII efficacy", t, tii_efficacy(&runs[0]));
            let t = Instant::now();
            ok &= report("metrics oracle", t, metrics_oracle());
            let t = Instant::now();
            ok &= report("empirical bound on a trained model", t, empirical_bound(&runs[0]));
        }
        Err(e) => {
            for name in ["comparative forgetting", "TII efficacy", "empirical bound on a trained model"] {
                println!("FAIL {name}: training failed: {e}");
            }
            report("metrics oracle", t, metrics_oracle());
            ok = false;
        }
    }
    let t = Instant::now();
    ok &= report("few-shot protocol", t, few_shot());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if a gated criterion fails.

use std::time::Instant;

use arise_core::beam::{mvdr_bin, BfOption, ScmPair};
use arise_core::engine::{process_utterance, run_utterance, ArConfig, ArEngine, ArInputs};
use arise_core::estimator::{CompactEstimator, OracleEstimator};
use arise_core::mask::{apply_mask, oracle_crm, DEFAULT_CLIP_MAG};
use arise_core::metrics::si_sdr;
use arise_core::scene::{generate_scene, ArrayGeometry, SceneSpec};
use arise_core::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram, Stft, StftConfig};
use arise_core::train::toy::{evaluate_si_sdr, toy_set, toy_stft, ToyScene};
use arise_core::train::{
    bptt_gradient, inference_loss, loss_l1, rebuild_cache, train, CacheRecord, Method, RdsCache,
    TrainConfig, Utterance,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn random_mixture(m: usize, frames: usize, bins: usize, seed: u64) -> MultichannelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultichannelSpectrogram::from_vec(m, frames, bins, random_complex(&mut rng, m * frames * bins))
        .unwrap()
}

fn random_single(frames: usize, bins: usize, seed: u64) -> SingleChannelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SingleChannelSpectrogram::from_vec(frames, bins, random_complex(&mut rng, frames * bins))
        .unwrap()
}

fn stft_round_trip() -> Outcome {
    let start = Instant::now();
    let stft = Stft::new(StftConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x: Vec<f64> = (0..32_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft.analyze_signal(&x).unwrap();
        let back = stft.synthesize_trimmed(&spec, x.len()).unwrap();
        let err: f64 = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 1.0,
        format!("max relative L2 error {worst:.2e}, {secs:.3} s"),
    )
}

fn hermitian_outer(v: &[Complex64]) -> Vec<Complex64> {
    let m = v.len();
    let mut out = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = v[i] * v[j].conj();
        }
    }
    out
}

fn mvdr_closed_forms() -> Outcome {
    let m = 4;
    let q = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let identity: Vec<Complex64> = (0..m * m)
        .map(|k| Complex64::new(if k % (m + 1) == 0 { 1.0 } else { 0.0 }, 0.0))
        .collect();
    let mut e_q = vec![Complex64::new(0.0, 0.0); m];
    e_q[q] = Complex64::new(1.0, 0.0);
    let w = mvdr_bin(&hermitian_outer(&e_q), &identity, m, q, 0.0)
        .unwrap()
        .w;
    let identity_err = w
        .iter()
        .zip(&e_q)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);

    let mut rank_one_err: f64 = 0.0;
    for _ in 0..20 {
        let d = random_complex(&mut rng, m);
        let sigma2 = rng.gen_range(0.1..10.0);
        let phi_n: Vec<Complex64> = identity.iter().map(|z| z * sigma2).collect();
        let w = mvdr_bin(&hermitian_outer(&d), &phi_n, m, q, 0.0).unwrap().w;
        let norm2: f64 = d.iter().map(|z| z.norm_sqr()).sum();
        for i in 0..m {
            rank_one_err = rank_one_err.max((w[i] - d[i] * d[q].conj() / norm2).norm());
        }
        let response: Complex64 = w.iter().zip(&d).map(|(wi, di)| wi.conj() * di).sum();
        rank_one_err = rank_one_err.max((response - d[q]).norm());
    }

    let mut scale_err: f64 = 0.0;
    for _ in 0..20 {
        let a = random_complex(&mut rng, m * m);
        let b = random_complex(&mut rng, m * m);
        let gram = |x: &[Complex64]| {
            let mut g = vec![Complex64::new(0.0, 0.0); m * m];
            for i in 0..m {
                for j in 0..m {
                    g[i * m + j] = (0..m).map(|k| x[i * m + k] * x[j * m + k].conj()).sum();
                }
            }
            g
        };
        let (phi_x, phi_n) = (gram(&a), gram(&b));
        let base = mvdr_bin(&phi_x, &phi_n, m, q, 0.0).unwrap().w;
        for (cx, cn) in [(7.5, 1.0), (1.0, 0.02), (130.0, 0.3)] {
            let sx: Vec<Complex64> = phi_x.iter().map(|z| z * cx).collect();
            let sn: Vec<Complex64> = phi_n.iter().map(|z| z * cn).collect();
            let w = mvdr_bin(&sx, &sn, m, q, 0.0).unwrap().w;
            for (u, v) in w.iter().zip(&base) {
                scale_err = scale_err.max((u - v).norm());
            }
        }
    }
    outcome(
        identity_err < 1e-10 && rank_one_err < 1e-10 && scale_err < 1e-12,
        format!("identity {identity_err:.1e}, rank-1 {rank_one_err:.1e}, scale {scale_err:.1e}"),
    )
}

fn scm_brute_force() -> Outcome {
    let (m, bins, frames) = (3, 5, 100);
    let x = random_mixture(m, frames, bins, 3);
    let y = random_mixture(m, frames, bins, 4);
    let mut scm = ScmPair::new(m, bins, 1.0).unwrap();
    for t in 0..frames {
        scm.update(x.frame(t), y.frame(t)).unwrap();
    }
    let mut worst: f64 = 0.0;
    for f in 0..bins {
        let mut bx = vec![Complex64::new(0.0, 0.0); m * m];
        let mut bn = bx.clone();
        for t in 0..frames {
            let xv: Vec<Complex64> = (0..m).map(|c| x.get(c, t, f)).collect();
            let nv: Vec<Complex64> = (0..m).map(|c| y.get(c, t, f) - xv[c]).collect();
            for (acc, add) in bx.iter_mut().zip(hermitian_outer(&xv)) {
                *acc += add;
            }
            for (acc, add) in bn.iter_mut().zip(hermitian_outer(&nv)) {
                *acc += add;
            }
        }
        for (got, want) in [(scm.phi_x(f), &bx), (scm.phi_n(f), &bn)] {
            let scale = want.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (a, b) in got.iter().zip(want.iter()) {
                worst = worst.max((a - b).norm() / scale);
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("max relative deviation {worst:.1e} over {frames} frames"),
    )
}

fn oracle_end_to_end() -> Outcome {
    let start = Instant::now();
    let stft = Stft::new(StftConfig::default()).unwrap();
    let geometry = ArrayGeometry::default();
    let cfg = ArConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut gain = 0.0;
    let scenes = 20;
    for _ in 0..scenes {
        let spec = SceneSpec::random(&mut rng, 4, (0.0, 0.0), 2.0);
        let mix = generate_scene(&spec, &geometry, 16_000).unwrap();
        let y = stft.analyze(&mix.mixture).unwrap();
        let x_ref = stft.analyze_signal(&mix.target[0]).unwrap();
        let oracle = OracleEstimator::new(&x_ref, &y.channel(0), DEFAULT_CLIP_MAG).unwrap();
        let out = process_utterance(&cfg, &oracle, &y).unwrap();
        let wave = stft.synthesize_trimmed(&out, mix.len()).unwrap();
        gain += si_sdr(&wave, &mix.target[0]).unwrap()
            - si_sdr(&mix.mixture[0], &mix.target[0]).unwrap();
    }
    gain /= scenes as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        gain >= 10.0 && secs < 120.0,
        format!("mean SI-SDR improvement {gain:.2} dB over {scenes} scenes, {secs:.1} s"),
    )
}

fn engine_equivalences() -> Outcome {
    let (m, frames, bins) = (3, 40, 7);
    let y = random_mixture(m, frames, bins, 5);
    let est = CompactEstimator::random(m, 8, 6);
    let mut ok = true;
    let mut notes = Vec::new();
    for ar in [ArInputs::Both, ArInputs::BfOnly, ArInputs::NnOnly] {
        for bf_option in [BfOption::CurrFrame, BfOption::PrevFrame] {
            let cfg = ArConfig {
                ar_inputs: ar,
                bf_option,
                ..ArConfig::default()
            };
            let offline = process_utterance(&cfg, &est, &y).unwrap();
            let mut engine = ArEngine::new(cfg, &est, m, bins).unwrap();
            let online: Vec<Complex64> = (0..frames)
                .flat_map(|t| engine.process_frame(y.frame(t)).unwrap().estimate)
                .collect();
            ok &= online == offline.as_slice();

            let cut = 17;
            let mut perturbed = y.clone();
            for t in cut..frames {
                for z in perturbed.frame_mut(t) {
                    *z = *z * 3.0 + 0.25;
                }
            }
            let changed = process_utterance(&cfg, &est, &perturbed).unwrap();
            ok &= changed.as_slice()[..cut * bins] == offline.as_slice()[..cut * bins];
            ok &= changed.as_slice()[cut * bins..] != offline.as_slice()[cut * bins..];
        }
    }
    notes.push("online/offline and future perturbation bit-exact".to_string());

    let x_ref = random_single(frames, bins, 7);
    let oracle = OracleEstimator::new(&x_ref, &y.channel(0), DEFAULT_CLIP_MAG).unwrap();
    let cfg = ArConfig {
        ar_inputs: ArInputs::None,
        ..ArConfig::default()
    };
    let engine_out = process_utterance(&cfg, &oracle, &y).unwrap();
    let plain = apply_mask(
        &oracle_crm(&x_ref, &y.channel(0), DEFAULT_CLIP_MAG).unwrap(),
        &y,
        0,
    )
    .unwrap();
    let same = engine_out == plain;
    ok &= same;
    notes.push(format!("ar=none equals plain masking: {same}"));
    outcome(ok, notes.join("; "))
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > 1e-8)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

fn gradient_checks() -> Outcome {
    let (m, frames, bins, hidden) = (2, 8, 9, 16);
    let est = CompactEstimator::random(m, hidden, 8);
    let y = random_mixture(m, frames, bins, 9);
    let bf = random_single(frames, bins, 10);
    let nn = random_single(frames, bins, 11);
    let features = est.encode_sequence(&y, Some(&bf), Some(&nn), 0).unwrap();
    let weights = random_single(frames, bins, 12);
    let objective = |e: &CompactEstimator| -> f64 {
        let rec = e.forward_sequence(&features).unwrap();
        rec.outputs
            .iter()
            .zip(weights.as_slice())
            .map(|(o, c)| (c.conj() * o).re)
            .sum()
    };
    let rec = est.forward_sequence(&features).unwrap();
    let analytic = est
        .backward(&rec, weights.as_slice(), false)
        .unwrap()
        .params;
    let h = 1e-5;
    let numeric: Vec<f64> = (0..est.params().len())
        .map(|i| {
            let mut plus = est.clone();
            plus.params_mut()[i] += h;
            let mut minus = est.clone();
            minus.params_mut()[i] -= h;
            (objective(&plus) - objective(&minus)) / (2.0 * h)
        })
        .collect();
    let cell_err = max_relative_error(&analytic, &numeric);

    let (frames, bins, hidden) = (4, 3, 6);
    let est = CompactEstimator::random(m, hidden, 13);
    let y = random_mixture(m, frames, bins, 14);
    let target = random_single(frames, bins, 15);
    let mut bptt_err: f64 = 0.0;
    for bf_option in [BfOption::CurrFrame, BfOption::PrevFrame] {
        let cfg = ArConfig {
            bf_option,
            ..ArConfig::default()
        };
        let loss = |e: &CompactEstimator| {
            loss_l1(&process_utterance(&cfg, e, &y).unwrap(), &target)
                .unwrap()
                .0
        };
        let analytic = bptt_gradient(&est, &cfg, &y, &target).unwrap().grad;
        let numeric: Vec<f64> = (0..est.params().len())
            .map(|i| {
                let mut plus = est.clone();
                plus.params_mut()[i] += h;
                let mut minus = est.clone();
                minus.params_mut()[i] -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect();
        bptt_err = bptt_err.max(max_relative_error(&analytic, &numeric));
    }
    outcome(
        cell_err < 1e-4 && bptt_err < 1e-3,
        format!("estimator {cell_err:.1e}, through-time {bptt_err:.1e}"),
    )
}

const SMOKE_INIT_SEED: u64 = 3;

fn smoke_config(method: Method) -> TrainConfig {
    match method {
        Method::Rds => TrainConfig {
            method,
            epochs: 10,
            steps: 0,
            learning_rate: 0.02,
            batch: 2,
            seed: 4,
        },
        _ => TrainConfig {
            method,
            epochs: 0,
            steps: 200,
            learning_rate: 0.03,
            batch: 8,
            seed: 4,
        },
    }
}

fn train_toy(method: Method, cfg: &ArConfig, data: &[Utterance]) -> (CompactEstimator, f64, f64) {
    let mut est = CompactEstimator::random(2, 16, SMOKE_INIT_SEED);
    let before = inference_loss(&est, cfg, data).unwrap();
    train(
        &mut est,
        cfg,
        &smoke_config(method),
        data,
        &mut RdsCache::new(),
        |_| {},
    )
    .unwrap();
    let after = inference_loss(&est, cfg, data).unwrap();
    (est, before, after)
}

struct Toy {
    data: Vec<Utterance>,
    held_out: Vec<ToyScene>,
    eval: Vec<ToyScene>,
    stft: Stft,
}

fn training_smoke(toy: &Toy, models: &mut Vec<(Method, CompactEstimator)>) -> Outcome {
    let start = Instant::now();
    let cfg = ArConfig::default();
    let mut ok = true;
    let mut notes = Vec::new();
    for method in [Method::Paris, Method::Rds] {
        let (est, before, after) = train_toy(method, &cfg, &toy.data);
        let (mix, enh) = evaluate_si_sdr(&est, &cfg, &toy.held_out, &toy.stft).unwrap();
        let reduction = 1.0 - after / before;
        ok &= reduction >= 0.5 && enh > mix;
        notes.push(format!(
            "{method}: loss {before:.4} -> {after:.4} ({:.1}% lower), held-out SI-SDR {mix:.2} -> {enh:.2} dB",
            100.0 * reduction
        ));
        models.push((method, est));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    notes.push(format!("{secs:.1} s"));
    outcome(ok, notes.join("; "))
}

fn trend(name: &str, better: f64, worse: f64) -> (bool, String) {
    let gap = better - worse;
    (
        gap > -1.0,
        format!("{name}: {better:.2} vs {worse:.2} dB (gap {gap:+.2})"),
    )
}

fn method_trends(toy: &Toy, models: &[(Method, CompactEstimator)]) -> Outcome {
    let cfg = ArConfig::default();
    let score = |est: &CompactEstimator, cfg: &ArConfig| {
        evaluate_si_sdr(est, cfg, &toy.eval, &toy.stft).unwrap().1
    };
    let model = |m: Method| &models.iter().find(|(k, _)| *k == m).unwrap().1;
    let mut results = Vec::new();
    results.push(trend(
        "rds vs paris",
        score(model(Method::Rds), &cfg),
        score(model(Method::Paris), &cfg),
    ));

    let prev_cfg = ArConfig {
        bf_option: BfOption::PrevFrame,
        ..cfg
    };
    let (prev_model, _, _) = train_toy(Method::Rds, &prev_cfg, &toy.data);
    results.push(trend(
        "curr vs prev frame",
        score(model(Method::Rds), &cfg),
        score(&prev_model, &prev_cfg),
    ));

    let bf_cfg = ArConfig {
        ar_inputs: ArInputs::BfOnly,
        ..cfg
    };
    let nn_cfg = ArConfig {
        ar_inputs: ArInputs::NnOnly,
        ..cfg
    };
    let (bf_model, _, _) = train_toy(Method::Rds, &bf_cfg, &toy.data);
    let (nn_model, _, _) = train_toy(Method::Rds, &nn_cfg, &toy.data);
    results.push(trend(
        "ar bf vs nn",
        score(&bf_model, &bf_cfg),
        score(&nn_model, &nn_cfg),
    ));

    let ok = results.iter().all(|(p, _)| *p);
    outcome(
        ok,
        results
            .into_iter()
            .map(|(_, s)| s)
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn median_step_secs(f: &mut dyn FnMut()) -> f64 {
    f();
    let mut samples: Vec<f64> = (0..11)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

fn paris_speedup(toy: &Toy) -> Outcome {
    use arise_core::train::{train_step_bptt, train_step_paris, Adam};
    let segments: Vec<Utterance> = toy.data[..8]
        .iter()
        .map(|u| u.segments(64)[0].clone())
        .collect();
    let batch: Vec<&Utterance> = segments.iter().collect();
    let cfg = ArConfig::default();
    let mut est = CompactEstimator::random(2, 16, SMOKE_INIT_SEED);
    let mut adam = Adam::new(est.params().len(), 0.001);
    let paris = median_step_secs(&mut || {
        train_step_paris(&mut est, &mut adam, &cfg, &batch).unwrap();
    });
    let bptt = median_step_secs(&mut || {
        train_step_bptt(&mut est, &mut adam, &cfg, &batch).unwrap();
    });
    let ratio = paris / bptt;
    outcome(
        ratio < 0.5,
        format!(
            "paris {:.2} ms/step, bptt {:.2} ms/step, ratio {ratio:.2} on {} threads",
            paris * 1e3,
            bptt * 1e3,
            rayon::current_num_threads()
        ),
    )
}

fn cache_integrity(toy: &Toy) -> Outcome {
    let cfg = ArConfig::default();
    let data = &toy.data[..6];
    let mut est = CompactEstimator::random(2, 16, SMOKE_INIT_SEED);
    let mut cache = RdsCache::new();
    let tcfg = TrainConfig {
        epochs: 2,
        ..smoke_config(Method::Rds)
    };
    train(&mut est, &cfg, &tcfg, data, &mut cache, |_| {}).unwrap();

    let path = std::env::temp_dir().join(format!("arise-acceptance-{}.cache", std::process::id()));
    cache.save(&path).unwrap();
    let loaded = RdsCache::load(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    let mut again = Vec::new();
    loaded.write_to(&mut again).unwrap();
    let round_trip = loaded == cache && again == bytes;

    let mut fresh_match = true;
    for u in data {
        let trace = run_utterance(&cfg, &est, &u.mixture, true).unwrap();
        let expected = CacheRecord::new(&trace.estimate, &trace.bf, 2).unwrap();
        fresh_match &= cache.get(&u.id) == Some(&expected);
    }
    let mut rebuilt = RdsCache::new();
    rebuild_cache(&est, &cfg, data, &mut rebuilt, 2).unwrap();
    fresh_match &= rebuilt == cache;
    outcome(
        round_trip && fresh_match,
        format!("file round trip {round_trip}, post-epoch cache equals fresh pass {fresh_match}"),
    )
}

fn main() {
    let start = Instant::now();
    let toy = Toy {
        data: toy_set(40, 1)
            .unwrap()
            .into_iter()
            .map(|s| s.utterance)
            .collect(),
        held_out: toy_set(10, 2).unwrap(),
        eval: toy_set(20, 3).unwrap(),
        stft: toy_stft(),
    };
    let mut models = Vec::new();
    // Criterion 9 needs parallel hardware to show the speedup; it is
    // reported but does not gate the exit status.
    let report_only = [9];
    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "stft round trip", stft_round_trip()),
        (2, "mvdr closed forms", mvdr_closed_forms()),
        (3, "scm brute-force equivalence", scm_brute_force()),
        (4, "oracle end-to-end", oracle_end_to_end()),
        (5, "engine equivalences", engine_equivalences()),
        (6, "gradient checks", gradient_checks()),
        (7, "training smoke", training_smoke(&toy, &mut models)),
        (8, "method trends", method_trends(&toy, &models)),
        (9, "paris speedup", paris_speedup(&toy)),
        (10, "cache integrity", cache_integrity(&toy)),
    ];
    let mut gated_failures = 0;
    for (id, name, o) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && report_only.contains(id) {
            " [not gating]"
        } else {
            ""
        };
        println!("{verdict} criterion {id} ({name}){note}: {}", o.detail);
        if !o.pass && !report_only.contains(id) {
            gated_failures += 1;
        }
    }
    println!(
        "acceptance finished in {:.1} s",
        start.elapsed().as_secs_f64()
    );
    if gated_failures > 0 {
        std::process::exit(1);
    }
}

//! Acceptance criteria, one printed verdict per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line shows up in
//! `cargo test` output. Exits non-zero if any criterion fails. Criteria that
//! need user-supplied data print NOT RUN when the file is absent.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use sentinel::attention::{AttnMask, MultiHeadAttention, MultiPatchAttention};
use sentinel::checkpoint;
use sentinel::config::{prepare_table, DataConfig, DATA_DIR_ENV};
use sentinel::data::{load_csv, standard_splits, DatasetKind, LoadOptions, Split, SplitSpec, WindowedData};
use sentinel::experiments::{self, DatasetRef, ExperimentPlan};
use sentinel::layers::{count_params, ForwardCtx};
use sentinel::preprocessing::RevIn;
use sentinel::synthetic::{self, SyntheticSpec};
use sentinel::tensor::no_grad;
use sentinel::training::{self, persistence_metrics, TrainConfig, Trainer};
use sentinel::{ModelConfig, Rng, SentinelModel, Tensor, Variant};

use common::{rand_tensor, run_gradient_suite};

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 12] = [
        (1, "gradient suite", c01_gradients),
        (2, "shape laws", c02_shapes),
        (3, "RevIN round-trip", c03_revin),
        (4, "decoder causality", c04_causality),
        (5, "multi-patch equals single-head", c05_single_head),
        (6, "channel-permutation equivariance", c06_permutation),
        (7, "attention parameter parity", c07_parity),
        (8, "overfit sinusoid fixture", c08_overfit),
        (9, "beats persistence on ETTh1", c09_persistence),
        (10, "ablation and lookback directions", c10_directions),
        (11, "ETTh1 window reconciliation", c11_windows),
        (12, "seeded determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        // `cargo test acceptance -- <filter>` style name filtering.
        if !args.is_empty() && !args.iter().any(|a| name.contains(a.as_str()) || id.to_string() == *a) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn c01_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    for seed in 0..10 {
        for r in run_gradient_suite(seed) {
            cases += 1;
            let e = r.report.max_rel_err();
            if e > worst.0 || e.is_nan() {
                worst = (e, format!("{} seed {seed}", r.name));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 30.0,
        format!(
            "{cases} checks over 10 seeds, worst rel err {:.2e} ({}), {secs:.1}s of 30s budget",
            worst.0, worst.1
        ),
    )
}

fn c02_shapes() -> Verdict {
    let cfg = ModelConfig {
        lookback: 96,
        horizon: 96,
        channels: 7,
        patch_len: 16,
        stride: 8,
        d_model: 64,
        ..ModelConfig::default()
    };
    let model = SentinelModel::new(cfg, 0).unwrap();
    let x = rand_tensor(&[96, 7], 1, -1.0, 1.0);
    let (y, tr) = no_grad(|| model.forward_traced(&x, &mut ForwardCtx::eval())).unwrap();
    let checks: [(&str, Vec<usize>, Vec<usize>); 6] = [
        ("N", vec![model.grid.num_patches], vec![11]),
        ("patches", tr.patches.shape().to_vec(), vec![7, 11, 16]),
        ("encoder weights", tr.encoder_weights[0].shape().to_vec(), vec![11, 7, 7]),
        ("decoder self weights", tr.decoder_self_weights[0].shape().to_vec(), vec![7, 11, 11]),
        ("O_enc", tr.encoder_output.as_ref().unwrap().shape().to_vec(), vec![7, 11, 64]),
        ("forecast", y.shape().to_vec(), vec![96, 7]),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n} {got:?} != {want:?}"))
        .collect();
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            "N=11, patches 7x11x16, encoder 11x7x7, decoder 7x11x11, O_enc 7x11x64, forecast 96x7".into()
        } else {
            bad.join("; ")
        },
    )
}

fn c03_revin() -> Verdict {
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let l = 2 + rng.below(100);
        let c = 1 + rng.below(8);
        let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
        let offset = rng.uniform(-1e3, 1e3);
        let x: Vec<f64> = (0..l * c).map(|_| offset + scale * rng.normal()).collect();
        let x = Tensor::new(&[l, c], x).unwrap();
        let mut revin = RevIn::new(c, 1e-5);
        if i % 2 == 1 {
            let g: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
            revin.gamma = Tensor::param(&[c], g).unwrap();
            revin.beta = Tensor::param(&[c], b).unwrap();
        }
        let (y, st) = revin.normalize(&x).unwrap();
        let back = revin.denormalize(&y, &st).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst < 1e-9, format!("100 instances, max abs err {worst:.2e} (tol 1e-9)"))
}

fn c04_causality() -> Verdict {
    let (c, n, d) = (3, 6, 8);
    let mut rng = Rng::new(4);
    let attn = MultiPatchAttention::new(d, true, &mut rng);
    let x0 = rand_tensor(&[c, n, d], 5, -1.0, 1.0);
    let mut nonzero_grad = 0usize;
    let mut worst_perturb = 0.0f64;
    for i in 0..n {
        let x = x0.to_param();
        let out = attn.forward(&x, &x, AttnMask::Causal, &mut ForwardCtx::eval()).unwrap().output;
        let row = out.slice(1, i, i + 1).unwrap();
        sentinel::gradcheck::project(&row, 40 + i as u64).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        for ch in 0..c {
            for j in i + 1..n {
                nonzero_grad += g[(ch * n + j) * d..(ch * n + j + 1) * d].iter().filter(|v| **v != 0.0).count();
            }
        }
        let base = out.detach();
        for j in i + 1..n {
            let mut v = x0.to_vec();
            for ch in 0..c {
                for k in 0..d {
                    v[(ch * n + j) * d + k] += 1.0;
                }
            }
            let xp = Tensor::new(&[c, n, d], v).unwrap();
            let o = no_grad(|| attn.forward(&xp, &xp, AttnMask::Causal, &mut ForwardCtx::eval()))
                .unwrap()
                .output;
            for ch in 0..c {
                for k in 0..d {
                    let idx = (ch * n + i) * d + k;
                    worst_perturb = worst_perturb.max((o.data()[idx] - base.data()[idx]).abs());
                }
            }
        }
    }
    verdict(
        nonzero_grad == 0 && worst_perturb <= 1e-12,
        format!("{nonzero_grad} non-zero future gradients, max perturbation effect {worst_perturb:.2e}"),
    )
}

/// Plain-loop scaled dot-product attention with one head.
fn classic_single_head(x: &[f64], n: usize, d: usize, w: [&[f64]; 4]) -> Vec<f64> {
    let proj = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| x[i * d + k] * m[k * d + j]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(w[0]), proj(w[1]), proj(w[2]));
    let mut mixed = vec![0.0; n * d];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..d {
                mixed[i * d + t] += e[j] / z * v[j * d + t];
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| mixed[i * d + k] * w[3][k * d + j]).sum();
        }
    }
    out
}

fn c05_single_head() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (n, d) = (7, 12);
        let mut rng = Rng::new(seed);
        let attn = MultiPatchAttention::new(d, true, &mut rng);
        let x = rand_tensor(&[1, n, d], seed + 100, -1.0, 1.0);
        let got = attn.forward(&x, &x, AttnMask::None, &mut ForwardCtx::eval()).unwrap().output;
        let want = classic_single_head(
            x.data(),
            n,
            d,
            [attn.wq.data(), attn.wk.data(), attn.wv.data(), attn.wo.as_ref().unwrap().data()],
        );
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst < 1e-12, format!("max abs diff {worst:.2e} over 5 seeds (tol 1e-12)"))
}

fn c06_permutation() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let cfg = ModelConfig {
            d_model: 16,
            ..ModelConfig::default()
        };
        let model = common::jitter(&SentinelModel::new(cfg, seed).unwrap(), seed);
        let (l, c, t) = (96, 7, 96);
        let x = rand_tensor(&[l, c], seed + 7, -2.0, 2.0);
        let perm = Rng::new(seed + 11).permutation(c);
        // RevIN's affine is per channel, so it moves with the channels.
        let mut permuted = model.clone();
        let pick = |t: &Tensor| Tensor::param(&[c], perm.iter().map(|&p| t.data()[p]).collect()).unwrap();
        permuted.revin.gamma = pick(&model.revin.gamma);
        permuted.revin.beta = pick(&model.revin.beta);
        let xp: Vec<f64> = (0..l).flat_map(|r| perm.iter().map(move |&p| (r, p))).map(|(r, p)| x.data()[r * c + p]).collect();
        let xp = Tensor::new(&[l, c], xp).unwrap();
        let y = no_grad(|| model.forward(&x, &mut ForwardCtx::eval())).unwrap();
        let yp = no_grad(|| permuted.forward(&xp, &mut ForwardCtx::eval())).unwrap();
        for r in 0..t {
            for (k, &p) in perm.iter().enumerate() {
                worst = worst.max((yp.data()[r * c + k] - y.data()[r * c + p]).abs());
            }
        }
    }
    verdict(worst < 1e-12, format!("max abs diff {worst:.2e} over 5 seeds (tol 1e-12)"))
}

fn c07_parity() -> Verdict {
    let mut rng = Rng::new(7);
    let mut rows = Vec::new();
    let mut ok = true;
    for (d, h) in [(64, 4), (32, 8), (16, 1)] {
        let mp = count_params(&MultiPatchAttention::new(d, true, &mut rng));
        let mh = count_params(&MultiHeadAttention::new(d, h, &mut rng).unwrap());
        ok &= mp == mh;
        rows.push(format!("d={d} h={h}: {mp} vs {mh}"));
    }
    let full = SentinelModel::new(ModelConfig::default(), 0).unwrap().num_params();
    let mh = SentinelModel::new(ModelConfig::default().with_variant(Variant::MultiheadBoth), 0)
        .unwrap()
        .num_params();
    ok &= full == mh;
    rows.push(format!("full model {full} vs multihead_both {mh}"));
    verdict(ok, rows.join(", "))
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sinusoid_2ch.csv")
}

fn c08_overfit() -> Verdict {
    let table = load_csv(&fixture_path(), &LoadOptions::default()).unwrap();
    let rows = table.rows();
    let data = WindowedData::new(&table, SplitSpec::new(rows, rows, rows, rows).unwrap(), 32, 8);
    let windows = data.windows(Split::Train).unwrap();
    let (x, y) = data.batch(&windows).unwrap();
    let cfg = ModelConfig {
        lookback: 32,
        horizon: 8,
        channels: 2,
        d_model: 32,
        n_enc: 1,
        n_dec: 1,
        patch_len: 8,
        stride: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(SentinelModel::new(cfg, 0).unwrap(), &TrainConfig::default(), 0);
    let mut loss = f64::NAN;
    let mut reached = None;
    for step in 1..=500 {
        loss = trainer.step(&x, &y).unwrap();
        if loss < 0.05 {
            reached = Some(step);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        reached.is_some() && secs < 120.0,
        format!(
            "{} windows, train L1 {loss:.4} {} (limit 500 steps, 120s)",
            windows.len(),
            reached.map_or("never below 0.05".into(), |s| format!("below 0.05 at step {s}"))
        ),
    )
}

fn etth1_path() -> Option<PathBuf> {
    let dir = std::env::var(DATA_DIR_ENV).ok()?;
    let p = Path::new(&dir).join("ETTh1.csv");
    p.exists().then_some(p)
}

fn c09_persistence() -> Verdict {
    let Some(path) = etth1_path() else {
        return Verdict::NotRun(format!("${DATA_DIR_ENV}/ETTh1.csv not found; supply the file to run"));
    };
    let start = Instant::now();
    let data_cfg = DataConfig {
        path: Some(path.to_string_lossy().into_owned()),
        kind: "etth".into(),
        ..DataConfig::default()
    };
    let prepared = data_cfg.prepare().unwrap();
    let data = prepared.windows(96, 96);
    let model = ModelConfig {
        channels: prepared.table.channels(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 10,
        patience: 3,
        ..TrainConfig::default()
    };
    let out = training::train(&model, &data, &tc, 0, None).unwrap();
    let (mse, _) = training::evaluate(&out.model, &data, Split::Test, 64).unwrap();
    let (base, _) = persistence_metrics(&data, Split::Test).unwrap();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    verdict(
        mse < base && mins <= 30.0,
        format!("test MSE {mse:.4} vs repeat-last {base:.4}, {mins:.1} min"),
    )
}

fn directional_plan(name: &str, spec: SyntheticSpec, model: ModelConfig, epochs: usize) -> ExperimentPlan {
    ExperimentPlan {
        datasets: vec![DatasetRef {
            name: name.into(),
            data: DataConfig {
                synthetic: Some(spec),
                ..DataConfig::default()
            },
        }],
        seeds: vec![0, 1, 2],
        model,
        training: TrainConfig {
            epochs,
            patience: 3,
            ..TrainConfig::default()
        },
        ..ExperimentPlan::default()
    }
}

fn c10_directions() -> Verdict {
    let lf = ExperimentPlan {
        horizons: vec![8],
        variants: vec![Variant::Full, Variant::NoEncoder],
        ..directional_plan(
            "leader_follower",
            SyntheticSpec::LeaderFollower {
                rows: 3000,
                lag: 8,
                phi: 0.8,
                noise: 0.3,
            },
            ModelConfig {
                lookback: 32,
                d_model: 16,
                patch_len: 8,
                stride: 4,
                ..ModelConfig::default()
            },
            15,
        )
    };
    let (cells, _) = experiments::run_ablation(&lf, None).unwrap();
    let mse = |v: Variant, s: u64| {
        cells
            .iter()
            .find(|r| r.key.variant == v && r.key.seed == s)
            .map(|r| r.mse)
            .unwrap()
    };
    let enc_wins = (0..3).filter(|&s| mse(Variant::NoEncoder, s) > mse(Variant::Full, s)).count();
    let enc_detail: Vec<String> = (0..3)
        .map(|s| format!("{:.3}/{:.3}", mse(Variant::Full, s), mse(Variant::NoEncoder, s)))
        .collect();

    let lm = ExperimentPlan {
        horizons: vec![24],
        lookbacks: vec![96, 336],
        ..directional_plan(
            "long_memory",
            SyntheticSpec::LongMemory {
                rows: 3000,
                period: 200,
                a: 0.95,
            },
            ModelConfig {
                d_model: 16,
                ..ModelConfig::default()
            },
            8,
        )
    };
    let (cells, _) = experiments::run_lookback_sweep(&lm, None).unwrap();
    let at = |l: usize, s: u64| {
        cells
            .iter()
            .find(|r| r.key.lookback == l && r.key.seed == s)
            .map(|r| r.mse)
            .unwrap()
    };
    let long_wins = (0..3).filter(|&s| at(336, s) < at(96, s)).count();
    let lm_detail: Vec<String> = (0..3).map(|s| format!("{:.3}/{:.3}", at(96, s), at(336, s))).collect();
    verdict(
        enc_wins >= 2 && long_wins >= 2,
        format!(
            "no_encoder worse in {enc_wins}/3 seeds (full/no_encoder MSE {}); L=336 better in {long_wins}/3 (L96/L336 MSE {})",
            enc_detail.join(", "),
            lm_detail.join(", ")
        ),
    )
}

fn c11_windows() -> Verdict {
    let (table, source) = match etth1_path() {
        Some(p) => (load_csv(&p, &LoadOptions::default()).unwrap(), "ETTh1.csv"),
        None => (synthetic::etth_shaped(17_420, 0), "17,420-row ETTh1-shaped table"),
    };
    let spec = standard_splits(table.rows(), DatasetKind::Etth).unwrap();
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| spec.lookback_windows(s, 96));
    let supervised = spec.window_count(Split::Train, 96, 96);
    verdict(
        counts == [8545, 2881, 2881],
        format!(
            "{source}: lookback windows {counts:?} (target [8545, 2881, 2881]); supervised train pairs at T=96: {supervised}"
        ),
    )
}

fn c12_determinism() -> Verdict {
    let table = synthetic::sinusoid(400);
    let prepared = prepare_table(&table, DatasetKind::Custom { train: 0.7, val: 0.1 }).unwrap();
    let data = prepared.windows(32, 8);
    let model = ModelConfig {
        lookback: 32,
        horizon: 8,
        channels: 2,
        d_model: 16,
        patch_len: 8,
        stride: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = || {
        let mut log = Vec::new();
        let out = training::train(&model, &data, &tc, 42, Some(&mut log)).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect();
        let bits: Vec<[u64; 3]> = out
            .history
            .iter()
            .map(|r| [r.train_l1.to_bits(), r.val_mse.to_bits(), r.val_mae.to_bits()])
            .collect();
        (lines, bits, checkpoint::to_bytes(&out.model).unwrap())
    };
    let a = run();
    let b = run();
    let ok = a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    verdict(
        ok,
        format!(
            "{} epochs, logs {} (wall_ms excluded), checkpoints {} ({} bytes)",
            a.1.len(),
            if a.0 == b.0 && a.1 == b.1 { "identical" } else { "differ" },
            if a.2 == b.2 { "identical" } else { "differ" },
            a.2.len()
        ),
    )
}

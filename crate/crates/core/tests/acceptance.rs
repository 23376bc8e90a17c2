//! The ten acceptance criteria, each reported as one PASS/FAIL line.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenafuse::adapter::{self, AblationConfig, AdapterConfig, SoftmaxAxis};
use scenafuse::cli;
use scenafuse::config::RunConfig;
use scenafuse::dataset::{self, Split};
use scenafuse::encoder::{self, EncoderParams};
use scenafuse::model::{prepare_all, PreparedExample, ScenaFuseModel, Variant};
use scenafuse::params::{derive_seed, ParamStore};
use scenafuse::tensor::{Tape, Tensor, Var};
use scenafuse::train::{self, Metrics};
use scenafuse::verify::{self, GradCheckOptions};

/// Writes straight to stdout, past the harness's capture, so the criterion
/// lines appear in a plain `cargo test` run.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn run_criterion(id: usize, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        verdict(false, format!("panicked: {msg}"))
    });
    report!(
        "criterion {id:>2} {} {title}: {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn first_ambiguous(cfg: &RunConfig) -> PreparedExample {
    let data = dataset::generate_dataset(&cfg.generator).unwrap();
    let ex = data.iter().find(|e| e.ambiguous).unwrap();
    PreparedExample::from_example(ex, &dataset::build_vocabulary(), cfg.model.encoder.max_len, cfg.model.visual_dim).unwrap()
}

fn gradient_fidelity() -> Verdict {
    let cfg = RunConfig::default();
    let ex = first_ambiguous(&cfg);
    let start = Instant::now();
    let mut model = ScenaFuseModel::new(&cfg.model, Variant::Full, 0).unwrap();
    verify::perturb(&mut model.store, 0.3, 0);
    let report = verify::grad_check_model(&model, &ex, &GradCheckOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    let covers = names.iter().any(|n| n.starts_with("adapter/")) && names.iter().any(|n| n.starts_with("encoder/"));
    verdict(
        report.max_error < 1e-4 && secs < 60.0 && covers && report.tensors.len() == model.store.len(),
        format!(
            "max relative error {:.2e} over {} tensors, eps {}, {secs:.1}s",
            report.max_error,
            report.tensors.len(),
            report.eps
        ),
    )
}

fn shape(tape: &Tape, v: Option<Var>) -> Vec<usize> {
    v.map(|v| tape.tensor(v).shape().to_vec()).unwrap_or_default()
}

fn equation_shapes() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for case in 0..1000 {
        let k = rng.random_range(1..=16);
        let l = rng.random_range(4..=32);
        let t = rng.random_range(8..=64);
        let divisors: Vec<usize> = (1..=4).filter(|h| t % h == 0).collect();
        let cfg = AdapterConfig {
            text_dim: rng.random_range(4..=24),
            visual_dim: rng.random_range(4..=24),
            width: t,
            seq_len: l,
            num_blocks: k,
            heads: divisors[rng.random_range(0..divisors.len())],
            softmax_axis: if case % 2 == 0 { SoftmaxAxis::Feature } else { SoftmaxAxis::Sequence },
        };
        let real = rng.random_range(1..=l);
        let fx = adapter_fixture(&cfg, &AblationConfig::full(), case as u64, 0.0, real);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let xt = tape.constant(fx.x_tex.clone());
        let xv = tape.constant(fx.x_vis.clone());
        let tr = adapter::adapter_forward(&mut tape, &bound, &fx.params, xt, xv, &AblationConfig::full(), &fx.mask).unwrap();
        let ok = shape(&tape, tr.z_tex) == [k, t]
            && shape(&tape, tr.z_vis) == [l, t]
            && shape(&tape, Some(tr.z_int)) == [l, t]
            && shape(&tape, tr.u) == [l, t]
            && shape(&tape, Some(tr.r)) == [l, t];
        failures += usize::from(!ok);
    }
    verdict(failures == 0, format!("{} of 1000 random configurations passed", 1000 - failures))
}

fn fusion_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 10_000;
    let mut failures = Vec::new();
    for case in 0..cases {
        let t = [4, 6, 8][case % 3];
        let cfg = AdapterConfig {
            text_dim: rng.random_range(2..=6),
            visual_dim: rng.random_range(2..=6),
            width: t,
            seq_len: rng.random_range(2..=6),
            num_blocks: rng.random_range(1..=4),
            heads: 2,
            softmax_axis: if case % 2 == 0 { SoftmaxAxis::Feature } else { SoftmaxAxis::Sequence },
        };
        let real = rng.random_range(1..=cfg.seq_len);
        let spread = rng.random_range(0.05..1.5);
        let fx = adapter_fixture(&cfg, &AblationConfig::full(), 100 + case as u64, spread, real);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let xt = tape.constant(fx.x_tex.clone());
        let xv = tape.constant(fx.x_vis.clone());
        let tr = adapter::adapter_forward(&mut tape, &bound, &fx.params, xt, xv, &AblationConfig::full(), &fx.mask).unwrap();
        let rect = tr.rectified.unwrap();
        let val = |v: Var| tape.value(v).to_vec();
        let open_unit = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x < 1.0);
        let (g, h) = (val(tr.gate.unwrap()), val(tr.filter.unwrap()));
        let (x_hat, z_hat, u) = (val(rect.x_hat), val(rect.z_hat), val(tr.u.unwrap()));
        let convex = u
            .iter()
            .zip(x_hat.iter().zip(&z_hat))
            .all(|(&u, (&a, &b))| u >= a.min(b) && u <= a.max(b));
        let bounded = val(tr.r).iter().all(|x| x.abs() < 1.0);
        let sums_ok = [rect.z_factor, rect.x_factor].iter().all(|&f| {
            let m = Mat::from_tensor(&tape.tensor(f));
            let sums: Vec<f64> = match cfg.softmax_axis {
                SoftmaxAxis::Feature => (0..m.r).map(|i| (0..m.c).map(|j| m.at(i, j)).sum()).collect(),
                SoftmaxAxis::Sequence => (0..m.c).map(|j| (0..m.r).map(|i| m.at(i, j)).sum()).collect(),
            };
            sums.iter().all(|s| (s - 1.0).abs() <= 1e-12)
        });
        if !(open_unit(&g) && open_unit(&h) && convex && bounded && sums_ok) {
            failures.push(case);
        }
    }
    verdict(
        failures.is_empty(),
        format!("{cases} random cases, {} failures {:?}", failures.len(), &failures[..failures.len().min(5)]),
    )
}

fn attention_structure() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut inv, mut equi, mut masked) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let cfg = AdapterConfig {
            num_blocks: rng.random_range(2..=9),
            seq_len: rng.random_range(4..=12),
            ..small_adapter_config()
        };
        let real = rng.random_range(1..cfg.seq_len);
        let fx = adapter_fixture(&cfg, &AblationConfig::full(), 500 + case, 0.8, real);
        let mut perm: Vec<usize> = (0..cfg.num_blocks).collect();
        perm.rotate_left(1);
        perm.swap(0, cfg.num_blocks - 1);
        let vis = Mat::from_tensor(&fx.x_vis);
        let mut pv = Mat::zeros(vis.r, vis.c);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..vis.c {
                pv.set(i, j, vis.at(p, j));
            }
        }
        let run = |x_vis: &Tensor| {
            let mut tape = Tape::new();
            let bound = fx.store.bind(&mut tape);
            let xt = tape.constant(fx.x_tex.clone());
            let xv = tape.constant(x_vis.clone());
            let tr = adapter::adapter_forward(&mut tape, &bound, &fx.params, xt, xv, &AblationConfig::full(), &fx.mask).unwrap();
            let zt = Mat::from_tensor(&tape.tensor(tr.z_tex.unwrap()));
            let zv = Mat::from_tensor(&tape.tensor(tr.z_vis.unwrap()));
            let weights: Vec<Mat> = tr.vesr_weights.iter().map(|&w| Mat::from_tensor(&tape.tensor(w))).collect();
            (zt, zv, weights)
        };
        let (zt, zv, weights) = run(&fx.x_vis);
        let (pzt, pzv, _) = run(&pv.to_tensor());
        inv = inv.max(zv.max_abs_diff(&pzv));
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..zt.c {
                equi = equi.max((pzt.at(i, j) - zt.at(p, j)).abs());
            }
        }
        for w in &weights {
            for i in 0..w.r {
                let m: f64 = (0..w.c).filter(|&j| !fx.mask[j]).map(|j| w.at(i, j)).sum();
                masked = masked.max(m);
            }
        }
    }
    verdict(
        inv < 1e-12 && equi < 1e-12 && masked < 1e-8,
        format!("invariance drift {inv:.1e}, equivariance drift {equi:.1e}, max masked mass {masked:.1e}"),
    )
}

fn ablation_identity() -> Verdict {
    let cfg = RunConfig::default();
    let data = dataset::generate_dataset(&cfg.generator).unwrap();
    let prepared = prepare_all(&data[..200], &dataset::build_vocabulary(), &cfg.model).unwrap();
    let mut identical = true;
    for seed in [0u64, 7, 123] {
        let model = ScenaFuseModel::new(&cfg.model, Variant::WithoutIsi, seed).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let enc = EncoderParams::init(&mut store, &cfg.model.encoder, &mut rng).unwrap();
        identical &= store.to_bytes() == model.store.to_bytes();
        for ex in &prepared {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = encoder::embed_inputs(&mut tape, &bound, &enc, &ex.encoding).unwrap();
            let out = encoder::encode_from_embeddings(&mut tape, &bound, &enc, x, &ex.encoding.attention_mask, None, &mut None)
                .unwrap();
            let plain: Vec<u64> = tape.value(out.logits).iter().map(|x| x.to_bits()).collect();
            let fused: Vec<u64> = model.logits(ex).unwrap().iter().map(|x| x.to_bits()).collect();
            identical &= plain == fused;
        }
    }
    verdict(identical, format!("parameters and logits of {} examples x 3 seeds compared bitwise", prepared.len()))
}

struct Experiment {
    table: train::AblationTable,
    ceiling: f64,
    seconds: f64,
}

fn experiment() -> Experiment {
    let cfg = RunConfig::default();
    let data = dataset::generate_dataset(&cfg.generator).unwrap();
    let vocab = dataset::build_vocabulary();
    let split = |s| prepare_all(&dataset::split_examples(&data, s), &vocab, &cfg.model).unwrap();
    let (tr, dev, test) = (split(Split::Train), split(Split::Dev), split(Split::Test));
    let ceiling = dataset::text_only_bayes_accuracy(&dataset::split_examples(&data, Split::Test));
    let start = Instant::now();
    let table = train::run_ablation(&cfg.model, &cfg.train, &tr, &dev, &test, &Variant::ALL, |_, _| {}).unwrap();
    for row in &table.rows {
        report!(
            "    {:<8} test acc {:.4}  micro P {:.4}  micro R {:.4}  macro P {:.4}  macro R {:.4}  best epoch {}",
            row.variant.name(),
            row.test.accuracy,
            row.test.micro_precision,
            row.test.micro_recall,
            row.test.macro_precision,
            row.test.macro_recall,
            row.best_epoch
        );
    }
    Experiment {
        table,
        ceiling,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn disambiguation(exp: &Experiment) -> Verdict {
    let acc = |v| exp.table.row(v).map(|r| r.test.accuracy).unwrap_or(f64::NAN);
    let (full, text) = (acc(Variant::Full), acc(Variant::WithoutIsi));
    let a = text <= exp.ceiling + 0.03;
    let b = full >= 0.90;
    let c = full - text >= 0.10;
    let d = exp.seconds < 15.0 * 60.0;
    verdict(
        a && b && c && d,
        format!(
            "text-only {text:.4} vs ceiling {:.4} ({}), full {full:.4} ({}), gap {:.4} ({}), {} variants in {:.0}s ({})",
            exp.ceiling,
            ok(a),
            ok(b),
            full - text,
            ok(c),
            exp.table.rows.len(),
            exp.seconds,
            ok(d)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

fn ablation_direction(exp: &Experiment) -> Verdict {
    let full = exp.table.row(Variant::Full).unwrap().test.accuracy;
    let worse: Vec<String> = exp
        .table
        .rows
        .iter()
        .filter(|r| r.test.accuracy > full + 0.01)
        .map(|r| format!("{} {:.4}", r.variant.name(), r.test.accuracy))
        .collect();
    let summary: Vec<String> = exp
        .table
        .rows
        .iter()
        .filter(|r| r.variant != Variant::Full)
        .map(|r| format!("{} {:.3}", r.variant.name(), r.test.accuracy))
        .collect();
    verdict(
        worse.is_empty(),
        format!("full {full:.3} vs {}; exceeding by > 1 point: {worse:?}", summary.join(", ")),
    )
}

/// Runs the `bench-complexity` command in its own process, as a user would;
/// allocator state left behind by the training experiment shifts the timings.
fn complexity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_scenafuse"))
        .args(["bench-complexity", "--out", dir.path().to_str().unwrap()])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report: verify::ComplexityReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("complexity.json")).unwrap()).unwrap();
    let times: Vec<String> = report.points.iter().map(|p| format!("{}:{:.0}us", p.width, p.seconds * 1e6)).collect();
    verdict(
        status.success() && report.passed() && report.seq_len == 16 && secs < 120.0,
        format!("fitted slope {:.3} over {}, {secs:.1}s", report.slope, times.join(" ")),
    )
}

fn metric_identity(exp: &Experiment) -> Verdict {
    let crafted: [[[usize; 3]; 3]; 4] = [
        [[5, 1, 0], [0, 4, 2], [1, 0, 7]],
        [[0, 3, 0], [0, 0, 0], [0, 0, 0]],
        [[10, 0, 0], [0, 10, 0], [0, 0, 10]],
        [[1, 2, 3], [4, 5, 6], [7, 8, 9]],
    ];
    let mut ok = crafted
        .iter()
        .all(|c| Metrics::from_confusion(c).unwrap().micro_identity_holds());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let c: [[usize; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0..50)));
        if c.iter().flatten().sum::<usize>() > 0 {
            ok &= Metrics::from_confusion(&c).unwrap().micro_identity_holds();
        }
    }
    let live = exp
        .table
        .rows
        .iter()
        .all(|r| r.test.micro_identity_holds() && r.dev.micro_identity_holds());
    verdict(
        ok && live,
        format!("4 crafted + 1000 random confusions, {} live evaluation rows", exp.table.rows.len() * 2),
    )
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = root.path().join(name);
        let args = [
            "scenafuse", "train", "--seed", "11", "--epochs", "2", "--variant", "full",
            "--set", "train=96", "--set", "dev=24", "--set", "test=24",
            "--out", out.to_str().unwrap(),
        ];
        assert_eq!(cli::dispatch(args), cli::EXIT_OK);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let files = ["checkpoint.scnf", "metrics.jsonl", "config.txt"];
    let identical = files.iter().all(|f| same(f));
    verdict(identical, format!("two seeded train runs compared on {files:?}"))
}

/// `ACCEPTANCE_ONLY=1,3,8` restricts a run to the listed criteria.
fn selection() -> Option<Vec<usize>> {
    let list = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(list.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

#[test]
fn acceptance_criteria() {
    let only = selection();
    let wanted = |id: usize| only.as_ref().is_none_or(|l| l.contains(&id));
    let mut results = Vec::new();
    let mut check = |id: usize, title: &str, f: &dyn Fn() -> Verdict| {
        if wanted(id) {
            results.push(run_criterion(id, title, f));
        }
    };
    check(1, "gradient fidelity", &gradient_fidelity);
    check(2, "equation shapes", &equation_shapes);
    check(3, "fusion algebra", &fusion_algebra);
    check(4, "attention structure", &attention_structure);
    check(5, "ablation identity", &ablation_identity);
    let exp = if [6, 7, 9].iter().any(|&id| wanted(id)) {
        catch_unwind(experiment).ok()
    } else {
        None
    };
    let failed = || verdict(false, "experiment failed");
    match &exp {
        Some(exp) => {
            check(6, "disambiguation experiment", &|| disambiguation(exp));
            check(7, "ablation direction", &|| ablation_direction(exp));
        }
        None => {
            check(6, "disambiguation experiment", &failed);
            check(7, "ablation direction", &failed);
        }
    }
    check(8, "complexity", &complexity);
    match &exp {
        Some(exp) => check(9, "metric identity", &|| metric_identity(exp)),
        None => check(9, "metric identity", &failed),
    }
    check(10, "determinism", &determinism);
    let passed = results.iter().filter(|&&p| p).count();
    report!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}

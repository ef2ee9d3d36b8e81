//! Acceptance checks. Each test prints one `PASS`/`FAIL` line before
//! asserting, so `cargo test --test acceptance -- --nocapture` gives the
//! summary.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;

use gssl_core::baselines::MaxSoftmax;
use gssl_core::commands::{self, Context};
use gssl_core::config::{ExperimentConfig, InitKind, ViewKind};
use gssl_core::datagen::{generate_domain, DomainSpec, Image, LabeledSample};
use gssl_core::experiment;
use gssl_core::gamma_train::{
    compute_gamma, masked_consistency_loss_batch, supervised_loss_batch, uncertainty_objective,
    UncertTrainConfig,
};
use gssl_core::masking::sample_mask;
use gssl_core::metrics::{self, EvalRecord};
use gssl_core::nnet::{Dropout, ModelConfig, ModelParams};
use gssl_core::seed;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gamma_matching() {
    let mut rng = seed::rng(1);
    let instances: Vec<(Vec<f64>, f64)> = (0..1000)
        .map(|_| {
            let n = rng.random_range(1..=2000);
            // Random reals collide with negligible probability; dedup anyway.
            let mut conf: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            conf.sort_by(f64::total_cmp);
            conf.dedup();
            (conf, rng.random::<f64>())
        })
        .collect();
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut ok = true;
    for (conf, target) in &instances {
        let g = compute_gamma(conf, *target).unwrap();
        let n = conf.len() as f64;
        let mean = conf.iter().filter(|&&c| c > g).count() as f64 / n;
        let err = (mean - target).abs();
        ok &= err <= 1.0 / n;
        worst = worst.max(err * n);
    }
    let elapsed = t0.elapsed();
    let pass = ok && elapsed < Duration::from_secs(1);
    report(1, "gamma matching", pass, &format!("worst |mean - target| = {worst:.3}/n, {elapsed:.2?}"));
    assert!(pass);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        dim: 8,
        blocks: 1,
        heads: 2,
        ffn_hidden: 16,
        num_classes: 3,
        dropout_rate: 0.1,
    }
}

fn domain(name: &str, count: usize, seed: u64) -> Vec<LabeledSample> {
    let mut spec = DomainSpec::preset(name, 3, seed).unwrap();
    spec.height = 16;
    spec.width = 16;
    spec.patch_size = 4;
    generate_domain(&spec, count).unwrap()
}

fn perturbed(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = seed::rng(seed.wrapping_mul(31));
    for (_, t) in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    p
}

/// Largest relative error over `params` central differences of the
/// combined objective for one batch, with the masks and threshold held at
/// the unperturbed values.
fn batch_gradient_error(batch: u64, params: usize) -> f64 {
    let source = domain("source", 1, 100 + batch);
    let target: Vec<Image> = domain("far", 1, 200 + batch).into_iter().map(|s| s.image).collect();
    let f_theta = perturbed(tiny_model(), 300 + batch);
    let f_phi = perturbed(tiny_model(), 400 + batch);
    let cfg = UncertTrainConfig {
        consistency_weight: 1.0,
        dropout: false,
        batch_size: 1,
        seed: 500 + batch,
        ..UncertTrainConfig::default()
    };
    let step = batch as usize;
    let src: Vec<&LabeledSample> = source.iter().collect();
    let tgt: Vec<&Image> = target.iter().collect();
    let out = uncertainty_objective(&f_theta, &f_phi, &tgt, &src, &cfg, step, true).unwrap();
    let analytic = out.grads.as_ref().unwrap().flatten();

    let view = seed::derive_indexed(cfg.seed, "view", &[step as u64, 0]);
    let mask = sample_mask(4, 4, cfg.p_mask, view).unwrap();
    let s_theta = f_theta.forward_image(tgt[0], None, Dropout::Off, false).unwrap().output;
    let selected = out.gamma.m_gamma.clone();
    let objective = |q: &ModelParams| {
        let masked = q.forward_image(tgt[0], Some(&mask), Dropout::Off, false).unwrap().output;
        let sup = q.forward_image(&src[0].image, None, Dropout::Off, false).unwrap().output;
        let lc = masked_consistency_loss_batch(&[&s_theta], &[&masked], &[&selected], cfg.temperature).unwrap();
        let ls = supervised_loss_batch(&[&sup], &[&src[0].labels]).unwrap();
        ls.value + lc.value
    };
    assert!((objective(&f_phi) - out.total(1.0)).abs() < 1e-12, "objective reconstruction drifted");

    let mut rng = seed::rng(600 + batch);
    let h = 1e-5;
    (0..params)
        .map(|_| {
            let idx = rng.random_range(0..f_phi.num_params());
            let mut plus = f_phi.clone();
            *plus.scalar_mut(idx) += h;
            let mut minus = f_phi.clone();
            *minus.scalar_mut(idx) -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let g = analytic[idx];
            (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_2_loss_gradients() {
    let t0 = Instant::now();
    let worst = (0..5).map(|b| batch_gradient_error(b, 20)).fold(0.0, f64::max);
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(60);
    report(2, "loss gradients", pass, &format!("max relative error {worst:.2e} over 5x20, {elapsed:.2?}"));
    assert!(pass);
}

/// Average precision as the mean, over accurate pixels, of the precision
/// when every pixel scoring at least as high counts as certain; and the
/// best F0.5 over every such cut. Quadratic, no sorting.
fn oracle(score: &[f64], accurate: &[bool]) -> (f64, f64) {
    let positives = accurate.iter().filter(|&&a| a).count() as f64;
    let cut = |t: f64| {
        let (mut tp, mut certain) = (0.0, 0.0);
        for (s, a) in score.iter().zip(accurate) {
            if *s >= t {
                certain += 1.0;
                if *a {
                    tp += 1.0;
                }
            }
        }
        (tp / certain, tp / positives)
    };
    let mut ap = 0.0;
    let mut best_f = 0.0f64;
    for (s, a) in score.iter().zip(accurate) {
        let (p, r) = cut(*s);
        if *a {
            ap += p;
        }
        let f = if p + r == 0.0 { 0.0 } else { 1.25 * p * r / (0.25 * p + r) };
        best_f = best_f.max(f);
    }
    (ap / positives, best_f)
}

#[test]
fn criterion_3_metric_oracle() {
    let mut rng = seed::rng(3);
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(1..=1000);
        // Coarse levels in half the instances to force ties.
        let levels = if checked % 2 == 0 { 0 } else { rng.random_range(2..20) };
        let score: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.random::<f64>();
                if levels == 0 {
                    u
                } else {
                    (u * levels as f64).floor()
                }
            })
            .collect();
        let bias = rng.random::<f64>();
        let accurate: Vec<bool> = score.iter().map(|_| rng.random::<f64>() < bias).collect();
        if !accurate.iter().any(|&a| a) {
            continue;
        }
        let record = EvalRecord {
            score: score.clone(),
            accurate: accurate.clone(),
            valid: vec![true; n],
        };
        let curve = metrics::pr_curve(&record).unwrap();
        let (f, _, _) = metrics::max_f_beta_with_pac(&curve, 0.5).unwrap();
        let (want_ap, want_f) = oracle(&score, &accurate);
        worst = worst.max((metrics::aupr(&curve) - want_ap).abs()).max((f - want_f).abs());
        checked += 1;
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(10);
    report(3, "metric oracle", pass, &format!("max deviation {worst:.1e} over 200 instances, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_7_masking_statistics() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..100 {
        let m = sample_mask(32, 32, 0.5, seed::derive_indexed(7, "mask", &[s])).unwrap();
        worst = worst.max((m.dropped_fraction() - 0.5).abs());
    }
    let extremes = (0..20).all(|s| {
        sample_mask(32, 32, 0.0, s).unwrap().dropped_fraction() == 0.0
            && sample_mask(32, 32, 1.0, s).unwrap().dropped_fraction() == 1.0
    });
    let elapsed = t0.elapsed();
    let pass = worst <= 0.06 && extremes && elapsed < Duration::from_secs(1);
    report(
        7,
        "masking statistics",
        pass,
        &format!("max |dropped - 0.5| = {worst:.4} over 100 masks, p in {{0,1}} exact: {extremes}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// Scaled-down scenario for the trend checks: 32x32 images, 4x4 patches and
/// the shipped domain presets.
const SCENARIO: &str = r#"
eval_domains = ["far"]
[data]
height = 32
width = 32
source_train = 200
pretrain_per_domain = 150
target_train = 200
test = 40
[model]
patch_size = 4
dim = 32
heads = 4
ffn_hidden = 64
[pretrain]
steps = 800
[task]
steps = 500
[uncertainty]
steps = 500
"#;

const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedResult {
    /// Far-domain (AUPR, MaxF0.5) per variant.
    far: BTreeMap<&'static str, (f64, f64)>,
    theta_frozen: bool,
}

struct Trends {
    seeds: Vec<SeedResult>,
    elapsed: Duration,
    trend_elapsed: Duration,
}

fn variant(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut c = base.clone();
    let u = &mut c.uncertainty;
    u.name = name.into();
    match name {
        "mask-narrow" => u.init = InitKind::Narrow,
        "mask-p25" => u.p_mask = 0.25,
        "mask-p75" => u.p_mask = 0.75,
        // Less colour-space augmentation, default crop scales.
        "candr-light" => {
            u.view = ViewKind::Candr;
            u.candr_preset = "light".into();
        }
        // Full jitter, different crop scales.
        "candr-scale" => {
            u.view = ViewKind::Candr;
            u.candr_preset = "full".into();
            u.crop_scale_min = 0.25;
            u.crop_scale_max = 0.75;
        }
        _ => {}
    }
    c
}

fn run_seed(base: &ExperimentConfig, s: u64) -> SeedResult {
    let mut cfg = base.clone();
    cfg.seed = s;
    let source = experiment::source_train(&cfg).unwrap();
    let target = experiment::target_train(&cfg).unwrap();
    let test = experiment::test_set(&cfg, "far").unwrap();
    let mut far = BTreeMap::new();
    let mut score = |name: &'static str, model: &ModelParams| {
        let r = metrics::evaluate_model(&MaxSoftmax { model, label: name.into() }, &test, "far").unwrap();
        far.insert(name, (r.aupr, r.max_f_half));
    };

    let mut nets = BTreeMap::new();
    for kind in [InitKind::General, InitKind::Narrow] {
        let data = experiment::pretrain_data(&cfg, kind).unwrap();
        let encoder = experiment::pretrain(&cfg, kind, &data).unwrap().params;
        let theta = experiment::train_f_theta(&cfg, &encoder, &source, kind.name()).unwrap().params;
        nets.insert(kind.name(), (encoder, theta));
    }
    score("maxs", &nets["general"].1);

    let mut theta_frozen = true;
    for name in ["mask", "mask-narrow", "mask-p25", "mask-p75", "candr-light", "candr-scale"] {
        let c = variant(&cfg, name);
        let (encoder, theta) = &nets[c.uncertainty.init.name()];
        let snapshot = store_bytes(theta);
        let ucfg = c.uncert_config().unwrap();
        let run = experiment::train_f_phi(&c, &ucfg, theta, encoder, &source, &target, name).unwrap();
        theta_frozen &= store_bytes(theta) == snapshot;
        score(name, &run.params);
    }
    SeedResult { far, theta_frozen }
}

fn store_bytes(p: &ModelParams) -> Vec<u8> {
    gssl_core::store::model_to_archive(p).unwrap().to_bytes()
}

fn trends() -> &'static Trends {
    static CELL: OnceLock<Trends> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = ExperimentConfig::parse(SCENARIO).unwrap();
        let t0 = Instant::now();
        let mut seeds = Vec::new();
        let mut trend_elapsed = Duration::ZERO;
        for &s in &SEEDS {
            let t = Instant::now();
            seeds.push(run_seed(&base, s));
            trend_elapsed += t.elapsed();
            for (k, (aupr, f)) in &seeds.last().unwrap().far {
                println!("seed {s} {k:>12}: far AUPR {aupr:.4} MaxF0.5 {f:.4}");
            }
        }
        Trends {
            seeds,
            elapsed: t0.elapsed(),
            trend_elapsed,
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn per_seed(f: impl Fn(&SeedResult) -> f64) -> Vec<f64> {
    trends().seeds.iter().map(f).collect()
}

#[test]
fn criterion_4_uncertainty_training_beats_max_softmax() {
    let t = trends();
    let gains = per_seed(|r| r.far["mask"].0 - r.far["maxs"].0);
    let m = median(gains.clone());
    let pass = m >= 0.02 && t.elapsed <= Duration::from_secs(30 * 60);
    report(
        4,
        "trained f_phi vs max-softmax on far",
        pass,
        &format!("median AUPR gain {m:+.4} (per seed {gains:+.4?}), pipeline {:.0?}", t.elapsed),
    );
    assert!(pass);
}

#[test]
fn criterion_5_general_init_at_least_narrow() {
    let t = trends();
    let general = median(per_seed(|r| r.far["mask"].0));
    let narrow = median(per_seed(|r| r.far["mask-narrow"].0));
    let pass = general >= narrow && t.elapsed <= Duration::from_secs(30 * 60);
    report(
        5,
        "general vs narrow init on far",
        pass,
        &format!("median AUPR general {general:.4} vs narrow {narrow:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_masking_less_sensitive_than_crop_resize() {
    let t = trends();
    let mask = per_seed(|r| (r.far["mask-p25"].1 - r.far["mask-p75"].1).abs());
    let candr = per_seed(|r| (r.far["candr-light"].1 - r.far["candr-scale"].1).abs());
    let (m, c) = (median(mask.clone()), median(candr.clone()));
    let pass = m <= c && t.trend_elapsed <= Duration::from_secs(45 * 60);
    report(
        6,
        "hyperparameter sensitivity",
        pass,
        &format!("median MaxF0.5 spread mask {m:.4} (per seed {mask:.4?}) vs crop-resize {c:.4} (per seed {candr:.4?})"),
    );
    assert!(pass);
}

const TINY: &str = r#"
seed = 11
eval_domains = ["source", "far"]
methods = ["maxs", "maxs-narrow", "ensemble", "mcd", "gmm", "oracle", "mask"]
[data]
num_classes = 3
height = 16
width = 16
source_train = 4
pretrain_per_domain = 2
target_train = 4
test = 2
[model]
patch_size = 4
dim = 8
blocks = 1
heads = 2
ffn_hidden = 16
[pretrain]
steps = 3
[task]
steps = 3
[uncertainty]
steps = 3
[baselines]
ensemble_size = 2
mcd_samples = 2
"#;

fn run_commands(out: &Path) {
    let ctx = Context::new(ExperimentConfig::parse(TINY).unwrap(), Some(out.to_path_buf()), false);
    commands::cmd_generate(&ctx).unwrap();
    commands::cmd_train_task(&ctx).unwrap();
    commands::cmd_train_uncertainty(&ctx).unwrap();
    commands::cmd_compare(&ctx).unwrap();
}

/// Relative path to bytes; resolved configs name their own output directory,
/// which is normalised away.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                let mut bytes = std::fs::read(&p).unwrap();
                if rel.starts_with("configs") {
                    bytes = String::from_utf8(bytes)
                        .unwrap()
                        .replace(&root.display().to_string(), "<out>")
                        .into_bytes();
                }
                out.insert(rel, bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn criterion_8_frozen_theta_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_commands(a.path());
    run_commands(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    let same_files = sa.len() == sb.len() && differing.is_empty();
    let frozen = trends().seeds.iter().all(|r| r.theta_frozen);
    let pass = same_files && frozen;
    report(
        8,
        "frozen theta and determinism",
        pass,
        &format!(
            "{} output files byte-identical across reruns: {same_files} {differing:?}; f_theta unchanged by every uncertainty run: {frozen}",
            sa.len()
        ),
    );
    assert!(pass);
}

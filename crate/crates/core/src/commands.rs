//! The five operator commands. Each reads and writes flat files under one
//! output directory:
//!
//! ```text
//! <out>/configs/<command>.toml        resolved configuration of each run
//! <out>/data/<domain>/<split>/        dataset directories
//! <out>/checkpoints/*.gssl            tensor archives
//! <out>/logs/*.csv                    per-step training logs
//! <out>/eval/metrics.csv              one row per (method, domain)
//! <out>/eval/curves/*.csv, plots/*.svg
//! <out>/compare/table.{md,csv}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{self, Ensemble, Mahalanobis, MaxSoftmax, McDropout, Scored, Scorer};
use crate::config::{ExperimentConfig, InitKind, Split};
use crate::datagen::{generate_domain, Image, LabeledSample};
use crate::error::{Error, Result};
use crate::experiment;
use crate::gamma_train::{TaskLogRow, UncertLogRow};
use crate::metrics::{self, MetricsReport};
use crate::nnet::{Dropout, ModelParams};
use crate::store;

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub overwrite: bool,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, overwrite: bool) -> Self {
        let out = out.unwrap_or_else(|| PathBuf::from(&config.out_dir));
        Context { config, out, overwrite }
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.gssl"))
    }

    fn log(&self, name: &str) -> PathBuf {
        self.out.join("logs").join(format!("{name}.csv"))
    }

    fn data(&self, domain: &str, split: Split) -> PathBuf {
        store::dataset_dir(&self.out, domain, split.name())
    }

    fn write_resolved(&self, command: &str) -> Result<()> {
        let mut resolved = self.config.clone();
        resolved.out_dir = self.out.display().to_string();
        store::write_text(
            &self.out.join("configs").join(format!("{command}.toml")),
            &resolved.to_toml(),
        )
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.overwrite {
            return Err(Error::Usage(format!(
                "{} already exists (pass --overwrite to replace it)",
                path.display()
            )));
        }
        Ok(())
    }

    fn load_split(&self, domain: &str, split: Split) -> Result<Vec<LabeledSample>> {
        let dir = self.data(domain, split);
        if !dir.exists() {
            return Err(Error::Usage(format!(
                "dataset {} is missing; run `generate` first",
                dir.display()
            )));
        }
        Ok(store::read_dataset(&dir)?.1)
    }

    fn pretrain_split(&self, kind: InitKind) -> Result<Vec<LabeledSample>> {
        match kind {
            InitKind::General => {
                let mut all = Vec::new();
                for d in &self.config.data.domains {
                    all.extend(self.load_split(&d.name, Split::Pretrain)?);
                }
                Ok(all)
            }
            InitKind::Narrow => {
                let src = &self.config.data.source_domain;
                Ok(store::read_dataset(&self.out.join("data").join(src).join("pretrain-narrow"))?.1)
            }
        }
    }
}

/// Writes every dataset the later commands read.
pub fn cmd_generate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let k = cfg.data.num_classes;
    let mut jobs: Vec<(String, Split, usize)> = vec![
        (cfg.data.source_domain.clone(), Split::Train, cfg.data.source_train),
        (cfg.data.target_domain.clone(), Split::Train, cfg.data.target_train),
    ];
    for d in &cfg.data.domains {
        jobs.push((d.name.clone(), Split::Pretrain, cfg.data.pretrain_per_domain));
    }
    for d in &cfg.eval_domains {
        jobs.push((d.clone(), Split::Test, cfg.data.test));
    }
    for (domain, split, count) in jobs {
        let samples = generate_domain(&cfg.domain_spec(&domain, split)?, count)?;
        store::write_dataset(&ctx.data(&domain, split), &domain, k, &samples, ctx.overwrite)?;
        log::info!("wrote {count} {domain}/{} samples", split.name());
    }
    let narrow = experiment::pretrain_data(cfg, InitKind::Narrow)?;
    let dir = ctx.out.join("data").join(&cfg.data.source_domain).join("pretrain-narrow");
    store::write_dataset(&dir, &cfg.data.source_domain, k, &narrow, ctx.overwrite)?;
    ctx.write_resolved("generate")
}

fn task_log_csv(log: &[TaskLogRow]) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.accuracy);
    }
    s
}

fn uncert_log_csv(log: &[UncertLogRow]) -> String {
    let mut s = String::from("step,l_sup,l_c,gamma,mean_mc,mean_mgamma\n");
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.l_sup, r.l_c, r.gamma, r.mean_mc, r.mean_mgamma
        );
    }
    s
}

/// Pretraining (general and narrow), the task networks on top of each,
/// ensemble members and the source-fitted gaussians.
pub fn cmd_train_task(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let source = ctx.load_split(&cfg.data.source_domain, Split::Train)?;
    for name in ["encoder_general", "encoder_narrow", "theta_general", "theta_narrow", "gaussians_general"] {
        ctx.guard(&ctx.checkpoint(name))?;
    }
    let mut general_encoder = None;
    for kind in [InitKind::General, InitKind::Narrow] {
        let data = ctx.pretrain_split(kind)?;
        let run = experiment::pretrain(cfg, kind, &data)?;
        let enc_name = format!("encoder_{}", kind.name());
        store::save_model(&ctx.checkpoint(&enc_name), &run.params)?;
        store::write_text(&ctx.log(&enc_name), &task_log_csv(&run.log))?;
        let encoder = store::load_model(&ctx.checkpoint(&enc_name))?;

        let theta = experiment::train_f_theta(cfg, &encoder, &source, kind.name())?;
        let theta_name = format!("theta_{}", kind.name());
        store::save_model(&ctx.checkpoint(&theta_name), &theta.params)?;
        store::write_text(&ctx.log(&theta_name), &task_log_csv(&theta.log))?;
        log::info!("trained {theta_name}");
        if kind == InitKind::General {
            general_encoder = Some(encoder);
        }
    }
    let encoder = general_encoder.expect("general pretraining ran");
    for m in 0..cfg.baselines.ensemble_size {
        let run = experiment::train_f_theta(cfg, &encoder, &source, &format!("ensemble{m}"))?;
        store::save_model(&ctx.checkpoint(&format!("ensemble_{m}")), &run.params)?;
        store::write_text(&ctx.log(&format!("ensemble_{m}")), &task_log_csv(&run.log))?;
    }
    let theta = store::load_model(&ctx.checkpoint("theta_general"))?;
    let (feats, labels) = baselines::patch_features(&theta, &source)?;
    let g = baselines::fit_gaussians(&feats, theta.config.dim, &labels, theta.config.num_classes)?;
    store::save_gaussians(&ctx.checkpoint("gaussians_general"), &g)?;
    ctx.write_resolved("train-task")
}

/// Trains `phi_<name>` against the frozen task network of the configured
/// init.
pub fn cmd_train_uncertainty(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let u = &cfg.uncertainty;
    let name = format!("phi_{}", u.name);
    ctx.guard(&ctx.checkpoint(&name))?;
    let init = u.init.name();
    let theta = load_required(ctx, &format!("theta_{init}"), &u.name)?;
    let encoder = load_required(ctx, &format!("encoder_{init}"), &u.name)?;
    let source = ctx.load_split(&cfg.data.source_domain, Split::Train)?;
    let target: Vec<Image> = ctx
        .load_split(&cfg.data.target_domain, Split::Train)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let ucfg = cfg.uncert_config()?;
    let run = experiment::train_f_phi(cfg, &ucfg, &theta, &encoder, &source, &target, &u.name)?;
    store::save_model(&ctx.checkpoint(&name), &run.params)?;
    store::write_text(&ctx.log(&name), &uncert_log_csv(&run.log))?;
    ctx.write_resolved(&format!("train-uncertainty-{}", u.name))
}

fn load_required(ctx: &Context, checkpoint: &str, method: &str) -> Result<ModelParams> {
    let path = ctx.checkpoint(checkpoint);
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            method: method.to_string(),
            path,
        });
    }
    store::load_model(&path)
}

/// Scores with the task network's prediction and a perfect certainty: 1 on
/// accurate pixels, 0 elsewhere. A reference point for the metrics.
struct Oracle<'a> {
    model: &'a ModelParams,
    test: &'a [LabeledSample],
}

impl Scorer for Oracle<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, image: &Image, index: u64) -> Result<Scored> {
        let out = self.model.forward_image(image, None, Dropout::Off, false)?.output;
        let labels = &self.test[index as usize].labels;
        Ok(Scored {
            score: out.pred.iter().zip(labels).map(|(p, l)| f64::from(u8::from(p == l))).collect(),
            pred: out.pred,
        })
    }
}

/// State needed to score one method.
enum Loaded {
    Single(ModelParams),
    Members(Vec<ModelParams>),
    Gmm(ModelParams, baselines::ClassGaussians),
}

fn load_method(ctx: &Context, method: &str) -> Result<Loaded> {
    let cfg = &ctx.config;
    Ok(match method {
        "maxs" | "mcd" | "oracle" => Loaded::Single(load_required(ctx, "theta_general", method)?),
        "maxs-narrow" => Loaded::Single(load_required(ctx, "theta_narrow", method)?),
        "ensemble" => Loaded::Members(
            (0..cfg.baselines.ensemble_size)
                .map(|m| load_required(ctx, &format!("ensemble_{m}"), method))
                .collect::<Result<_>>()?,
        ),
        "gmm" => {
            let theta = load_required(ctx, "theta_general", method)?;
            let path = ctx.checkpoint("gaussians_general");
            if !path.exists() {
                return Err(Error::MissingCheckpoint {
                    method: method.into(),
                    path,
                });
            }
            Loaded::Gmm(theta, store::load_gaussians(&path)?)
        }
        other => Loaded::Single(load_required(ctx, &format!("phi_{other}"), other)?),
    })
}

fn evaluate_method(ctx: &Context, method: &str, loaded: &Loaded, test: &[LabeledSample], domain: &str) -> Result<MetricsReport> {
    let label = method.to_string();
    match (method, loaded) {
        ("mcd", Loaded::Single(m)) => metrics::evaluate_model(
            &McDropout {
                model: m,
                samples: ctx.config.baselines.mcd_samples,
                seed: crate::seed::derive(ctx.config.seed, &format!("mcd/{domain}")),
                label,
            },
            test,
            domain,
        ),
        ("oracle", Loaded::Single(m)) => metrics::evaluate_model(&Oracle { model: m, test }, test, domain),
        (_, Loaded::Single(m)) => metrics::evaluate_model(&MaxSoftmax { model: m, label }, test, domain),
        (_, Loaded::Members(ms)) => metrics::evaluate_model(&Ensemble { models: ms, label }, test, domain),
        (_, Loaded::Gmm(m, g)) => metrics::evaluate_model(
            &Mahalanobis {
                model: m,
                gaussians: g,
                label,
            },
            test,
            domain,
        ),
    }
}

/// Evaluates every configured method on every configured domain.
pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<MetricsReport>> {
    let cfg = &ctx.config;
    let loaded: Vec<(String, Loaded)> = cfg
        .methods
        .iter()
        .map(|m| load_method(ctx, m).map(|l| (m.clone(), l)))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for domain in &cfg.eval_domains {
        let test = ctx.load_split(domain, Split::Test)?;
        for (method, l) in &loaded {
            let r = evaluate_method(ctx, method, l, &test, domain)?;
            log::info!("{method} on {domain}: AUPR {:.4}", r.aupr);
            reports.push(r);
        }
    }
    let eval = ctx.out.join("eval");
    let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        store::write_text(
            &eval.join("curves").join(format!("{}_{}.csv", r.method, r.domain)),
            &r.curve_csv(),
        )?;
    }
    store::write_text(&eval.join("metrics.csv"), &csv)?;
    for domain in &cfg.eval_domains {
        let of_domain: Vec<&MetricsReport> = reports.iter().filter(|r| &r.domain == domain).collect();
        store::write_text(&eval.join("plots").join(format!("{domain}.svg")), &sweep_svg(domain, &of_domain))?;
    }
    ctx.write_resolved("evaluate")?;
    Ok(reports)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// F0.5 against p(a,c) over every threshold, one polyline per method.
pub fn sweep_svg(domain: &str, reports: &[&MetricsReport]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let sx = |x: f64| pad + x * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1}" fill="none" stroke="black"/>"#,
        sx(0.0),
        sy(1.0),
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">p(a,c)</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">F0.5</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" font-size="13" text-anchor="middle">{domain}</text>"#, w / 2.0);
    for (i, r) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r
            .curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.pac), sy(metrics::f_beta(p.precision, p.recall, 0.5))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{} (AUPR {:.3})</text>"#,
            w - pad - 150.0,
            pad + 14.0 * i as f64,
            r.method,
            r.aupr
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub domain: String,
    pub aupr: String,
    pub max_f_half: String,
    pub pac: String,
    pub threshold: String,
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MetricsReport::CSV_HEADER => {}
        _ => return Err(err(1, format!("expected header `{}`", MetricsReport::CSV_HEADER))),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(err(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            for v in &f[2..] {
                v.parse::<f64>()
                    .map_err(|_| err(i + 1, format!("`{v}` is not a number")))?;
            }
            Ok(MetricsRow {
                method: f[0].into(),
                domain: f[1].into(),
                aupr: f[2].into(),
                max_f_half: f[3].into(),
                pac: f[4].into(),
                threshold: f[5].into(),
            })
        })
        .collect()
}

/// Evaluates the configured methods and tabulates `MaxF0.5 @ p(a,c)` and
/// AUPR per method and domain, straight from the written metrics CSV.
pub fn cmd_compare(ctx: &Context) -> Result<String> {
    let cfg = &ctx.config;
    for m in &cfg.methods {
        load_method(ctx, m)?;
    }
    cmd_evaluate(ctx)?;
    let path = ctx.out.join("eval").join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = parse_metrics_csv(&text, &path)?;
    let find = |m: &str, d: &str| rows.iter().find(|r| r.method == m && r.domain == d);

    let mut md = String::from("| method |");
    let mut sep = String::from("|---|");
    for d in &cfg.eval_domains {
        let _ = write!(md, " {d} MaxF0.5@p(a,c) | {d} AUPR |");
        sep.push_str("---|---|");
    }
    md.push('\n');
    md.push_str(&sep);
    md.push('\n');
    let mut csv = String::from("method");
    for d in &cfg.eval_domains {
        let _ = write!(csv, ",{d}_max_f_half,{d}_pac,{d}_aupr");
    }
    csv.push('\n');
    for m in &cfg.methods {
        let _ = write!(md, "| {m} |");
        csv.push_str(m);
        for d in &cfg.eval_domains {
            let r = find(m, d).ok_or_else(|| Error::Data(format!("metrics.csv has no row for {m} on {d}")))?;
            let _ = write!(md, " {}@{} | {} |", r.max_f_half, r.pac, r.aupr);
            let _ = write!(csv, ",{},{},{}", r.max_f_half, r.pac, r.aupr);
        }
        md.push('\n');
        csv.push('\n');
    }
    let dir = ctx.out.join("compare");
    store::write_text(&dir.join("table.md"), &md)?;
    store::write_text(&dir.join("table.csv"), &csv)?;
    ctx.write_resolved("compare")?;
    Ok(md)
}
